#!/usr/bin/env python3
"""Independent parse-and-count over a bundle document.

Walks the raw JSON only — no graph code — and emits the manifest the
feed-shape acceptance check compares ingestion results against: object counts
by type, relationship counts by relationship_type, and the distinct
(type, value) observable count.

Usage: python3 tools/make_manifest.py fixtures/bundle_attack_shaped.json > fixtures/manifest_attack_shaped.json
"""

import json
import sys
from collections import Counter


def count_bundle(doc: dict) -> dict:
    objects = doc["objects"]
    by_type = Counter(obj["type"] for obj in objects)
    rel_types = Counter(
        obj["relationship_type"] for obj in objects if obj["type"] == "relationship"
    )
    observables = set()
    for obj in objects:
        for entry in obj.get("observables", []):
            observables.add((entry["type"], entry["value"].lower()))
    node_count = sum(n for t, n in by_type.items() if t != "relationship")
    return {
        "objects_by_type": dict(sorted(by_type.items())),
        "relationships_by_type": dict(sorted(rel_types.items())),
        "node_count": node_count,
        "edge_count": by_type.get("relationship", 0),
        "distinct_observables": len(observables),
    }


def main() -> None:
    with open(sys.argv[1], encoding="utf-8") as fh:
        doc = json.load(fh)
    json.dump(count_bundle(doc), sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
