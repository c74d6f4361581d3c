import json
import random

import pytest

from huntloop.attackdb import (
    AttackGraph,
    MalformedBundleError,
    UnknownNodeError,
    WrongKindError,
    affinity,
    candidates_for,
    ingest_bundle,
    ioa_of,
    load_snapshot,
    neighbors,
    observables_of,
    save_snapshot,
)
from huntloop.observables import Observable

from .oracles import brute_affinity, graph_as_raw


def obs(otype, value):
    return Observable(otype, value)


# --- ingest_bundle ----------------------------------------------------------


def test_empty_bundle_empty_base_identity():
    graph, report = ingest_bundle({"type": "bundle", "objects": []})
    assert graph.nodes == {} and graph.edges == ()
    assert (report.nodes_added, report.nodes_merged, report.edges_added, report.rejected) == (0, 0, 0, 0)


def test_g1_counts(g1):
    assert len(g1.nodes) == 8
    assert set(g1.observable_index) == {
        obs("file-hash-sha256", "h1"),
        obs("file-hash-sha256", "h2"),
        obs("file-hash-sha256", "h3"),
        obs("registry-key", "r1"),
        obs("registry-key", "r2"),
        obs("mutex", "mx1"),
        obs("domain", "d1"),
        obs("domain", "d2"),
    }
    assert len(g1.edges) == 7


def test_incompatible_relationship_rejected(g1_bundle):
    bad = json.loads(json.dumps(g1_bundle))
    bad["objects"].append(
        {"type": "relationship", "relationship_type": "indicates", "source_ref": "M1", "target_ref": "TQ1"}
    )
    graph, report = ingest_bundle(bad)
    assert report.rejected == 1
    assert report.rejections[0]["reason"] == "incompatible-relationship-kind"
    assert len(graph.nodes) == 8 and len(graph.edges) == 7  # rest ingested


def test_dangling_reference_rejected_ingestion_continues(g1_bundle):
    bad = json.loads(json.dumps(g1_bundle))
    bad["objects"].append(
        {"type": "relationship", "relationship_type": "uses", "source_ref": "M9", "target_ref": "TQ1"}
    )
    graph, report = ingest_bundle(bad)
    assert report.rejected == 1
    assert report.rejections[0]["reason"] == "dangling-reference"
    assert len(graph.edges) == 7


def test_malformed_document_raises():
    with pytest.raises(MalformedBundleError):
        ingest_bundle({"type": "not-a-bundle", "objects": []})
    with pytest.raises(MalformedBundleError):
        ingest_bundle({"type": "bundle"})


def test_duplicate_node_merge_lww_props_union_observables(g1_bundle, g1):
    update = {
        "type": "bundle",
        "objects": [
            {"type": "malware", "id": "M1", "name": "alpha-renamed"},
            {
                "type": "observed-data",
                "id": "OD1",
                "x_indicative": True,
                "observables": [{"type": "domain", "value": "d9"}],
            },
        ],
    }
    merged, report = ingest_bundle(update, g1)
    assert report.nodes_merged == 2 and report.nodes_added == 0
    assert merged.nodes["M1"].name == "alpha-renamed"
    od1 = merged.nodes["OD1"]
    assert obs("domain", "d9") in od1.observables and obs("domain", "d1") in od1.observables
    assert od1.indicative is True


def test_kind_conflict_rejected(g1_bundle, g1):
    update = {"type": "bundle", "objects": [{"type": "tool", "id": "M1", "name": "not-malware"}]}
    merged, report = ingest_bundle(update, g1)
    assert report.rejected == 1 and report.rejections[0]["reason"] == "kind-conflict"
    assert merged.nodes["M1"].kind == "malware"


def test_ingestion_idempotent(g1_bundle, g1):
    twice, report = ingest_bundle(g1_bundle, g1)
    assert report.nodes_added == 0 and report.edges_added == 0
    assert twice.to_json() == g1.to_json()


def test_trusted_sources_filter(g1_bundle):
    doc = json.loads(json.dumps(g1_bundle))
    for item in doc["objects"]:
        item["x_source"] = "vendor-feed" if item.get("id") != "M2" else "randomposter"
    graph, report = ingest_bundle(doc, trusted_sources=["vendor-feed"])
    assert "M2" not in graph.nodes
    assert any(r["reason"] == "untrusted-source" for r in report.rejections)


def test_unknown_object_type_rejected_rest_kept(g1_bundle):
    doc = json.loads(json.dumps(g1_bundle))
    doc["objects"].append({"type": "course-of-action", "id": "CA1", "name": "nope"})
    graph, report = ingest_bundle(doc)
    assert len(graph.nodes) == 8
    assert any(r["reason"] == "unknown-object-type" for r in report.rejections)


# --- queries ------------------------------------------------------------------


def test_ioa_of_g1(g1):
    assert ioa_of(g1, "M1") == {"TQ1", "TQ2"}
    assert ioa_of(g1, "M2") == {"TQ2"}


def test_ioa_of_no_uses_edges(g1_bundle):
    doc = json.loads(json.dumps(g1_bundle))
    doc["objects"].append({"type": "malware", "id": "M3", "name": "gamma"})
    graph, _ = ingest_bundle(doc)
    assert ioa_of(graph, "M3") == frozenset()


def test_ioa_of_errors(g1):
    with pytest.raises(UnknownNodeError):
        ioa_of(g1, "M9")
    with pytest.raises(WrongKindError):
        ioa_of(g1, "TQ1")


def test_affinity_g1(g1):
    assert affinity(g1, obs("registry-key", "r1"), "TQ1") == 2
    assert affinity(g1, obs("domain", "d1"), "TQ2") == 2
    assert affinity(g1, obs("domain", "d9"), "TQ1") == 0
    with pytest.raises(UnknownNodeError):
        affinity(g1, obs("domain", "d1"), "TQ9")
    with pytest.raises(WrongKindError):
        affinity(g1, obs("domain", "d1"), "M1")


def test_observables_of_g1(g1):
    assert observables_of(g1, "M1") == {
        obs("file-hash-sha256", "h1"),
        obs("file-hash-sha256", "h2"),
        obs("registry-key", "r1"),
        obs("mutex", "mx1"),
        obs("domain", "d1"),
        obs("domain", "d2"),
    }
    assert observables_of(g1, "M1", indicative_only=True) == {obs("file-hash-sha256", "h1")}


def test_observables_of_no_observed_data(g1_bundle):
    doc = json.loads(json.dumps(g1_bundle))
    doc["objects"].append({"type": "malware", "id": "M3", "name": "gamma"})
    graph, _ = ingest_bundle(doc)
    assert observables_of(graph, "M3") == frozenset()


def test_candidates_for_g1(g1):
    assert candidates_for(g1, [obs("registry-key", "r1")]) == {"M1": frozenset({obs("registry-key", "r1")})}
    both = candidates_for(g1, [obs("domain", "d1")])
    assert set(both) == {"M1", "M2"}
    assert candidates_for(g1, []) == {}


# --- random-graph properties ---------------------------------------------------


def random_bundle(rng: random.Random, max_nodes: int = 50) -> dict:
    n_tech = rng.randint(1, 6)
    n_mal = rng.randint(1, 6)
    n_od = rng.randint(0, max(1, (max_nodes - n_tech - n_mal) // 2))
    values = [f"v{i}" for i in range(rng.randint(1, 10))]
    otypes = ["file-hash-sha256", "registry-key", "domain", "mutex", "process-name", "ip"]
    objects = []
    for i in range(n_tech):
        objects.append({"type": "attack-pattern", "id": f"T{i}", "name": f"tech {i}"})
    for i in range(n_mal):
        objects.append({"type": "malware", "id": f"M{i}", "name": f"mal {i}"})
        for t in range(n_tech):
            if rng.random() < 0.5:
                objects.append(
                    {"type": "relationship", "relationship_type": "uses", "source_ref": f"M{i}", "target_ref": f"T{t}"}
                )
    for i in range(n_od):
        chosen = rng.sample(values, k=rng.randint(1, min(4, len(values))))
        objects.append(
            {
                "type": "observed-data",
                "id": f"OD{i}",
                "x_indicative": rng.random() < 0.3,
                "observables": [{"type": rng.choice(otypes[:3]), "value": v} for v in chosen],
            }
        )
        for m in range(n_mal):
            if rng.random() < 0.4:
                objects.append(
                    {
                        "type": "relationship",
                        "relationship_type": "part-of",
                        "source_ref": f"OD{i}",
                        "target_ref": f"M{m}",
                    }
                )
    return {"type": "bundle", "objects": objects}


def test_affinity_matches_bruteforce_on_random_graphs():
    rng = random.Random(1234)
    for _ in range(25):
        graph, _ = ingest_bundle(random_bundle(rng))
        nodes, edges = graph_as_raw(graph)
        techniques = sorted(graph.kind_index["attack-pattern"])
        for observable in sorted(graph.observable_index):
            for technique in techniques:
                assert affinity(graph, observable, technique) == brute_affinity(
                    nodes, edges, observable, technique
                )


def test_index_consistency_rebuild_equals_stored():
    rng = random.Random(99)
    for _ in range(10):
        graph, _ = ingest_bundle(random_bundle(rng))
        rebuilt_obs, rebuilt_kind, rebuilt_pop = graph.rebuild_indexes()
        assert rebuilt_obs == graph.observable_index
        assert rebuilt_kind == graph.kind_index
        assert rebuilt_pop == graph.pop_level


def test_monotonicity_adding_bundle_never_decreases_affinity(g1, g1_bundle):
    rng = random.Random(5)
    extra = random_bundle(rng)
    merged, _ = ingest_bundle(extra, g1)
    for observable in sorted(g1.observable_index):
        for technique in sorted(g1.kind_index["attack-pattern"]):
            assert affinity(merged, observable, technique) >= affinity(g1, observable, technique)


def test_ioa_subset_of_attack_patterns():
    rng = random.Random(7)
    for _ in range(10):
        graph, _ = ingest_bundle(random_bundle(rng))
        for malware in sorted(graph.kind_index["malware"]):
            assert ioa_of(graph, malware) <= graph.kind_index["attack-pattern"]


# --- snapshot + misc ---------------------------------------------------------------


def test_snapshot_round_trip(g1, tmp_path):
    path = str(tmp_path / "snap.json")
    save_snapshot(g1, path)
    loaded = load_snapshot(path)
    assert loaded.to_json() == g1.to_json()


def test_pop_levels(g1):
    assert g1.pop_level["TQ1"] == "technique"
    assert g1.pop_level["M1"] == "tool-malware"
    assert g1.pop_level["I1"] == "ioc"
    assert g1.pop_level["OD1"] == "artifact"  # behavioral enrichment, not indicator-tagged


def test_neighbors_subgraph(g1):
    sub = neighbors(g1, "M1", depth=1)
    ids = {n["id"] for n in sub["nodes"]}
    assert ids == {"M1", "TQ1", "TQ2", "I1", "OD1", "OD2"}
    with pytest.raises(UnknownNodeError):
        neighbors(g1, "nope")


def test_graph_snapshot_is_stable_under_reads(g1):
    before = g1.to_json()
    ioa_of(g1, "M1")
    observables_of(g1, "M1", indicative_only=True)
    candidates_for(g1, [obs("domain", "d1")])
    affinity(g1, obs("registry-key", "r1"), "TQ1")
    assert g1.to_json() == before
