"""CTI knowledge graph: STIX-subset bundle ingestion and attack-knowledge queries.

The graph holds SDO nodes layered along the Pyramid of Pain, with observables
embedded in observed-data nodes and indexed for reverse lookup. Snapshots are
immutable; ingestion builds a new snapshot off-line and the caller publishes it
atomically (swap a reference), so concurrent readers never see a partial graph.
"""

from __future__ import annotations

import json
import time
import urllib.request
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .observables import Observable, ObservableError

SDO_KINDS = (
    "tactic",
    "attack-pattern",
    "malware",
    "tool",
    "campaign",
    "intrusion-set",
    "indicator",
    "observed-data",
)

# Bundle object type -> node kind. Tactics ride in as the custom x-tactic type.
_BUNDLE_KIND = {k: k for k in SDO_KINDS if k != "tactic"}
_BUNDLE_KIND["x-tactic"] = "tactic"

REL_KINDS = ("uses", "indicates", "attributed-to", "part-of", "contains")

# Fixed (source kind, relationship kind, destination kind) compatibility table.
# Observable containment ("contains") is embedded in observed-data nodes and
# never appears as a graph edge.
RELATIONSHIP_COMPAT = frozenset(
    {
        ("malware", "uses", "attack-pattern"),
        ("tool", "uses", "attack-pattern"),
        ("campaign", "uses", "attack-pattern"),
        ("intrusion-set", "uses", "attack-pattern"),
        ("campaign", "uses", "malware"),
        ("campaign", "uses", "tool"),
        ("intrusion-set", "uses", "malware"),
        ("intrusion-set", "uses", "tool"),
        ("indicator", "indicates", "malware"),
        ("indicator", "indicates", "tool"),
        ("indicator", "indicates", "campaign"),
        ("indicator", "indicates", "intrusion-set"),
        ("observed-data", "part-of", "malware"),
        ("observed-data", "part-of", "campaign"),
        ("malware", "part-of", "campaign"),
        ("tool", "part-of", "campaign"),
        ("attack-pattern", "part-of", "tactic"),
        ("campaign", "attributed-to", "intrusion-set"),
        ("malware", "attributed-to", "intrusion-set"),
    }
)

POP_TECHNIQUE = "technique"
POP_TOOL_MALWARE = "tool-malware"
POP_IOC = "ioc"
POP_ARTIFACT = "artifact"


class AttackDBError(Exception):
    """Base for knowledge-graph errors."""


class MalformedBundleError(AttackDBError):
    """The document is not structurally a bundle."""


class UnknownNodeError(AttackDBError):
    """A referenced node id does not exist in the graph."""


class WrongKindError(AttackDBError):
    """A node exists but has an incompatible kind for the operation."""


@dataclass(frozen=True)
class SdoNode:
    id: str
    kind: str
    name: str
    # indicator nodes carry the parsed pattern observable; observed-data nodes
    # carry their embedded observables and the indicative flag
    pattern: Observable | None = None
    observables: frozenset[Observable] = frozenset()
    indicative: bool = False
    props: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Relationship:
    src: str
    dst: str
    rkind: str


@dataclass
class IngestReport:
    nodes_added: int = 0
    nodes_merged: int = 0
    edges_added: int = 0
    edges_merged: int = 0
    rejections: list[dict] = field(default_factory=list)

    @property
    def rejected(self) -> int:
        return len(self.rejections)

    def reject(self, reason: str, detail: str) -> None:
        self.rejections.append({"reason": reason, "detail": detail})

    def to_json(self) -> dict:
        return {
            "nodes_added": self.nodes_added,
            "nodes_merged": self.nodes_merged,
            "edges_added": self.edges_added,
            "edges_merged": self.edges_merged,
            "rejected": self.rejected,
            "rejections": list(self.rejections),
        }


def _pop_level(node: SdoNode) -> str:
    if node.kind in ("tactic", "attack-pattern"):
        return POP_TECHNIQUE
    if node.kind in ("malware", "tool", "campaign", "intrusion-set"):
        return POP_TOOL_MALWARE
    if node.kind == "indicator":
        return POP_IOC
    return POP_IOC if node.indicative else POP_ARTIFACT


class AttackGraph:
    """Immutable snapshot of the attack knowledge graph.

    Indexes (observable index, kind index, adjacency, PoP levels) are derived
    from nodes+edges at construction; `rebuild_indexes` re-derives them so the
    index-consistency invariant is directly checkable.
    """

    __slots__ = ("nodes", "edges", "observable_index", "kind_index", "pop_level", "_out", "_in")

    def __init__(self, nodes: Mapping[str, SdoNode], edges: Iterable[Relationship]):
        self.nodes: dict[str, SdoNode] = dict(nodes)
        self.edges: tuple[Relationship, ...] = tuple(edges)
        obs_index, kind_index, pop, out_adj, in_adj = self._derive(self.nodes, self.edges)
        self.observable_index = obs_index
        self.kind_index = kind_index
        self.pop_level = pop
        self._out = out_adj
        self._in = in_adj

    @staticmethod
    def _derive(nodes, edges):
        obs_index: dict[Observable, set[str]] = {}
        kind_index: dict[str, set[str]] = {k: set() for k in SDO_KINDS}
        pop: dict[str, str] = {}
        out_adj: dict[str, list[Relationship]] = {}
        in_adj: dict[str, list[Relationship]] = {}
        for nid, node in nodes.items():
            kind_index[node.kind].add(nid)
            pop[nid] = _pop_level(node)
            for obs in node.observables:
                obs_index.setdefault(obs, set()).add(nid)
        for edge in edges:
            out_adj.setdefault(edge.src, []).append(edge)
            in_adj.setdefault(edge.dst, []).append(edge)
        frozen_obs = {o: frozenset(ids) for o, ids in obs_index.items()}
        frozen_kind = {k: frozenset(ids) for k, ids in kind_index.items()}
        return frozen_obs, frozen_kind, pop, out_adj, in_adj

    @classmethod
    def empty(cls) -> "AttackGraph":
        return cls({}, ())

    def rebuild_indexes(self):
        """Re-derive (observable index, kind index, pop levels) from raw nodes/edges."""
        obs, kind, pop, _, _ = self._derive(self.nodes, self.edges)
        return obs, kind, pop

    def node(self, node_id: str) -> SdoNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNodeError(f"unknown node id: {node_id!r}") from None

    def out_edges(self, node_id: str, rkind: str | None = None) -> list[Relationship]:
        edges = self._out.get(node_id, [])
        return edges if rkind is None else [e for e in edges if e.rkind == rkind]

    def in_edges(self, node_id: str, rkind: str | None = None) -> list[Relationship]:
        edges = self._in.get(node_id, [])
        return edges if rkind is None else [e for e in edges if e.rkind == rkind]

    def all_observables(self) -> frozenset[Observable]:
        return frozenset(self.observable_index)

    def to_json(self) -> dict:
        nodes = []
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            entry: dict = {"id": n.id, "kind": n.kind, "name": n.name}
            if n.pattern is not None:
                entry["pattern"] = n.pattern.to_json()
            if n.observables:
                entry["observables"] = [o.to_json() for o in sorted(n.observables)]
            if n.kind == "observed-data":
                entry["indicative"] = n.indicative
            if n.props:
                entry["props"] = dict(n.props)
            nodes.append(entry)
        edges = sorted(
            ({"src": e.src, "dst": e.dst, "rkind": e.rkind} for e in self.edges),
            key=lambda d: (d["src"], d["rkind"], d["dst"]),
        )
        return {"nodes": nodes, "edges": edges}

    @classmethod
    def from_json(cls, data: Mapping) -> "AttackGraph":
        nodes = {}
        for entry in data.get("nodes", []):
            pattern = Observable.from_json(entry["pattern"]) if "pattern" in entry else None
            observables = frozenset(Observable.from_json(o) for o in entry.get("observables", []))
            nodes[entry["id"]] = SdoNode(
                id=entry["id"],
                kind=entry["kind"],
                name=entry.get("name", ""),
                pattern=pattern,
                observables=observables,
                indicative=bool(entry.get("indicative", False)),
                props=dict(entry.get("props", {})),
            )
        edges = tuple(Relationship(e["src"], e["dst"], e["rkind"]) for e in data.get("edges", []))
        return cls(nodes, edges)


def save_snapshot(graph: AttackGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph.to_json(), fh, sort_keys=True, indent=1)


def load_snapshot(path: str) -> AttackGraph:
    with open(path, encoding="utf-8") as fh:
        return AttackGraph.from_json(json.load(fh))


def _parse_pattern(raw: str) -> Observable:
    if not isinstance(raw, str) or ":" not in raw:
        raise ObservableError(f"bad indicator pattern: {raw!r}")
    otype, _, value = raw.partition(":")
    return Observable(otype.strip(), value)


def ingest_bundle(
    bundle: Mapping,
    base: AttackGraph | None = None,
    trusted_sources: Iterable[str] | None = None,
) -> tuple[AttackGraph, IngestReport]:
    """Merge a STIX-subset bundle into `base`, returning a new snapshot and a report.

    Object-level defects (unknown types, bad patterns, dangling or incompatible
    relationships, untrusted sources) are rejected and reported while ingestion
    continues; only a structurally unusable document raises.
    """
    if (
        not isinstance(bundle, Mapping)
        or bundle.get("type") != "bundle"
        or not isinstance(bundle.get("objects"), list)
    ):
        raise MalformedBundleError("document is not a {type: bundle, objects: [...]} bundle")

    base = base or AttackGraph.empty()
    trusted = frozenset(trusted_sources) if trusted_sources else None
    nodes: dict[str, SdoNode] = dict(base.nodes)
    edges: dict[tuple[str, str, str], Relationship] = {(e.src, e.rkind, e.dst): e for e in base.edges}
    report = IngestReport()

    relationships = []
    for obj in bundle["objects"]:
        if not isinstance(obj, Mapping):
            report.reject("malformed-object", f"non-object entry: {obj!r}")
            continue
        otype = obj.get("type")
        if otype == "relationship":
            relationships.append(obj)
            continue
        if trusted is not None and obj.get("x_source") not in trusted:
            report.reject("untrusted-source", f"{otype} {obj.get('id')!r} from {obj.get('x_source')!r}")
            continue
        if otype not in _BUNDLE_KIND:
            report.reject("unknown-object-type", f"type {otype!r} (id {obj.get('id')!r})")
            continue
        node_id = obj.get("id")
        if not isinstance(node_id, str) or not node_id:
            report.reject("missing-id", f"{otype} object without id")
            continue
        kind = _BUNDLE_KIND[otype]

        pattern = None
        observables: frozenset[Observable] = frozenset()
        indicative = False
        try:
            if kind == "indicator":
                pattern = _parse_pattern(obj.get("pattern", ""))
            elif kind == "observed-data":
                observables = frozenset(Observable.from_json(o) for o in obj.get("observables", []))
                indicative = bool(obj.get("x_indicative", False))
        except ObservableError as exc:
            report.reject("bad-observable", f"{node_id}: {exc}")
            continue

        props = {k: v for k, v in obj.items() if k not in ("type", "id", "name", "pattern", "observables", "x_indicative")}
        incoming = SdoNode(
            id=node_id,
            kind=kind,
            name=str(obj.get("name", node_id)),
            pattern=pattern,
            observables=observables,
            indicative=indicative,
            props=props,
        )
        existing = nodes.get(node_id)
        if existing is None:
            nodes[node_id] = incoming
            report.nodes_added += 1
        elif existing.kind != kind:
            report.reject("kind-conflict", f"{node_id}: {existing.kind} vs {kind}")
        else:
            # last-writer-wins on scalar props; observable containment unions
            nodes[node_id] = SdoNode(
                id=node_id,
                kind=kind,
                name=incoming.name,
                pattern=incoming.pattern if kind == "indicator" else None,
                observables=existing.observables | incoming.observables,
                indicative=incoming.indicative if kind == "observed-data" else False,
                props={**existing.props, **incoming.props},
            )
            report.nodes_merged += 1

    for obj in relationships:
        rkind = obj.get("relationship_type")
        src, dst = obj.get("source_ref"), obj.get("target_ref")
        if rkind not in ("uses", "indicates", "part-of", "attributed-to"):
            report.reject("incompatible-relationship-kind", f"relationship_type {rkind!r}")
            continue
        if src not in nodes or dst not in nodes:
            report.reject("dangling-reference", f"{src!r} -{rkind}-> {dst!r}")
            continue
        if (nodes[src].kind, rkind, nodes[dst].kind) not in RELATIONSHIP_COMPAT:
            report.reject(
                "incompatible-relationship-kind",
                f"{nodes[src].kind} -{rkind}-> {nodes[dst].kind} ({src} -> {dst})",
            )
            continue
        key = (src, rkind, dst)
        if key in edges:
            report.edges_merged += 1
        else:
            edges[key] = Relationship(src, dst, rkind)
            report.edges_added += 1

    return AttackGraph(nodes, edges.values()), report


def _require_kind(graph: AttackGraph, node_id: str, kind: str) -> SdoNode:
    node = graph.node(node_id)
    if node.kind != kind:
        raise WrongKindError(f"{node_id!r} has kind {node.kind!r}, expected {kind!r}")
    return node


def ioa_of(graph: AttackGraph, malware_id: str) -> frozenset[str]:
    """Attack-pattern nodes one `uses` edge away from the malware: its IoA."""
    _require_kind(graph, malware_id, "malware")
    return frozenset(
        e.dst
        for e in graph.out_edges(malware_id, "uses")
        if graph.nodes[e.dst].kind == "attack-pattern"
    )


def affinity(graph: AttackGraph, obs: Observable, technique_id: str) -> int:
    """Count template paths observable -> observed-data -> malware -> technique.

    One path per (observed-data, malware) pair; the more paths, the stronger
    the association between the observable and the technique.
    """
    _require_kind(graph, technique_id, "attack-pattern")
    count = 0
    for od_id in sorted(graph.observable_index.get(obs, ())):
        for edge in graph.out_edges(od_id, "part-of"):
            if graph.nodes[edge.dst].kind != "malware":
                continue
            for uses in graph.out_edges(edge.dst, "uses"):
                if uses.dst == technique_id:
                    count += 1
    return count


def _indicator_patterns(graph: AttackGraph, malware_id: str) -> frozenset[Observable]:
    patterns = set()
    for edge in graph.in_edges(malware_id, "indicates"):
        node = graph.nodes[edge.src]
        if node.kind == "indicator" and node.pattern is not None:
            patterns.add(node.pattern)
    return frozenset(patterns)


def observables_of(graph: AttackGraph, malware_id: str, indicative_only: bool = False) -> frozenset[Observable]:
    """Union of observables across the malware's observed-data nodes.

    With indicative_only, restricted to indicator-tagged observables: members
    of an x_indicative observed-data node, or values named by an indicator
    that indicates this malware.
    """
    _require_kind(graph, malware_id, "malware")
    all_obs: set[Observable] = set()
    flagged: set[Observable] = set()
    for edge in graph.in_edges(malware_id, "part-of"):
        node = graph.nodes[edge.src]
        if node.kind != "observed-data":
            continue
        all_obs.update(node.observables)
        if node.indicative:
            flagged.update(node.observables)
    if not indicative_only:
        return frozenset(all_obs)
    flagged.update(_indicator_patterns(graph, malware_id) & all_obs)
    return frozenset(flagged)


def candidates_for(graph: AttackGraph, sighted: Iterable[Observable]) -> dict[str, frozenset[Observable]]:
    """Malware whose observable sets intersect the sighted set, with the intersection."""
    sighted = frozenset(sighted)
    matched: dict[str, set[Observable]] = {}
    for obs in sighted:
        for od_id in graph.observable_index.get(obs, ()):
            for edge in graph.out_edges(od_id, "part-of"):
                if graph.nodes[edge.dst].kind == "malware":
                    matched.setdefault(edge.dst, set()).add(obs)
    return {mid: frozenset(obs) for mid, obs in sorted(matched.items())}


def neighbors(graph: AttackGraph, node_id: str, depth: int = 1) -> dict:
    """Subgraph of nodes within `depth` hops of node_id (either direction), as JSON."""
    graph.node(node_id)
    seen = {node_id}
    frontier = [node_id]
    edges_out: list[Relationship] = []
    for _ in range(max(depth, 0)):
        nxt = []
        for nid in frontier:
            for edge in graph.out_edges(nid) + graph.in_edges(nid):
                edges_out.append(edge)
                for other in (edge.src, edge.dst):
                    if other not in seen:
                        seen.add(other)
                        nxt.append(other)
        frontier = nxt
    nodes = [
        {"id": nid, "kind": graph.nodes[nid].kind, "name": graph.nodes[nid].name, "pop_level": graph.pop_level[nid]}
        for nid in sorted(seen)
    ]
    uniq = sorted({(e.src, e.rkind, e.dst) for e in edges_out})
    return {"nodes": nodes, "edges": [{"src": s, "rkind": r, "dst": d} for s, r, d in uniq]}


class FeedFetcher:
    """Optional adapter: pull bundle documents over HTTP with a minimum interval.

    Disabled in tests; live mode only. The bundle shape is identical to the
    file-based format, so fetched documents feed straight into ingest_bundle.
    """

    def __init__(self, min_interval_s: float = 1.0):
        self.min_interval_s = min_interval_s
        self._last_fetch = 0.0

    def fetch(self, url: str, timeout: float = 10.0) -> Mapping:
        wait = self._last_fetch + self.min_interval_s - time.monotonic()
        if wait > 0:
            time.sleep(wait)
        self._last_fetch = time.monotonic()
        with urllib.request.urlopen(url, timeout=timeout) as resp:  # pragma: no cover - network
            return json.loads(resp.read().decode("utf-8"))
