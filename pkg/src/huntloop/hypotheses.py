"""Attack hypothesis generation and ranking.

A hypothesis names a suspect malware, its technique set (IoA), what has been
sighted, and what remains expected-but-unsighted — the actionable part. The
ranker orders hypotheses by Jaccard similarity between each suspect's full
observable set and the evidence collected so far (similarity = 1 - distance,
so larger is better), breaking ties by support then suspect id.

All functions here are pure over immutable inputs; lifecycle mutation happens
in the orchestrator.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

from .attackdb import AttackGraph, candidates_for, ioa_of, observables_of
from .observables import (
    DEFAULT_WEIGHTS,
    Observable,
    weight_classes,
    weighted_sum,
)

STATUSES = ("proposed", "approved", "testing", "confirmed", "demoted", "stale")
TERMINAL_STATUSES = frozenset({"confirmed", "demoted", "stale"})

SIGHTING_SOURCES = ("policy", "task", "external-alert", "analyst")


class HypothesisError(Exception):
    pass


class FoundNotSubsetError(HypothesisError):
    pass


@dataclass(frozen=True)
class Sighting:
    observable: Observable
    host: str
    tick: int
    source: str = "external-alert"

    def __post_init__(self) -> None:
        if self.tick < 0:
            raise HypothesisError(f"sighting tick must be >= 0, got {self.tick}")
        if self.source not in SIGHTING_SOURCES:
            raise HypothesisError(f"unknown sighting source: {self.source!r}")

    def to_json(self) -> dict:
        return {
            "observable": self.observable.to_json(),
            "host": self.host,
            "tick": self.tick,
            "source": self.source,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Sighting":
        return cls(
            observable=Observable.from_json(data["observable"]),
            host=data.get("host", ""),
            tick=data.get("tick", 0),
            source=data.get("source", "external-alert"),
        )


@dataclass(frozen=True)
class Hypothesis:
    id: str
    suspect: str
    suspect_name: str
    ioa: frozenset[str]
    sighted: frozenset[Observable]
    expected_unsighted: frozenset[Observable]
    support: float
    jaccard: float = 0.0
    status: str = "proposed"
    provenance: str = "generated"

    def __post_init__(self) -> None:
        if self.sighted & self.expected_unsighted:
            raise HypothesisError("sighted and expected_unsighted overlap")
        if not 0.0 <= self.jaccard <= 1.0:
            raise HypothesisError(f"jaccard out of range: {self.jaccard}")
        if self.support < 0:
            raise HypothesisError(f"negative support: {self.support}")
        if self.status not in STATUSES:
            raise HypothesisError(f"unknown status: {self.status!r}")

    @property
    def observable_set(self) -> frozenset[Observable]:
        """All observables the hypothesis speaks about: its Jaccard comparand."""
        return self.sighted | self.expected_unsighted

    @property
    def terminal(self) -> bool:
        return self.status in TERMINAL_STATUSES

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "suspect": self.suspect,
            "suspect_name": self.suspect_name,
            "ioa": sorted(self.ioa),
            "sighted": [o.to_json() for o in sorted(self.sighted)],
            "expected_unsighted": [o.to_json() for o in sorted(self.expected_unsighted)],
            "support": self.support,
            "jaccard": self.jaccard,
            "status": self.status,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Hypothesis":
        return cls(
            id=data["id"],
            suspect=data["suspect"],
            suspect_name=data.get("suspect_name", data["suspect"]),
            ioa=frozenset(data.get("ioa", [])),
            sighted=frozenset(Observable.from_json(o) for o in data.get("sighted", [])),
            expected_unsighted=frozenset(Observable.from_json(o) for o in data.get("expected_unsighted", [])),
            support=data.get("support", 0.0),
            jaccard=data.get("jaccard", 0.0),
            status=data.get("status", "proposed"),
            provenance=data.get("provenance", "generated"),
        )


def jaccard_similarity(a: Iterable[Observable], b: Iterable[Observable]) -> float:
    """|a n b| / |a u b|; 1.0 when both sets are empty."""
    a, b = frozenset(a), frozenset(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def support(graph: AttackGraph, h: Hypothesis, weights: Mapping[str, float] | None = None) -> float:
    """Sum of Pyramid-of-Pain class weights over the sighted observables."""
    graph.node(h.suspect)
    table = DEFAULT_WEIGHTS if weights is None else weights
    if any(w <= 0 for w in table.values()):
        raise HypothesisError("weights must be positive")
    return weighted_sum(h.sighted, table)


def generate(
    graph: AttackGraph,
    sightings: Iterable[Sighting],
    k: int,
    weights: Mapping[str, float] | None = None,
    id_factory: Callable[[str], str] | None = None,
) -> list[Hypothesis]:
    """One hypothesis per malware whose observables intersect the sightings, top-k by rank."""
    if k < 1:
        raise HypothesisError(f"k must be >= 1, got {k}")
    sightings = list(sightings)
    seen = frozenset(s.observable for s in sightings)
    if not seen:
        return []
    if not graph.nodes:
        return []
    make_id = id_factory or (lambda suspect: f"hyp-{suspect}")
    hypotheses = []
    for suspect, matched in sorted(candidates_for(graph, seen).items()):
        all_obs = observables_of(graph, suspect)
        h = Hypothesis(
            id=make_id(suspect),
            suspect=suspect,
            suspect_name=graph.nodes[suspect].name,
            ioa=ioa_of(graph, suspect),
            sighted=matched,
            expected_unsighted=all_obs - matched,
            support=0.0,
        )
        hypotheses.append(replace(h, support=support(graph, h, weights)))
    return rank(hypotheses, seen)[:k]


def rank(hypotheses: Iterable[Hypothesis], evidence: Iterable[Observable]) -> list[Hypothesis]:
    """Sort by (jaccard desc, support desc, suspect asc), refreshing each jaccard field."""
    evidence = frozenset(evidence)
    scored = [
        replace(h, jaccard=jaccard_similarity(h.observable_set, evidence)) for h in hypotheses
    ]
    return sorted(scored, key=lambda h: (-h.jaccard, -h.support, h.suspect))


def rank_attack_profiles(
    graph: AttackGraph, evidence: Iterable[Observable], k: int
) -> list[tuple[str, float]]:
    """Rank raw AttackDB malware profiles (IoAs) against the evidence set.

    Experimental thin wrapper used by the proactive loop: same Jaccard
    machinery, applied to each malware's full observable set.
    """
    evidence = frozenset(evidence)
    scored = []
    for malware_id in sorted(graph.kind_index.get("malware", ())):
        obs = observables_of(graph, malware_id)
        if not obs:
            continue
        scored.append((malware_id, jaccard_similarity(obs, evidence)))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


def apply_refutation_signal(
    h: Hypothesis,
    searched: Iterable[Observable],
    found: Iterable[Observable],
    theta_ref: float = 0.1,
) -> Hypothesis:
    """Soften support when evidence was searched for but not found.

    Support is multiplied by the found-fraction |found|/|searched|; the
    hypothesis demotes when that post-search coverage drops below theta_ref.
    An empty search is vacuous and changes nothing.
    """
    searched, found = frozenset(searched), frozenset(found)
    if not found <= searched:
        raise FoundNotSubsetError(f"found values not in searched set: {sorted(found - searched)}")
    if not searched:
        return h
    fraction = len(found) / len(searched)
    status = "demoted" if fraction < theta_ref else h.status
    return replace(h, support=h.support * max(0.0, fraction), status=status)


def coverage(
    h: Hypothesis,
    findings: Iterable[Observable],
    weights: Mapping[str, float] | None = None,
) -> tuple[float, int, frozenset[Observable]]:
    """Weighted evidence coverage of the hypothesis after a hunt.

    Returns (weighted fraction of the hypothesis's observables now sighted,
    number of distinct weight classes in that evidence, the evidence set).
    """
    table = DEFAULT_WEIGHTS if weights is None else weights
    relevant = (frozenset(findings) & h.observable_set) | h.sighted
    total = weighted_sum(h.observable_set, table)
    if total == 0:
        return 0.0, 0, relevant
    return weighted_sum(relevant, table) / total, len(weight_classes(relevant)), relevant
