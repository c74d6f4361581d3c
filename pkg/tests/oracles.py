"""Independent oracles the implementation is checked against.

Everything here works from raw structures (edge lists, event lists, plain
sets) with naive algorithms, deliberately sharing no code path with the
package internals it verifies.
"""

from __future__ import annotations

from fractions import Fraction


def brute_affinity(nodes: dict, edges: list, obs, technique_id: str) -> int:
    """Exhaustive DFS over the path template observable -> od -> malware -> technique.

    `nodes` maps id -> (kind, observables-set); `edges` is a list of
    (src, rkind, dst) triples. Counts every distinct (od, malware) pair.
    """
    count = 0
    for od_id, (kind, observables) in nodes.items():
        if kind != "observed-data" or obs not in observables:
            continue
        for src, rkind, dst in edges:
            if src != od_id or rkind != "part-of" or nodes[dst][0] != "malware":
                continue
            for src2, rkind2, dst2 in edges:
                if src2 == dst and rkind2 == "uses" and dst2 == technique_id:
                    count += 1
    return count


def graph_as_raw(graph):
    nodes = {nid: (n.kind, set(n.observables)) for nid, n in graph.nodes.items()}
    edges = [(e.src, e.rkind, e.dst) for e in graph.edges]
    return nodes, edges


def linear_scan(events, conjuncts) -> list:
    """Full-scan evaluation of a conjunctive query over a list of events.

    Conjuncts are plain tuples:
      ("host", h) ("channel", c) ("time", lo, hi) ("otype", t) ("value", v)
      ("value-in", {..}) ("attr", k, v) ("attr-prefix", k, p)
    """

    def ok(e, c):
        tag = c[0]
        if tag == "host":
            return e.host == c[1]
        if tag == "channel":
            return e.channel == c[1]
        if tag == "time":
            return c[1] <= e.time <= c[2]
        if tag == "otype":
            return any(o.otype == c[1] for o in e.observables)
        if tag == "value":
            return any(o.value == c[1] for o in e.observables)
        if tag == "value-in":
            return any(o.value in c[1] for o in e.observables)
        if tag == "attr":
            return e.attrs.get(c[1]) == c[2]
        if tag == "attr-prefix":
            return e.attrs.get(c[1], None) is not None and e.attrs[c[1]].startswith(c[2])
        raise AssertionError(tag)

    return [e for e in sorted(events, key=lambda e: e.seq) if all(ok(e, c) for c in conjuncts)]


def brute_jaccard(a, b) -> Fraction:
    """Exact set arithmetic with rationals; 1 when both sets are empty."""
    a, b = set(a), set(b)
    if not a and not b:
        return Fraction(1)
    inter = sum(1 for x in a if x in b)
    union = len(a) + len(b) - inter
    return Fraction(inter, union)


def weighted_sum_oracle(observables, class_of: dict, weights: dict) -> float:
    total = 0.0
    for o in sorted(observables):
        total += weights[class_of[o.otype]]
    return total
