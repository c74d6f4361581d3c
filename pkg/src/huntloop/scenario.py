"""Adversary emulation and hunt evaluation.

A scenario script plants malware artifacts on the simulated fleet according
to the AttackDB profile of the planted malware, optionally mutating values
per otype (modelling attackers rotating hashes and infrastructure), mixes in
seeded benign noise drawn disjoint from the AttackDB, injects triggers, and
drives the hunting loop to quiescence. The report scores the hunt against
ground truth: precision, recall, time to confirm, the true malware's rank
trajectory, and total resource cost. Identical (script, seed, config) runs
produce byte-identical reports.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .attackdb import AttackGraph, observables_of
from .cnc import HuntRecord, Orchestrator
from .config import LoopConfig, ServiceConfig
from .fleet import AgentFleet
from .hypotheses import Hypothesis
from .journal import Journal
from .observables import OTYPES, Observable


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class MalwareProfile:
    """Plantable footprint of one AttackDB malware plus per-otype mutation rates."""

    malware_id: str
    observables: frozenset[Observable]
    mutation: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for otype, p in self.mutation.items():
            if otype not in OTYPES:
                raise ScenarioError(f"unknown otype in mutation table: {otype!r}")
            if not 0.0 <= p <= 1.0:
                raise ScenarioError(f"mutation probability out of range: {otype}={p}")

    @classmethod
    def from_graph(cls, graph: AttackGraph, malware_id: str, mutation: Mapping[str, float] | None = None):
        return cls(malware_id, observables_of(graph, malware_id), dict(mutation or {}))


@dataclass(frozen=True)
class PlantPlan:
    """Concrete plant actions for one malware instance after mutation."""

    malware_id: str
    value_map: Mapping[Observable, Observable]  # AttackDB observable -> planted observable
    actions: tuple[Mapping, ...]
    unplantable: frozenset[Observable]


_FRESH_LEN = {"file-hash-sha256": 64, "file-hash-md5": 32}


def _fresh_value(otype: str, rng: random.Random) -> str:
    token = "%08x" % rng.getrandbits(32)
    if otype in _FRESH_LEN:
        n = _FRESH_LEN[otype]
        return "".join("%08x" % rng.getrandbits(32) for _ in range(n // 8))
    if otype == "ip":
        return "10.%d.%d.%d" % (rng.randrange(256), rng.randrange(256), rng.randrange(256))
    if otype == "domain":
        return f"{token}.example.net"
    if otype == "url":
        return f"http://{token}.example.net/{'%06x' % rng.getrandbits(24)}"
    if otype == "file-path":
        return f"/opt/{token}/payload.bin"
    if otype == "process-name":
        return f"proc-{token}.exe"
    if otype == "registry-key":
        return f"hklm/software/{token}"
    if otype == "mutex":
        return f"mtx-{token}"
    return f"{token}@example.net"  # email


def _actions_for(obs: Observable, rng: random.Random, avoid: frozenset[str]) -> list[dict]:
    if obs.otype in ("file-hash-sha256", "file-hash-md5"):
        return [{"kind": "create-file", "path": f"/opt/payload/{obs.value[:12]}.bin", "hash": obs.value}]
    if obs.otype == "file-path":
        digest = _fresh_value("file-hash-sha256", rng)
        while digest in avoid:
            digest = _fresh_value("file-hash-sha256", rng)
        return [{"kind": "create-file", "path": obs.value, "hash": digest}]
    if obs.otype == "registry-key":
        return [{"kind": "set-registry", "key": obs.value, "value": "1"}]
    if obs.otype == "process-name":
        return [{"kind": "start-process", "name": obs.value}]
    if obs.otype == "mutex":
        return [{"kind": "acquire-mutex", "name": obs.value}]
    if obs.otype == "domain":
        return [{"kind": "dns-query", "domain": obs.value}]
    if obs.otype in ("ip", "url"):
        return [{"kind": "connect-ip", "ip": obs.value}]
    return []  # email: no plantable host activity exists


def mutate(profile: MalwareProfile, seed, avoid: frozenset[str]) -> PlantPlan:
    """Resolve the profile to concrete plant actions under the seeded mutation.

    Each plantable value is independently replaced with its otype's mutation
    probability; replacement values are drawn fresh and never collide with
    AttackDB observables (`avoid` is the set of all known values).
    """
    rng = random.Random(f"{seed}:{profile.malware_id}")
    value_map: dict[Observable, Observable] = {}
    actions: list[dict] = []
    unplantable: set[Observable] = set()
    for obs in sorted(profile.observables):
        p = profile.mutation.get(obs.otype, 0.0)
        planted = obs
        if p > 0 and rng.random() < p:
            fresh = _fresh_value(obs.otype, rng)
            while fresh in avoid:
                fresh = _fresh_value(obs.otype, rng)
            planted = Observable(obs.otype, fresh)
        value_map[obs] = planted
        acts = _actions_for(planted, rng, avoid)
        if acts:
            actions.extend(acts)
        else:
            unplantable.add(obs)
    return PlantPlan(
        malware_id=profile.malware_id,
        value_map=value_map,
        actions=tuple(actions),
        unplantable=frozenset(unplantable),
    )


_BENIGN_KINDS = ("create-file", "set-registry", "start-process", "dns-query", "access-registry")


def benign_actions(rng: random.Random, count: int, avoid: frozenset[str]) -> list[dict]:
    """Seeded benign host activity drawing values disjoint from the AttackDB."""
    out = []
    for _ in range(count):
        kind = _BENIGN_KINDS[rng.randrange(len(_BENIGN_KINDS))]
        token = "benign-%08x" % rng.getrandbits(32)
        while token in avoid:
            token = "benign-%08x" % rng.getrandbits(32)
        if kind == "create-file":
            out.append({"kind": kind, "path": f"/home/user/{token}.txt", "hash": "f" + "%063x" % rng.getrandbits(252)})
        elif kind == "set-registry":
            out.append({"kind": kind, "key": f"hkcu/software/{token}", "value": "x"})
        elif kind == "access-registry":
            out.append({"kind": kind, "key": f"hkcu/software/{token}"})
        elif kind == "start-process":
            out.append({"kind": kind, "name": f"{token}.exe"})
        else:
            out.append({"kind": kind, "domain": f"{token}.corp.example"})
    return out


@dataclass(frozen=True)
class ScenarioScript:
    seed: int
    fleet: Mapping
    timeline: tuple[Mapping, ...]
    ground_truth: tuple[str, ...]
    mutation: Mapping[str, float] = field(default_factory=dict)
    strategy: str = "staged"
    otype_filter: tuple[str, ...] | None = None
    budget: float | None = None
    auto_approve: bool = True
    top_k: int = 3
    loop_mode: str = "reactive"
    grace_ticks: int = 15
    max_ticks: int = 500

    @classmethod
    def from_json(cls, data: Mapping, base_dir: str | None = None) -> "ScenarioScript":
        fleet = data.get("fleet")
        if isinstance(fleet, str):
            import os

            path = fleet if base_dir is None else os.path.join(base_dir, fleet)
            with open(path, encoding="utf-8") as fh:
                fleet = json.load(fh)
        if not isinstance(fleet, Mapping):
            raise ScenarioError("scenario needs a fleet definition (inline object or path)")
        timeline = tuple(data.get("timeline", []))
        ticks = [e.get("tick", -1) for e in timeline]
        if any(t < 0 for t in ticks) or ticks != sorted(ticks):
            raise ScenarioError("timeline must be tick-ordered with non-negative ticks")
        return cls(
            seed=data.get("seed", 0),
            fleet=fleet,
            timeline=timeline,
            ground_truth=tuple(data.get("ground_truth", [])),
            mutation=dict(data.get("mutation", {})),
            strategy=data.get("strategy", "staged"),
            otype_filter=tuple(data["otype_filter"]) if data.get("otype_filter") else None,
            budget=data.get("budget"),
            auto_approve=bool(data.get("auto_approve", True)),
            top_k=data.get("top_k", 3),
            loop_mode=data.get("loop_mode", "reactive"),
            grace_ticks=data.get("grace_ticks", 15),
            max_ticks=data.get("max_ticks", 500),
        )

    @classmethod
    def load(cls, path: str) -> "ScenarioScript":
        import os

        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh), base_dir=os.path.dirname(os.path.abspath(path)))


@dataclass(frozen=True)
class EvalReport:
    data: Mapping

    def to_json(self) -> dict:
        return dict(self.data)

    def to_bytes(self) -> bytes:
        return json.dumps(self.data, sort_keys=True, indent=1).encode("utf-8") + b"\n"

    def __getitem__(self, key):
        return self.data[key]


def evaluate(
    hypotheses: Mapping[str, Hypothesis],
    records: Sequence[HuntRecord],
    rank_history: Sequence[Mapping],
    ground_truth: Sequence[str],
    seed: int,
    total_cost: float,
    ticks_run: int,
    event_count: int,
) -> EvalReport:
    """Score the hunt: precision/recall of confirmed vs planted, rank trajectory,
    time to confirm. Zero confirmations reports precision 1.0 with an explicit flag."""
    planted = sorted(set(ground_truth))
    confirmed = sorted({h.suspect for h in hypotheses.values() if h.status == "confirmed"})
    true_confirmed = sorted(set(confirmed) & set(planted))
    no_confirmations = not confirmed
    precision = 1.0 if no_confirmations else len(true_confirmed) / len(confirmed)
    recall = 1.0 if not planted else len(true_confirmed) / len(planted)

    time_to_confirm = None
    for record in records:
        h = hypotheses.get(record.hypothesis_id)
        if record.hypothesis_status == "confirmed" and h is not None and h.suspect in planted:
            time_to_confirm = record.ended
            break

    trajectory = []
    first_true = planted[0] if planted else None
    for snap in rank_history:
        rank_of_true = None
        for i, row in enumerate(snap["ranking"]):
            if row["suspect"] == first_true:
                rank_of_true = i + 1
                break
        trajectory.append({"tick": snap["tick"], "rank": rank_of_true})

    statuses = {
        hid: {"suspect": h.suspect, "status": h.status, "jaccard": round(h.jaccard, 9)}
        for hid, h in sorted(hypotheses.items())
    }
    return EvalReport(
        {
            "seed": seed,
            "ground_truth": planted,
            "confirmed": confirmed,
            "precision": round(precision, 9),
            "recall": round(recall, 9),
            "no_confirmations": no_confirmations,
            "time_to_confirm": time_to_confirm,
            "true_rank_trajectory": trajectory,
            "final_statuses": statuses,
            "hunt_records": [r.to_json() for r in records],
            "total_cost": round(total_cost, 9),
            "ticks_run": ticks_run,
            "event_count": event_count,
        }
    )


def run_scenario(
    graph: AttackGraph,
    script: ScenarioScript,
    config: ServiceConfig | None = None,
    journal: Journal | None = None,
) -> EvalReport:
    """Replay the timeline through the fleet, drive the loop to quiescence, score."""
    config = config or ServiceConfig()
    loop = LoopConfig(
        mode=script.loop_mode,
        top_k=script.top_k,
        auto_approve_threshold=0.0 if script.auto_approve else config.loop.auto_approve_threshold,
        proactive_interval=config.loop.proactive_interval,
        proactive_budget=config.loop.proactive_budget,
    )
    config = config.with_overrides(
        loop=loop,
        workflow_strategy=script.strategy,
        otype_filter=frozenset(script.otype_filter) if script.otype_filter else None,
        workflow_budget=script.budget or config.workflow_budget,
        measurement_period=config.measurement_period,
        journal_path=None,
        evidence_log_path=None,
        audit_log_path=None,
    )
    fleet = AgentFleet.from_json(script.fleet, seed=script.seed)
    orch = Orchestrator(graph, config=config, fleet=fleet, journal=journal or Journal(None))

    avoid = frozenset(o.value for o in graph.all_observables())
    plans: dict[str, PlantPlan] = {}

    def plan_for(malware_id: str) -> PlantPlan:
        if malware_id not in plans:
            profile = MalwareProfile.from_graph(graph, malware_id, script.mutation)
            plans[malware_id] = mutate(profile, script.seed, avoid)
        return plans[malware_id]

    benign_rng = random.Random(f"{script.seed}:benign")
    timeline = list(script.timeline)
    last_tick = max((e.get("tick", 0) for e in timeline), default=0)
    horizon = min(script.max_ticks, last_tick + script.grace_ticks)
    idx = 0
    ticks_run = 0

    for tick in range(horizon + 1):
        orch.advance_clock(tick)
        while idx < len(timeline) and timeline[idx].get("tick", 0) == tick:
            _apply_entry(orch, graph, timeline[idx], plan_for, benign_rng, avoid)
            idx += 1
        orch.pump(tick)
        ticks_run = tick
        if tick > last_tick and orch.quiescent():
            break

    orch.finalize()
    return evaluate(
        hypotheses=orch.hypotheses,
        records=orch.records,
        rank_history=orch.rank_history,
        ground_truth=script.ground_truth,
        seed=script.seed,
        total_cost=orch.ledger.total(),
        ticks_run=ticks_run,
        event_count=orch.store.max_seq,
    )


def _apply_entry(orch: Orchestrator, graph, entry: Mapping, plan_for, benign_rng, avoid) -> None:
    host = entry.get("host")
    if "plant" in entry:
        plan = plan_for(entry["plant"])
        for action in plan.actions:
            orch.fleet.simulate_activity(host, action)
    elif "activity" in entry:
        orch.fleet.simulate_activity(host, entry["activity"])
    elif "benign" in entry:
        for action in benign_actions(benign_rng, int(entry["benign"]), avoid):
            orch.fleet.simulate_activity(host, action)
    elif "trigger" in entry:
        sightings = []
        for raw in entry["trigger"].get("sightings", []):
            if "planted" in raw:
                ref = raw["planted"]
                plan = plan_for(ref["malware"])
                original = Observable(ref["otype"], ref["value"])
                planted = plan.value_map.get(original, original)
                sightings.append(
                    {
                        "observable": planted.to_json(),
                        "host": raw.get("host", host or ""),
                        "tick": entry.get("tick", 0),
                        "source": "external-alert",
                    }
                )
            else:
                sightings.append(
                    {
                        "observable": {"type": raw["otype"], "value": raw["value"]},
                        "host": raw.get("host", host or ""),
                        "tick": entry.get("tick", 0),
                        "source": raw.get("source", "external-alert"),
                    }
                )
        orch.on_external_trigger({"sightings": sightings})
    else:
        raise ScenarioError(f"unintelligible timeline entry: {dict(entry)!r}")
