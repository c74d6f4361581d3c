"""Compiles a hypothesis into a staged hypothesis-testing workflow.

Stage 1 is cheap and broad: on-access monitors over every monitorable
observable of the hypothesis plus one lead-alert rule per monitored value
(the conjunctive query language has no OR, so disjunction is encoded as
multiple rules bound to one handler). A lead fires, and stage 2 runs the
expensive forensic scans only on the alerting hosts; a completion alert over
the task summaries then dispatches the verdict step. When nothing is
monitorable the generator falls back to a forensic-first workflow — waves of
scans across the fleet, chained by per-wave completion alerts and throttled
by the wave interval — and flags it expensive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .attackdb import AttackGraph
from .costs import CostModel
from .fleet import TaskSpec
from .hypotheses import Hypothesis
from .observables import Observable
from .workflow import InvalidWorkflowError, Workflow, WorkflowStep, validate

# otypes watchable on-access, and the monitor trigger for each
MONITOR_TRIGGER = {
    "registry-key": "registry-access",
    "domain": "dns-query",
    "process-name": "process-start",
    "file-path": "file-open",
}

MONITOR_CHANNEL = {
    "registry-key": "registry",
    "domain": "dns",
    "process-name": "process",
    "file-path": "file",
}

# otype -> (scan kind, task param key) for forensic collection
SCAN_FOR = {
    "file-hash-sha256": ("file-search", "hashes"),
    "file-hash-md5": ("file-search", "hashes"),
    "file-path": ("file-search", "paths"),
    "mutex": ("mutex-scan", "names"),
    "registry-key": ("registry-scan", "keys"),
    "process-name": ("process-list", "names"),
    "ip": ("netlog-scan", "values"),
    "url": ("netlog-scan", "values"),
    "domain": ("netlog-scan", "values"),
}


class GenerationError(Exception):
    pass


class BudgetTooSmallError(GenerationError):
    pass


@dataclass(frozen=True)
class GenerationPlan:
    hypothesis_id: str
    lead: frozenset[Observable]
    forensic: frozenset[Observable]
    dropped: tuple[tuple[Observable, str], ...]
    theta_conf: float
    theta_ref: float
    budget: float


def _eligible(pool: frozenset[Observable], strategy: str, otype_filter) -> tuple[set, set, list]:
    """Split the hypothesis observables into lead/forensic sets plus drops."""
    dropped: list[tuple[Observable, str]] = []
    working = set()
    for obs in sorted(pool):
        if otype_filter is not None and obs.otype not in otype_filter:
            dropped.append((obs, "otype-filtered"))
        else:
            working.add(obs)
    if strategy == "staged":
        lead = {o for o in working if o.otype in MONITOR_TRIGGER}
        forensic = {o for o in working - lead if o.otype in SCAN_FOR}
    else:
        lead = set()
        forensic = {o for o in working if o.otype in SCAN_FOR}
    for obs in sorted(working - lead - forensic):
        dropped.append((obs, "no-eligible-collection-method"))
    return lead, forensic, dropped


def _forensic_tasks(forensic: set[Observable], cm: CostModel, prefix: str) -> list[tuple[str, dict]]:
    """Group forensic observables into one TaskSpec JSON per scan kind."""
    by_scan: dict[str, dict[str, list[str]]] = {}
    for obs in sorted(forensic):
        scan, key = SCAN_FOR[obs.otype]
        by_scan.setdefault(scan, {}).setdefault(key, []).append(obs.value)
    tasks = []
    for scan in sorted(by_scan, key=lambda s: (-cm.task_cost(s), s)):
        spec = {"id": f"{prefix}-{scan}", "scan": scan, "cost": cm.task_cost(scan)}
        for key, values in sorted(by_scan[scan].items()):
            spec[key] = sorted(set(values))
        tasks.append((scan, spec))
    return tasks


def _summary_query(extra: Mapping[str, str]) -> dict:
    conjuncts = [
        {"field": "channel", "op": "eq", "value": "task-result"},
        {"field": "attr", "op": "eq", "key": "kind", "value": "task-summary"},
        {"field": "attr", "op": "eq", "key": "container", "value": "$container"},
    ]
    for key in sorted(extra):
        conjuncts.append({"field": "attr", "op": "eq", "key": key, "value": extra[key]})
    return {"conjuncts": conjuncts}


def _value_query(obs: Observable) -> dict:
    return {
        "conjuncts": [
            {"field": "channel", "op": "eq", "value": MONITOR_CHANNEL[obs.otype]},
            {"field": "value", "op": "eq", "value": obs.value},
        ]
    }


def generate_workflow(
    h: Hypothesis,
    graph: AttackGraph,
    cm: CostModel,
    budget: float,
    *,
    hosts: Sequence[str],
    fan_out_cap: int = 5,
    alert_interval: int = 5,
    completion_interval: int = 1,
    wave_interval: int = 10,
    max_transitions: int = 32,
    strategy: str = "staged",
    otype_filter: frozenset[str] | None = None,
    theta_conf: float = 0.5,
    theta_ref: float = 0.1,
    workflow_id: str | None = None,
) -> Workflow:
    """Compile the hypothesis into a validated workflow whose estimated
    worst-case cost fits the budget, trimming forensic scans first and lead
    monitors last (never below one monitor + one alert)."""
    if strategy not in ("staged", "forensic-first"):
        raise GenerationError(f"unknown strategy: {strategy!r}")
    graph.node(h.suspect)
    if budget <= 0:
        raise BudgetTooSmallError(f"budget must be > 0, got {budget}")
    if not hosts:
        raise GenerationError("generator needs a non-empty fleet host list")

    lead, forensic, dropped = _eligible(h.observable_set, strategy, otype_filter)
    expensive = strategy == "forensic-first"
    if strategy == "staged" and not lead:
        if not forensic:
            raise GenerationError("nothing-monitorable and nothing-scannable")
        strategy, expensive = "forensic-first", True

    wid = workflow_id or f"wf-{h.id}"
    fleet_size = len(hosts)

    while True:
        if strategy == "staged":
            wf = _build_staged(
                h, wid, lead, forensic, dropped, cm, budget,
                alert_interval, completion_interval, max_transitions,
                theta_conf, theta_ref, expensive,
            )
        else:
            wf = _build_forensic_first(
                h, wid, forensic, dropped, cm, budget, hosts, fan_out_cap,
                completion_interval, wave_interval, max_transitions,
                theta_conf, theta_ref,
            )
        est = estimate_cost(wf, cm, fleet_size, fan_out_cap)
        if est <= budget:
            plan = GenerationPlan(
                hypothesis_id=h.id,
                lead=frozenset(lead),
                forensic=frozenset(forensic),
                dropped=tuple(sorted(dropped)),
                theta_conf=theta_conf,
                theta_ref=theta_ref,
                budget=budget,
            )
            report = dict(wf.generation_report or {})
            report["estimate"] = est
            report["dispositions"] = _dispositions(plan.lead, plan.forensic, plan.dropped)
            return Workflow(
                id=wf.id, hypothesis_id=wf.hypothesis_id, steps=wf.steps, entry=wf.entry,
                handlers=wf.handlers, budget=plan.budget, max_transitions=wf.max_transitions,
                generation_report=report,
            )
        # over budget: shed the costliest forensic scan kind, then spare monitors
        if forensic:
            tasks = _forensic_tasks(forensic, cm, "t")
            costliest = tasks[0][0]
            shed = {o for o in forensic if SCAN_FOR[o.otype][0] == costliest}
            forensic -= shed
            dropped.extend((o, "budget") for o in sorted(shed))
        elif strategy == "staged" and len(lead) > 1:
            victim = sorted(lead)[-1]
            lead.discard(victim)
            dropped.append((victim, "budget"))
        else:
            raise BudgetTooSmallError(
                f"budget {budget} cannot cover the minimum viable workflow (estimate {est})"
            )


def _dispositions(lead, forensic, dropped) -> list[dict]:
    out = []
    for obs in sorted(lead):
        out.append({**obs.to_json(), "via": f"monitor:{MONITOR_TRIGGER[obs.otype]}"})
    for obs in sorted(forensic):
        out.append({**obs.to_json(), "via": f"task:{SCAN_FOR[obs.otype][0]}"})
    for obs, reason in sorted(dropped):
        out.append({**obs.to_json(), "dropped": reason})
    return out


def _verdict_step(theta_conf: float, theta_ref: float) -> WorkflowStep:
    return WorkflowStep(
        id="verdict",
        kind="verdict",
        params={
            "decision": "confirm",
            "rationale": "coverage {coverage:.2f} across {classes} weight classes",
            "theta_conf": theta_conf,
            "theta_ref": theta_ref,
        },
    )


def _build_staged(
    h, wid, lead, forensic, dropped, cm, budget,
    alert_interval, completion_interval, max_transitions, theta_conf, theta_ref, expensive,
) -> Workflow:
    steps: dict[str, WorkflowStep] = {}
    entry: list[str] = []
    handlers: dict[str, tuple[str, ...]] = {}

    monitors = [
        {
            "trigger": MONITOR_TRIGGER[obs.otype],
            "pattern": obs.value,
            "channel": MONITOR_CHANNEL[obs.otype],
        }
        for obs in sorted(lead)
    ]
    steps["monitor"] = WorkflowStep(
        id="monitor",
        kind="deploy-policy",
        params={"policy": {"id": f"pol-{wid}", "monitors": monitors}, "target": {"all_hosts": True}},
    )
    entry.append("monitor")

    for i, obs in enumerate(sorted(lead)):
        sid = f"lead-{i}"
        steps[sid] = WorkflowStep(
            id=sid,
            kind="define-alert",
            params={"query": _value_query(obs), "interval": alert_interval, "handler": "lead"},
        )
        entry.append(sid)

    tasks = _forensic_tasks(forensic, cm, "t")
    if tasks:
        lead_steps = []
        for scan, spec in tasks:
            sid = f"task-{scan}"
            steps[sid] = WorkflowStep(
                id=sid,
                kind="run-task",
                params={"task": spec, "target": {"from_alert": True}, "tags": {"phase": "stage2"}},
            )
            lead_steps.append(sid)
        handlers["lead"] = tuple(lead_steps)
        steps["watch-complete"] = WorkflowStep(
            id="watch-complete",
            kind="define-alert",
            params={
                "query": _summary_query({"phase": "stage2"}),
                "interval": completion_interval,
                "handler": "complete",
            },
        )
        entry.append("watch-complete")
        steps["verdict"] = _verdict_step(theta_conf, theta_ref)
        handlers["complete"] = ("verdict",)
    else:
        steps["verdict"] = _verdict_step(theta_conf, theta_ref)
        handlers["lead"] = ("verdict",)

    report = {"hypothesis": h.id, "strategy": "staged", "expensive": expensive}
    return Workflow(
        id=wid, hypothesis_id=h.id, steps=steps, entry=tuple(entry), handlers=handlers,
        budget=budget, max_transitions=max_transitions, generation_report=report,
    )


def _build_forensic_first(
    h, wid, forensic, dropped, cm, budget, hosts, fan_out_cap,
    completion_interval, wave_interval, max_transitions, theta_conf, theta_ref,
) -> Workflow:
    if not forensic:
        raise GenerationError("nothing-scannable for a forensic-first workflow")
    steps: dict[str, WorkflowStep] = {}
    entry: list[str] = []
    handlers: dict[str, tuple[str, ...]] = {}

    ordered_hosts = sorted(hosts)
    cap = max(1, fan_out_cap)
    waves = [ordered_hosts[i : i + cap] for i in range(0, len(ordered_hosts), cap)]
    tasks = _forensic_tasks(forensic, cm, "t")

    for k, chunk in enumerate(waves):
        wave_steps = []
        for scan, spec in tasks:
            sid = f"task-w{k}-{scan}"
            steps[sid] = WorkflowStep(
                id=sid,
                kind="run-task",
                params={
                    "task": {**spec, "id": f"{spec['id']}-w{k}"},
                    "target": {"hosts": list(chunk)},
                    "tags": {"phase": "stage2", "wave": str(k)},
                },
            )
            wave_steps.append(sid)
        if k == 0:
            entry.extend(wave_steps)
        else:
            handlers[f"wave-{k}"] = tuple(wave_steps)
            sid = f"chain-{k}"
            steps[sid] = WorkflowStep(
                id=sid,
                kind="define-alert",
                params={
                    "query": _summary_query({"phase": "stage2", "wave": str(k - 1)}),
                    "interval": wave_interval,
                    "handler": f"wave-{k}",
                },
            )
            entry.insert(0, sid)

    steps["watch-complete"] = WorkflowStep(
        id="watch-complete",
        kind="define-alert",
        params={
            "query": _summary_query({"phase": "stage2", "wave": str(len(waves) - 1)}),
            "interval": completion_interval,
            "handler": "complete",
        },
    )
    entry.insert(0, "watch-complete")
    steps["verdict"] = _verdict_step(theta_conf, theta_ref)
    handlers["complete"] = ("verdict",)

    report = {"hypothesis": h.id, "strategy": "forensic-first", "expensive": True}
    return Workflow(
        id=wid, hypothesis_id=h.id, steps=steps, entry=tuple(entry), handlers=handlers,
        budget=budget, max_transitions=max_transitions, generation_report=report,
    )


def estimate_cost(w: Workflow, cm: CostModel, fleet_size: int, fan_out_cap: int) -> float:
    """Deterministic worst-case bound: broad steps priced over the whole fleet,
    alert-targeted steps at min(fleet, fan-out cap), one execution per step."""
    errors = validate(w)
    if errors:
        raise InvalidWorkflowError(errors)
    total = 0.0
    for sid in sorted(w.steps):
        step = w.steps[sid]
        if step.kind == "define-alert":
            total += cm.alert_rule
            continue
        if step.kind not in ("deploy-policy", "run-task"):
            continue
        target = step.params["target"]
        if target.get("all_hosts"):
            n = fleet_size
        elif target.get("from_alert"):
            n = min(fleet_size, max(1, fan_out_cap))
        else:
            n = len(target.get("hosts", []))
        if step.kind == "deploy-policy":
            total += cm.policy_deploy * n
        else:
            total += TaskSpec.from_json(step.params["task"], cm).cost * n
    return total
