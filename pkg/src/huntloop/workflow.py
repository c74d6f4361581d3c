"""Workflow definition language and the sandboxed execution container.

Workflows are declarative JSON documents over a closed instruction set
(deploy-policy, run-task, define-alert, verdict) — there is no script engine
to escape, so untrusted generated workflows are confined structurally. A
container interprets one workflow with a hard cost budget and a transition
bound, and every externally visible effect goes through a Mediator that
records an auditable call log; the container cannot reach the fleet, the
evidence store, or the C&C directly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .costs import SIEM_HOST, CostModel
from .evidence import AlertNotification, Conjunct, Event, EvidenceStore, Query
from .fleet import AgentFleet, PolicySpec, TaskSpec
from .observables import Observable

STEP_KINDS = ("deploy-policy", "run-task", "define-alert", "verdict")

RUNNING = "running"
TERMINAL_CONTAINER = ("confirmed", "demoted", "budget-exhausted", "transition-limit", "failed")


class WorkflowError(Exception):
    pass


class InvalidWorkflowError(WorkflowError):
    def __init__(self, errors: list[str]):
        super().__init__(f"workflow failed validation: {errors}")
        self.errors = errors


class UnknownContainerError(WorkflowError):
    pass


class UnknownHandlerError(WorkflowError):
    pass


class MediatorRevokedError(WorkflowError):
    pass


@dataclass(frozen=True)
class WorkflowStep:
    id: str
    kind: str
    params: Mapping
    next: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "next": list(self.next)}


@dataclass(frozen=True)
class Workflow:
    id: str
    hypothesis_id: str | None
    steps: Mapping[str, WorkflowStep]
    entry: tuple[str, ...]
    handlers: Mapping[str, tuple[str, ...]]
    budget: float
    max_transitions: int
    generation_report: Mapping | None = None

    def to_json(self) -> dict:
        out: dict = {
            "id": self.id,
            "hypothesis": self.hypothesis_id,
            "budget": self.budget,
            "max_transitions": self.max_transitions,
            "entry": list(self.entry),
            "steps": {sid: step.to_json() for sid, step in sorted(self.steps.items())},
            "handlers": {name: list(steps) for name, steps in sorted(self.handlers.items())},
        }
        if self.generation_report is not None:
            out["generation_report"] = dict(self.generation_report)
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> "Workflow":
        steps = {
            sid: WorkflowStep(
                id=sid,
                kind=raw.get("kind", ""),
                params=dict(raw.get("params", {})),
                next=tuple(raw.get("next", [])),
            )
            for sid, raw in data.get("steps", {}).items()
        }
        return cls(
            id=data.get("id", ""),
            hypothesis_id=data.get("hypothesis"),
            steps=steps,
            entry=tuple(data.get("entry", [])),
            handlers={k: tuple(v) for k, v in data.get("handlers", {}).items()},
            budget=data.get("budget", 0),
            max_transitions=data.get("max_transitions", 0),
            generation_report=data.get("generation_report"),
        )


def _parse_target(raw) -> str | None:
    """Returns an error string, or None if the selector parses."""
    if not isinstance(raw, Mapping):
        return f"bad-target:{raw!r}"
    keys = [k for k in ("all_hosts", "from_alert", "hosts") if k in raw]
    if len(keys) != 1:
        return f"bad-target:need exactly one of all_hosts/from_alert/hosts, got {sorted(raw)}"
    if keys[0] == "hosts" and (not isinstance(raw["hosts"], list) or not raw["hosts"]):
        return "bad-target:empty explicit host list"
    return None


def validate(w: Workflow) -> list[str]:
    """All Workflow invariants plus per-step spec validation; empty list iff valid."""
    errors: list[str] = []
    if not w.id:
        errors.append("missing-workflow-id")
    if not w.entry:
        errors.append("empty-entry")
    if w.budget <= 0:
        errors.append("nonpositive-budget")
    if w.max_transitions <= 0:
        errors.append("nonpositive-max-transitions")

    known = set(w.steps)
    for sid in w.entry:
        if sid not in known:
            errors.append(f"unknown-step-ref:{sid}")
    for name, sids in w.handlers.items():
        for sid in sids:
            if sid not in known:
                errors.append(f"unknown-step-ref:{sid} (handler {name})")

    for sid, step in sorted(w.steps.items()):
        if step.kind not in STEP_KINDS:
            errors.append(f"unknown-step-kind:{step.kind} ({sid})")
            continue
        for nxt in step.next:
            if nxt not in known:
                errors.append(f"unknown-step-ref:{nxt} (next of {sid})")
        params = step.params
        if step.kind == "deploy-policy":
            err = _parse_target(params.get("target"))
            if err:
                errors.append(f"{err} ({sid})")
            try:
                PolicySpec.from_json(params.get("policy", {}))
            except Exception as exc:
                errors.append(f"bad-policy:{exc} ({sid})")
        elif step.kind == "run-task":
            err = _parse_target(params.get("target"))
            if err:
                errors.append(f"{err} ({sid})")
            try:
                TaskSpec.from_json(params.get("task", {}))
            except Exception as exc:
                errors.append(f"bad-task:{exc} ({sid})")
            schedule = params.get("schedule")
            if schedule is not None and not (
                isinstance(schedule, Mapping)
                and isinstance(schedule.get("delay"), int)
                and schedule["delay"] >= 0
            ):
                errors.append(f"bad-schedule:{schedule!r} ({sid})")
        elif step.kind == "define-alert":
            try:
                Query.from_json(params.get("query", {})).validate()
            except Exception as exc:
                errors.append(f"bad-query:{exc} ({sid})")
            interval = params.get("interval", 0)
            if not isinstance(interval, int) or interval < 1:
                errors.append(f"bad-interval:{interval!r} ({sid})")
            handler = params.get("handler")
            if handler not in w.handlers:
                errors.append(f"unknown-handler:{handler!r} ({sid})")
        elif step.kind == "verdict":
            if params.get("decision") not in ("confirm", "demote"):
                errors.append(f"bad-verdict-decision:{params.get('decision')!r} ({sid})")
            if step.next:
                errors.append(f"nonterminal-verdict ({sid})")

    # hosts-from-alert needs a notification binding, which entry steps never have
    frontier = [sid for sid in w.entry if sid in known]
    reachable: set[str] = set()
    while frontier:
        sid = frontier.pop()
        if sid in reachable:
            continue
        reachable.add(sid)
        frontier.extend(n for n in w.steps[sid].next if n in known)
    for sid in sorted(reachable):
        step = w.steps[sid]
        if step.kind in ("deploy-policy", "run-task"):
            target = step.params.get("target")
            if isinstance(target, Mapping) and target.get("from_alert"):
                errors.append(f"hosts-from-alert-outside-handler ({sid})")
    return errors


class AuditLog:
    """JSON-lines log of mediator calls: (container, tick, call, args digest)."""

    def __init__(self, path: str | None = None):
        self.entries: list[dict] = []
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def record(self, container_id: str, tick: int, call: str, args: Mapping) -> dict:
        canonical = json.dumps(args, sort_keys=True, default=str)
        entry = {
            "container": container_id,
            "tick": tick,
            "call": call,
            "args": json.loads(canonical),
            "digest": hashlib.sha256(canonical.encode()).hexdigest()[:12],
        }
        self.entries.append(entry)
        if self._fh:
            self._fh.write(json.dumps(entry, sort_keys=True) + "\n")
            self._fh.flush()
        return entry

    def for_container(self, container_id: str) -> list[dict]:
        return [e for e in self.entries if e["container"] == container_id]

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


class Mediator:
    """The only road out of a container: wraps fleet, evidence store, and C&C.

    Every call is recorded in the audit log; revoking the mediator cuts a
    cancelled container off from the world.
    """

    def __init__(
        self,
        container_id: str,
        fleet: AgentFleet,
        store: EvidenceStore,
        clock: Callable[[], int],
        audit: AuditLog,
        cost_model: CostModel | None = None,
        on_verdict: Callable[..., None] | None = None,
        on_terminal: Callable[..., None] | None = None,
    ):
        self.container_id = container_id
        self._fleet = fleet
        self._store = store
        self._clock = clock
        self._audit = audit
        self._cost_model = cost_model or CostModel()
        self._on_verdict = on_verdict
        self._on_terminal = on_terminal
        self.revoked = False

    def _guard(self, call: str, args: Mapping) -> None:
        if self.revoked:
            raise MediatorRevokedError(f"mediator for {self.container_id} is revoked")
        self._audit.record(self.container_id, self._clock(), call, args)

    def now(self) -> int:
        return self._clock()

    def host_ids(self) -> list[str]:
        if self.revoked:
            raise MediatorRevokedError(f"mediator for {self.container_id} is revoked")
        return self._fleet.host_ids()

    def deploy_policy(self, host: str, policy: PolicySpec) -> str:
        self._guard("deploy_policy", {"host": host, "policy": policy.to_json()})
        return self._fleet.deploy_policy(host, policy)

    def run_task(self, host: str, task: TaskSpec) -> list[Event]:
        self._guard("run_task", {"host": host, "task": task.to_json()})
        return self._fleet.run_task(host, task)

    def register_alert(self, query: Query, interval: int, handler_name: str, include_history: bool = False) -> str:
        self._guard(
            "register_alert",
            {"query": query.to_json(), "interval": interval, "handler": handler_name},
        )
        rule_id = self._store.register_alert(
            query, interval, (self.container_id, handler_name), include_history=include_history
        )
        self._fleet.ledger.charge(self._clock(), SIEM_HOST, self._cost_model.alert_rule, f"alert:{rule_id}")
        return rule_id

    def emit_event(self, event: Event) -> Event:
        self._guard("emit_event", {"event": event.to_json()})
        return self._store.ingest(event)

    def notify_verdict(self, claim: str, findings, searched, rationale: str, thresholds: Mapping) -> None:
        self._guard(
            "notify_verdict",
            {"claim": claim, "rationale": rationale, "thresholds": dict(thresholds)},
        )
        if self._on_verdict:
            self._on_verdict(self.container_id, claim, findings, searched, rationale, thresholds)

    def notify_terminal(self, status: str, findings, searched) -> None:
        self._guard("notify_terminal", {"status": status})
        if self._on_terminal:
            self._on_terminal(self.container_id, status, findings, searched)

    def revoke(self) -> None:
        self.revoked = True


@dataclass(frozen=True)
class ContainerState:
    container_id: str
    workflow_id: str
    pending: tuple[str, ...]
    transitions_used: int
    cost_charged: float
    status: str
    findings: frozenset[Observable]

    def to_json(self) -> dict:
        return {
            "container_id": self.container_id,
            "workflow_id": self.workflow_id,
            "pending": list(self.pending),
            "transitions_used": self.transitions_used,
            "cost_charged": self.cost_charged,
            "status": self.status,
            "findings": [o.to_json() for o in sorted(self.findings)],
        }


def _substitute(query: Query, container_id: str) -> Query:
    """Replace the $container placeholder in string predicate values."""
    conjuncts = []
    for c in query.conjuncts:
        if isinstance(c.value, str) and c.value == "$container":
            c = Conjunct(c.field, c.op, container_id, key=c.key)
        conjuncts.append(c)
    return Query(tuple(conjuncts))


class WorkflowContainer:
    """Serial interpreter for one workflow instance with budget enforcement."""

    def __init__(self, container_id: str, workflow: Workflow, mediator: Mediator):
        self.id = container_id
        self.workflow = workflow
        self.mediator = mediator
        self.status = RUNNING
        self.status_reason = ""
        self.cost_charged = 0.0
        self.transitions_used = 0
        self.findings: set[Observable] = set()
        self.searched: set[Observable] = set()
        self.rule_ids: list[str] = []
        self.step_log: list[dict] = []
        self._pending: list[tuple] = []  # (step id, bound hosts, ignore-delay)
        self._due: list[tuple[int, str, tuple[str, ...]]] = []  # (tick, step id, bound hosts)
        self._seen: set[tuple[str, int]] = set()
        self.started_at = mediator.now()
        self.ended_at: int | None = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "ContainerState":
        self._dispatch([(sid, ()) for sid in self.workflow.entry])
        return self.state()

    def on_alert(self, handler_name: str, notification: AlertNotification) -> "ContainerState":
        if self.status != RUNNING:
            return self.state()
        if handler_name not in self.workflow.handlers:
            raise UnknownHandlerError(f"{self.id}: unknown handler {handler_name!r}")
        key = (notification.rule_id, notification.max_seq())
        if key in self._seen:
            return self.state()  # duplicate delivery is a no-op
        if self.transitions_used >= self.workflow.max_transitions:
            self._finish("transition-limit", "max transitions reached")
            return self.state()
        self._seen.add(key)
        self.transitions_used += 1
        for event in notification.matched:
            self.findings.update(event.observables)
        binding = notification.hosts()
        self._dispatch([(sid, binding) for sid in self.workflow.handlers[handler_name]])
        return self.state()

    def on_tick(self, now: int) -> "ContainerState":
        """Execute scheduled steps that have come due."""
        if self.status != RUNNING or not self._due:
            return self.state()
        due = [entry for entry in self._due if entry[0] <= now]
        self._due = [entry for entry in self._due if entry[0] > now]
        self._dispatch([(sid, binding, True) for _, sid, binding in due])
        return self.state()

    def cancel(self, reason: str = "cancelled") -> None:
        if self.status == RUNNING:
            self.status = "failed"
            self.status_reason = reason
            self.ended_at = self.mediator.now()
        self.mediator.revoke()

    # -- interpretation ------------------------------------------------------

    def _dispatch(self, items: list[tuple]) -> None:
        self._pending.extend(i if len(i) == 3 else (i[0], i[1], False) for i in items)
        while self._pending and self.status == RUNNING:
            sid, binding, ignore_delay = self._pending.pop(0)
            step = self.workflow.steps[sid]
            if not ignore_delay and step.kind == "run-task":
                schedule = step.params.get("schedule") or {}
                delay = schedule.get("delay", 0)
                if delay > 0:
                    self._due.append((self.mediator.now() + delay, sid, binding))
                    continue
            self._execute(step, binding)
            if self.status == RUNNING:
                self._pending.extend((n, binding, False) for n in step.next)

    def _resolve_target(self, raw: Mapping, binding: tuple[str, ...]) -> list[str]:
        if raw.get("all_hosts"):
            return self._call(self.mediator.host_ids)
        if raw.get("from_alert"):
            return list(binding)
        return list(raw.get("hosts", []))

    def _charge(self, amount: float, what: str) -> bool:
        """Budget precheck: the step that would overflow is never issued."""
        if self.cost_charged + amount > self.workflow.budget:
            self._finish("budget-exhausted", f"step {what} needs {amount}, "
                         f"{self.workflow.budget - self.cost_charged} left")
            return False
        self.cost_charged += amount
        return True

    def _call(self, fn, *args, **kwargs):
        """Mediator calls are retried once, then the container fails."""
        try:
            return fn(*args, **kwargs)
        except MediatorRevokedError:
            self._finish("failed", "mediator revoked")
            raise
        except Exception:
            try:
                return fn(*args, **kwargs)
            except Exception as exc:
                self._finish("failed", f"mediator failure: {exc}")
                raise

    def _execute(self, step: WorkflowStep, binding: tuple[str, ...]) -> None:
        cm = self.mediator._cost_model
        try:
            if step.kind == "deploy-policy":
                policy = PolicySpec.from_json(step.params["policy"])
                targets = self._resolve_target(step.params["target"], binding)
                if not self._charge(cm.policy_deploy * len(targets), step.id):
                    return
                for host in targets:
                    self._call(self.mediator.deploy_policy, host, policy)
                self.searched.update(policy.monitored_observables())
            elif step.kind == "run-task":
                task = TaskSpec.from_json(step.params["task"], cm)
                targets = self._resolve_target(step.params["target"], binding)
                if not self._charge(task.cost * len(targets), step.id):
                    return
                tags = dict(step.params.get("tags", {}))
                for host in targets:
                    events = self._call(self.mediator.run_task, host, task)
                    for event in events:
                        self.findings.update(event.observables)
                    summary = Event(
                        host=host,
                        time=self.mediator.now(),
                        channel="task-result",
                        attrs={
                            "kind": "task-summary",
                            "container": self.id,
                            "step": step.id,
                            "task": task.id,
                            "matches": str(len(events)),
                            **tags,
                        },
                    )
                    self._call(self.mediator.emit_event, summary)
                self.searched.update(task.searched_observables())
            elif step.kind == "define-alert":
                if not self._charge(cm.alert_rule, step.id):
                    return
                query = _substitute(Query.from_json(step.params["query"]), self.id)
                rule_id = self._call(
                    self.mediator.register_alert,
                    query,
                    step.params["interval"],
                    step.params["handler"],
                    step.params.get("include_history", False),
                )
                self.rule_ids.append(rule_id)
            elif step.kind == "verdict":
                decision = step.params["decision"]
                rationale = step.params.get("rationale", "")
                thresholds = {
                    "theta_conf": step.params.get("theta_conf"),
                    "theta_ref": step.params.get("theta_ref"),
                }
                self._finish("confirmed" if decision == "confirm" else "demoted", rationale)
                self._call(
                    self.mediator.notify_verdict,
                    decision,
                    frozenset(self.findings),
                    frozenset(self.searched),
                    rationale,
                    thresholds,
                )
            else:  # unreachable on validated workflows; the closed set is the sandbox
                raise WorkflowError(f"unknown step kind {step.kind!r}")
        except (MediatorRevokedError, WorkflowError):
            raise
        except Exception:
            if self.status == RUNNING:
                self._finish("failed", f"step {step.id} failed")
            return
        self.step_log.append({"step": step.id, "tick": self.mediator.now(), "kind": step.kind})

    def _finish(self, status: str, reason: str) -> None:
        if self.status != RUNNING:
            return
        self.status = status
        self.status_reason = reason
        self.ended_at = self.mediator.now()
        self._pending.clear()
        self._due.clear()
        if status in ("budget-exhausted", "transition-limit", "failed"):
            try:
                self.mediator.notify_terminal(status, frozenset(self.findings), frozenset(self.searched))
            except Exception:
                pass

    def state(self) -> ContainerState:
        return ContainerState(
            container_id=self.id,
            workflow_id=self.workflow.id,
            pending=tuple(p[0] for p in self._pending) + tuple(sid for _, sid, _ in self._due),
            transitions_used=self.transitions_used,
            cost_charged=self.cost_charged,
            status=self.status,
            findings=frozenset(self.findings),
        )


class ContainerRuntime:
    """Registry of live containers; validates and starts workflows."""

    def __init__(self):
        self._containers: dict[str, WorkflowContainer] = {}
        self._counter = 0

    def next_id(self) -> str:
        self._counter += 1
        return f"c-{self._counter:04d}"

    def start_container(self, workflow: Workflow, mediator: Mediator) -> str:
        errors = validate(workflow)
        if errors:
            raise InvalidWorkflowError(errors)
        container = WorkflowContainer(mediator.container_id, workflow, mediator)
        self._containers[container.id] = container
        container.start()
        return container.id

    def container(self, container_id: str) -> WorkflowContainer:
        try:
            return self._containers[container_id]
        except KeyError:
            raise UnknownContainerError(f"unknown container: {container_id!r}") from None

    def on_alert(self, handler: tuple[str, str], notification: AlertNotification) -> ContainerState:
        return self.container(handler[0]).on_alert(handler[1], notification)

    def on_tick(self, now: int) -> None:
        for cid in sorted(self._containers):
            self._containers[cid].on_tick(now)

    def running(self) -> list[WorkflowContainer]:
        return [c for cid, c in sorted(self._containers.items()) if c.status == RUNNING]

    def all(self) -> list[WorkflowContainer]:
        return [self._containers[cid] for cid in sorted(self._containers)]
