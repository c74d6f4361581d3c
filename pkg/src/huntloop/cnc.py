"""Command and control: the hunting loop, hypothesis lifecycle, and hunt records.

The orchestrator owns every mutable piece of state: hypotheses and their
lifecycle, workflow containers (via the runtime), the journal, the ranking
history. Reactive hunting starts from an external trigger; proactive hunting
periodically compiles the top-ranked AttackDB profiles into workflows within
a global budget. Containers report back through their mediators and the
orchestrator adjudicates: weighted coverage with enough distinct weight
classes confirms, anything else takes the refutation path (demoted or stale).
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

from .attackdb import AttackGraph, ioa_of, observables_of
from .config import ServiceConfig
from .costs import CostLedger
from .evidence import AlertNotification, EvidenceStore
from .fleet import AgentFleet, HostState
from .hypotheses import (
    Hypothesis,
    Sighting,
    apply_refutation_signal,
    coverage,
    generate,
    rank,
    rank_attack_profiles,
    support,
)
from .journal import Journal
from .observables import Observable
from .wfgen import generate_workflow
from .workflow import (
    AuditLog,
    ContainerRuntime,
    Mediator,
    UnknownContainerError,
    Workflow,
)

ALLOWED_TRANSITIONS = frozenset(
    {
        ("proposed", "approved"),
        ("proposed", "stale"),
        ("approved", "testing"),
        ("approved", "stale"),
        ("testing", "confirmed"),
        ("testing", "demoted"),
        ("testing", "stale"),
        ("testing", "proposed"),  # pinned hypotheses fall back to triage
    }
)


class OrchestratorError(Exception):
    pass


class UnknownHypothesisError(OrchestratorError):
    pass


class TerminalHypothesisError(OrchestratorError):
    pass


class IllegalTransitionError(OrchestratorError):
    pass


class LoopModeError(OrchestratorError):
    pass


@dataclass(frozen=True)
class HuntRecord:
    hypothesis_id: str
    workflow_id: str
    container_id: str
    started: int
    ended: int
    terminal_status: str  # container status at adjudication
    hypothesis_status: str
    rationale: str
    coverage: float
    weight_classes: int

    def to_json(self) -> dict:
        return {
            "hypothesis_id": self.hypothesis_id,
            "workflow_id": self.workflow_id,
            "container_id": self.container_id,
            "started": self.started,
            "ended": self.ended,
            "terminal_status": self.terminal_status,
            "hypothesis_status": self.hypothesis_status,
            "rationale": self.rationale,
            "coverage": self.coverage,
            "weight_classes": self.weight_classes,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "HuntRecord":
        return cls(**dict(data))


def _parse_counter(ids: Iterable[str], prefix: str) -> int:
    best = 0
    pattern = re.compile(rf"^{re.escape(prefix)}-(\d+)$")
    for value in ids:
        m = pattern.match(value)
        if m:
            best = max(best, int(m.group(1)))
    return best


class Orchestrator:
    """Single-process hunting loop over one AttackDB snapshot and one fleet."""

    def __init__(
        self,
        graph: AttackGraph,
        config: ServiceConfig | None = None,
        fleet: AgentFleet | None = None,
        journal: Journal | None = None,
    ):
        self.config = config or ServiceConfig()
        self.graph = graph
        self.now = 0
        self.lock = threading.RLock()

        self.ledger = CostLedger()
        self.store = EvidenceStore(dispatcher=self._dispatch, log_path=self.config.evidence_log_path)
        if fleet is None:
            if self.config.fleet_path:
                import json as _json

                with open(self.config.fleet_path, encoding="utf-8") as fh:
                    fleet = AgentFleet.from_json(_json.load(fh))
            else:
                fleet = AgentFleet([HostState(host="H1")])
        fleet.sink = self.store.ingest
        fleet.ledger = self.ledger
        fleet.cost_model = self.config.cost_model
        fleet.measurement_period = self.config.measurement_period
        self.fleet = fleet

        self.audit = AuditLog(self.config.audit_log_path)
        self.runtime = ContainerRuntime()
        self.journal = journal or Journal(self.config.journal_path)

        self.hypotheses: dict[str, Hypothesis] = {}
        self.meta: dict[str, dict] = {}
        self.records: list[HuntRecord] = []
        self.workflows: dict[str, Workflow] = {}
        self.container_info: dict[str, dict] = {}
        self.active_container: dict[str, str] = {}  # hypothesis id -> container id
        self.sightings: list[Sighting] = []
        self.rank_history: list[dict] = []
        self.notifications: list[dict] = []
        self._hyp_counter = 0
        self._wf_counter = 0
        self._proactive_last: int | None = None
        self._proactive_spent = 0.0

    # -- plumbing ------------------------------------------------------------

    def advance_clock(self, now: int) -> None:
        self.now = now
        self.fleet.set_clock(now)
        # keep rule registration timestamps aligned with the driving clock
        self.store.now = max(self.store.now, now)

    def evidence_set(self):
        return self.store.observed_values() | frozenset(s.observable for s in self.sightings)

    def _next_hyp_id(self, _suspect: str = "") -> str:
        self._hyp_counter += 1
        return f"hyp-{self._hyp_counter:04d}"

    def _next_wf_id(self) -> str:
        self._wf_counter += 1
        return f"wf-{self._wf_counter:04d}"

    def _journal_hypothesis(self, h: Hypothesis) -> None:
        self.journal.append(
            "hypothesis",
            {"hypothesis": h.to_json(), "meta": dict(self.meta.get(h.id, {}))},
            snapshot_state=self._state_dict,
        )

    def _state_dict(self) -> dict:
        return {
            "hypotheses": {hid: h.to_json() for hid, h in sorted(self.hypotheses.items())},
            "meta": {hid: dict(m) for hid, m in sorted(self.meta.items())},
            "records": [r.to_json() for r in self.records],
            "workflows": {wid: w.to_json() for wid, w in sorted(self.workflows.items())},
            "containers": {cid: dict(info) for cid, info in sorted(self.container_info.items())},
            "counters": {"hyp": self._hyp_counter, "wf": self._wf_counter},
        }

    def _set_hypothesis(self, h: Hypothesis) -> None:
        self.hypotheses[h.id] = h
        self.meta.setdefault(h.id, {})
        self._journal_hypothesis(h)

    def _transition(self, h: Hypothesis, new_status: str) -> Hypothesis:
        if (h.status, new_status) not in ALLOWED_TRANSITIONS:
            raise IllegalTransitionError(f"{h.id}: {h.status} -> {new_status} is not a legal transition")
        updated = replace(h, status=new_status)
        self._set_hypothesis(updated)
        return updated

    def hypothesis(self, hyp_id: str) -> Hypothesis:
        try:
            return self.hypotheses[hyp_id]
        except KeyError:
            raise UnknownHypothesisError(f"unknown hypothesis: {hyp_id!r}") from None

    def _snapshot_ranking(self) -> None:
        ranked = self.ranked()
        self.rank_history.append(
            {
                "tick": self.now,
                "ranking": [
                    {
                        "hypothesis": h.id,
                        "suspect": h.suspect,
                        "jaccard": round(h.jaccard, 9),
                        "support": round(h.support, 9),
                        "status": h.status,
                    }
                    for h in ranked
                ],
            }
        )

    def ranked(self) -> list[Hypothesis]:
        """All hypotheses in rank order against the current evidence set."""
        ranked = rank(self.hypotheses.values(), self.evidence_set())
        for h in ranked:
            self.hypotheses[h.id] = h  # refresh jaccard fields
        return ranked

    # -- reactive loop ---------------------------------------------------------

    def on_external_trigger(self, trigger) -> list[Hypothesis]:
        """Turn an external alert / sightings batch into proposed hypotheses."""
        if self.config.loop.mode not in ("reactive", "both"):
            raise LoopModeError("reactive hunting is disabled by loop mode")
        sightings = self._parse_trigger(trigger)
        if not sightings:
            return []
        with self.lock:
            self.sightings.extend(sightings)
            generated = generate(
                self.graph,
                sightings,
                k=self.config.loop.top_k,
                weights=self.config.weights,
                id_factory=self._next_hyp_id,
            )
            created: list[Hypothesis] = []
            evidence = self.evidence_set()
            active_suspects = {
                h.suspect: h.id for h in self.hypotheses.values() if not h.terminal
            }
            for h in rank(generated, evidence):
                if h.suspect in active_suspects:
                    merged = self._merge_sightings(active_suspects[h.suspect], h.sighted)
                    created.append(merged)
                    continue
                self._set_hypothesis(h)
                created.append(h)
                if h.jaccard >= self.config.loop.auto_approve_threshold:
                    approved = self._transition(h, "approved")
                    self._launch(approved)
            self._snapshot_ranking()
            return [self.hypotheses[h.id] for h in created]

    def _merge_sightings(self, hyp_id: str, new_sighted) -> Hypothesis:
        h = self.hypotheses[hyp_id]
        sighted = h.sighted | (new_sighted & (h.sighted | h.expected_unsighted))
        if sighted == h.sighted:
            return h
        updated = replace(
            h,
            sighted=sighted,
            expected_unsighted=h.expected_unsighted - sighted,
        )
        updated = replace(updated, support=support(self.graph, updated, self.config.weights))
        self._set_hypothesis(updated)
        return updated

    @staticmethod
    def _parse_trigger(trigger) -> list[Sighting]:
        if isinstance(trigger, Mapping):
            raw = trigger.get("sightings", [])
        else:
            raw = list(trigger)
        out = []
        for item in raw:
            out.append(item if isinstance(item, Sighting) else Sighting.from_json(item))
        return out

    # -- proactive loop -------------------------------------------------------

    def proactive_tick(self, now: int) -> list[str]:
        """Compile and launch workflows for the top-k AttackDB profiles, within budget."""
        if self.config.loop.mode not in ("proactive", "both"):
            raise LoopModeError("proactive hunting is disabled by loop mode")
        with self.lock:
            interval = self.config.loop.proactive_interval
            if self._proactive_last is not None and now - self._proactive_last < interval:
                return []
            if self._proactive_last is None and now < interval:
                return []
            self._proactive_last = now
            evidence = self.evidence_set()
            launched: list[str] = []
            active_suspects = {h.suspect for h in self.hypotheses.values() if not h.terminal}
            for suspect, jaccard in rank_attack_profiles(self.graph, evidence, self.config.loop.top_k):
                if suspect in active_suspects:
                    continue
                all_obs = observables_of(self.graph, suspect)
                sighted = frozenset(evidence & all_obs)
                h = Hypothesis(
                    id=self._next_hyp_id(),
                    suspect=suspect,
                    suspect_name=self.graph.nodes[suspect].name,
                    ioa=ioa_of(self.graph, suspect),
                    sighted=sighted,
                    expected_unsighted=all_obs - sighted,
                    support=0.0,
                    jaccard=jaccard,
                )
                h = replace(h, support=support(self.graph, h, self.config.weights))
                workflow = self._generate(h)
                estimate = float((workflow.generation_report or {}).get("estimate", workflow.budget))
                if self._proactive_spent + estimate > self.config.loop.proactive_budget:
                    self.notifications.append(
                        {"tick": now, "kind": "proactive-truncated", "suspect": suspect, "estimate": estimate}
                    )
                    break
                self._proactive_spent += estimate
                self._set_hypothesis(h)
                h = self._transition(h, "approved")
                cid = self._launch(h, workflow)
                launched.append(self.container_info[cid]["workflow_id"])
            if launched:
                self._snapshot_ranking()
            return launched

    # -- workflow launching ------------------------------------------------------

    def _generate(self, h: Hypothesis) -> Workflow:
        cfg = self.config
        return generate_workflow(
            h,
            self.graph,
            cfg.cost_model,
            cfg.workflow_budget,
            hosts=self.fleet.host_ids(),
            fan_out_cap=cfg.fan_out_cap,
            alert_interval=cfg.alert_interval,
            completion_interval=cfg.completion_interval,
            wave_interval=cfg.wave_interval,
            max_transitions=cfg.max_transitions,
            strategy=cfg.workflow_strategy,
            otype_filter=cfg.otype_filter,
            theta_conf=cfg.theta_conf,
            theta_ref=cfg.theta_ref,
            workflow_id=self._next_wf_id(),
        )

    def _launch(self, h: Hypothesis, workflow: Workflow | None = None) -> str:
        if h.id in self.active_container:
            raise OrchestratorError(f"{h.id} already has an active container")
        workflow = workflow or self._generate(h)
        self.workflows[workflow.id] = workflow
        self.journal.append("workflow", {"workflow": workflow.to_json()})
        cid = self.runtime.next_id()
        mediator = Mediator(
            cid,
            self.fleet,
            self.store,
            clock=lambda: self.now,
            audit=self.audit,
            cost_model=self.config.cost_model,
            on_verdict=self._on_verdict,
            on_terminal=self._on_terminal,
        )
        self._transition(h, "testing")
        self.active_container[h.id] = cid
        self.container_info[cid] = {
            "container_id": cid,
            "workflow_id": workflow.id,
            "hypothesis_id": h.id,
            "started": self.now,
            "status": "running",
            "ended": None,
        }
        self.journal.append("container", dict(self.container_info[cid]))
        # start may drive the container to a terminal state (and adjudicate)
        # synchronously, so all bookkeeping above must already be in place
        self.runtime.start_container(workflow, mediator)
        return cid

    # -- container callbacks --------------------------------------------------------

    def _dispatch(self, handler: tuple[str, str], notification: AlertNotification) -> None:
        self.notifications.append(
            {
                "tick": notification.fired_at,
                "kind": "alert",
                "rule": notification.rule_id,
                "container": handler[0],
                "handler": handler[1],
                "events": len(notification.matched),
            }
        )
        self.runtime.on_alert(handler, notification)

    def _on_verdict(self, cid, claim, findings, searched, rationale, thresholds) -> None:
        self.adjudicate(cid, claim, findings, searched=searched, rationale=rationale, thresholds=thresholds)

    def _on_terminal(self, cid, status, findings, searched) -> None:
        self.adjudicate(cid, "demote", findings, searched=searched, rationale=f"container {status}")

    # -- adjudication ------------------------------------------------------------

    def adjudicate(
        self,
        container_id: str,
        claim: str,
        findings,
        searched=None,
        rationale: str = "",
        thresholds: Mapping | None = None,
    ) -> HuntRecord:
        """Decide a hypothesis from a terminal container's evidence.

        Confirmation needs weighted coverage >= theta_conf built from at least
        min_weight_classes distinct classes; everything else runs through the
        refutation signal and lands on demoted or stale.
        """
        with self.lock:
            info = self.container_info.get(container_id)
            if info is None:
                raise UnknownContainerError(f"unknown container: {container_id!r}")
            if info["ended"] is not None:
                for record in self.records:
                    if record.container_id == container_id:
                        return record
            container = self.runtime.container(container_id)
            if container.status == "running":
                raise OrchestratorError(f"container {container_id} is still running")

            h = self.hypothesis(info["hypothesis_id"])
            thresholds = thresholds or {}
            theta_conf = thresholds.get("theta_conf") or self.config.theta_conf
            theta_ref = thresholds.get("theta_ref") or self.config.theta_ref
            findings = frozenset(findings)
            cov, classes, evidence_set = coverage(h, findings, self.config.weights)

            if cov >= theta_conf and classes >= self.config.min_weight_classes:
                updated = replace(
                    h,
                    sighted=evidence_set,
                    expected_unsighted=h.observable_set - evidence_set,
                )
                updated = replace(updated, support=support(self.graph, updated, self.config.weights))
                self.hypotheses[h.id] = updated
                updated = self._transition(updated, "confirmed")
                self.notifications.append(
                    {"tick": self.now, "kind": "hypothesis-confirmed", "hypothesis": h.id, "suspect": h.suspect}
                )
            else:
                searched_set = frozenset(searched) if searched is not None else frozenset(container.searched)
                refuted = apply_refutation_signal(
                    h, searched_set, findings & searched_set, theta_ref=theta_ref
                )
                if refuted.status == "demoted":
                    if self.meta.get(h.id, {}).get("pinned"):
                        refuted = replace(refuted, status=h.status)
                        self.hypotheses[h.id] = refuted
                        updated = self._transition(refuted, "proposed")
                    else:
                        refuted = replace(refuted, status=h.status)
                        self.hypotheses[h.id] = refuted
                        updated = self._transition(refuted, "demoted")
                else:
                    self.hypotheses[h.id] = refuted
                    updated = self._transition(refuted, "stale")

            rendered = rationale
            if "{coverage" in rationale:
                try:
                    rendered = rationale.format(coverage=cov, classes=classes)
                except (KeyError, IndexError):
                    rendered = rationale
            record = HuntRecord(
                hypothesis_id=h.id,
                workflow_id=info["workflow_id"],
                container_id=container_id,
                started=info["started"],
                ended=self.now,
                terminal_status=container.status,
                hypothesis_status=updated.status,
                rationale=rendered,
                coverage=round(cov, 9),
                weight_classes=classes,
            )
            self.records.append(record)
            info["status"] = container.status
            info["ended"] = self.now
            self.journal.append("container", dict(info))
            self.journal.append("record", record.to_json())
            self.active_container.pop(h.id, None)
            self._snapshot_ranking()
            return record

    # -- analyst actions ---------------------------------------------------------

    def analyst_action(self, action: str, hyp_id: str, payload: Mapping | None = None) -> Hypothesis:
        payload = payload or {}
        with self.lock:
            h = self.hypothesis(hyp_id)
            if h.terminal:
                raise TerminalHypothesisError(f"{hyp_id} is terminal ({h.status})")
            if action == "approve":
                approved = self._transition(h, "approved")
                self._launch(approved)
                return self.hypothesis(hyp_id)
            if action == "pin":
                self.meta.setdefault(hyp_id, {})["pinned"] = True
                self._journal_hypothesis(h)
                return h
            if action == "dismiss":
                self._cancel_container(hyp_id, reason="dismissed")
                return self._transition(self.hypothesis(hyp_id), "stale")
            if action == "augment":
                return self._augment(h, payload)
            raise OrchestratorError(f"unknown analyst action: {action!r}")

    def _augment(self, h: Hypothesis, payload: Mapping) -> Hypothesis:
        add = frozenset(Observable.from_json(o) for o in payload.get("add", []))
        remove = frozenset(Observable.from_json(o) for o in payload.get("remove", []))
        known = self.graph.all_observables()
        unresolved = sorted(f"{o.otype}:{o.value}" for o in add - known)
        expected = (h.expected_unsighted | (add - h.sighted)) - remove
        updated = replace(h, expected_unsighted=expected, provenance="analyst-augmented")
        meta = self.meta.setdefault(h.id, {})
        if unresolved:
            meta["unresolved_in_cti"] = sorted(set(meta.get("unresolved_in_cti", [])) | set(unresolved))
        was_testing = h.status == "testing"
        if was_testing:
            self._cancel_container(h.id, reason="augmented")
            updated = replace(updated, status="proposed")
        self._set_hypothesis(updated)
        if was_testing:
            updated = self._transition(updated, "approved")
            self._launch(updated)
            updated = self.hypothesis(h.id)
        return updated

    def _cancel_container(self, hyp_id: str, reason: str) -> None:
        cid = self.active_container.pop(hyp_id, None)
        if cid is None:
            return
        container = self.runtime.container(cid)
        container.cancel(reason)
        self.store.unregister_for_container(cid)
        info = self.container_info[cid]
        info["status"] = container.status
        info["ended"] = self.now
        self.journal.append("container", dict(info))

    # -- loop driving -------------------------------------------------------------

    def pump(self, now: int) -> list[AlertNotification]:
        """One scheduler beat: advance clocks, sample, evaluate alerts, run due steps."""
        with self.lock:
            self.advance_clock(now)
            self.fleet.sample_measurements(now)
            fired = self.store.tick(now)
            self.runtime.on_tick(now)
            if self.config.loop.mode in ("proactive", "both"):
                self.proactive_tick(now)
            return fired

    def quiescent(self) -> bool:
        return not self.runtime.running() and self.store.parked_count() == 0

    def finalize(self) -> None:
        """End-of-hunt sweep: cancel still-running containers and adjudicate them."""
        with self.lock:
            for container in list(self.runtime.running()):
                container.cancel("finalized")
                self.adjudicate(
                    container.id,
                    "demote",
                    frozenset(container.findings),
                    searched=frozenset(container.searched),
                    rationale="finalized while running",
                )

    # -- persistence ---------------------------------------------------------------

    @classmethod
    def restore(
        cls,
        journal_path: str,
        graph: AttackGraph,
        config: ServiceConfig | None = None,
        fleet: AgentFleet | None = None,
    ) -> "Orchestrator":
        """Rebuild hypothesis/workflow state from a journal after a crash."""
        state = Journal.replay(journal_path)
        orch = cls(graph, config=config, fleet=fleet, journal=Journal(None))
        orch.hypotheses = {hid: Hypothesis.from_json(raw) for hid, raw in state["hypotheses"].items()}
        orch.meta = {hid: dict(m) for hid, m in state.get("meta", {}).items()}
        orch.records = [HuntRecord.from_json(raw) for raw in state.get("records", [])]
        orch.workflows = {wid: Workflow.from_json(raw) for wid, raw in state.get("workflows", {}).items()}
        orch.container_info = {cid: dict(info) for cid, info in state.get("containers", {}).items()}
        orch.active_container = {
            info["hypothesis_id"]: cid
            for cid, info in orch.container_info.items()
            if info.get("ended") is None
        }
        counters = state.get("counters") or {}
        orch._hyp_counter = counters.get("hyp") or _parse_counter(orch.hypotheses, "hyp")
        orch._wf_counter = counters.get("wf") or _parse_counter(orch.workflows, "wf")
        return orch
