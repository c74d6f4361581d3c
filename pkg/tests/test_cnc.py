import pytest

from huntloop.cnc import (
    ALLOWED_TRANSITIONS,
    IllegalTransitionError,
    LoopModeError,
    Orchestrator,
    OrchestratorError,
    TerminalHypothesisError,
    UnknownHypothesisError,
)
from huntloop.config import LoopConfig, ServiceConfig
from huntloop.evidence import Event
from huntloop.fleet import AgentFleet, HostState
from huntloop.hypotheses import STATUSES, Hypothesis
from huntloop.observables import Observable
from huntloop.workflow import UnknownContainerError


def obs(otype, value):
    return Observable(otype, value)


def make_orch(g1, threshold=1.0, mode="both", top_k=3, proactive_budget=500.0, interval=5):
    config = ServiceConfig(
        loop=LoopConfig(
            mode=mode,
            top_k=top_k,
            auto_approve_threshold=threshold,
            proactive_interval=interval,
            proactive_budget=proactive_budget,
        )
    )
    fleet = AgentFleet([HostState(host=f"H{i}") for i in range(1, 4)])
    return Orchestrator(g1, config=config, fleet=fleet)


def trigger_r1(host="H1"):
    return {"sightings": [{"observable": {"type": "registry-key", "value": "r1"}, "host": host, "tick": 0}]}


def trigger_d1(host="H1"):
    return {"sightings": [{"observable": {"type": "domain", "value": "d1"}, "host": host, "tick": 0}]}


# --- reactive trigger ---------------------------------------------------------------


def test_trigger_creates_proposed_m1(g1):
    orch = make_orch(g1, threshold=1.0)
    created = orch.on_external_trigger(trigger_r1())
    assert len(created) == 1
    h = created[0]
    assert h.suspect == "M1" and h.status == "proposed"
    assert orch.active_container == {}


def test_threshold_zero_auto_approves_and_starts_container(g1):
    orch = make_orch(g1, threshold=0.0)
    created = orch.on_external_trigger(trigger_r1())
    h = orch.hypothesis(created[0].id)
    assert h.status == "testing"
    assert h.id in orch.active_container
    cid = orch.active_container[h.id]
    assert orch.runtime.container(cid).status == "running"


def test_threshold_one_partial_evidence_stays_proposed(g1):
    orch = make_orch(g1, threshold=1.0)
    created = orch.on_external_trigger(trigger_r1())
    assert orch.hypothesis(created[0].id).status == "proposed"


def test_empty_trigger_empty_list(g1):
    orch = make_orch(g1)
    assert orch.on_external_trigger({"sightings": []}) == []


def test_reactive_disabled(g1):
    orch = make_orch(g1, mode="proactive")
    with pytest.raises(LoopModeError):
        orch.on_external_trigger(trigger_r1())


def test_second_trigger_merges_into_active_hypothesis(g1):
    orch = make_orch(g1, threshold=1.0)
    first = orch.on_external_trigger(trigger_r1())[0]
    results = orch.on_external_trigger(trigger_d1())
    merged = orch.hypothesis(first.id)
    assert obs("domain", "d1") in merged.sighted
    assert obs("domain", "d1") not in merged.expected_unsighted
    # d1 also names M2: a fresh hypothesis appears for it
    suspects = {h.suspect for h in orch.hypotheses.values()}
    assert suspects == {"M1", "M2"}
    assert len([h for h in orch.hypotheses.values() if h.suspect == "M1"]) == 1
    assert {h.suspect for h in results} == {"M1", "M2"}


# --- proactive loop --------------------------------------------------------------------


def test_proactive_interval_gate(g1):
    orch = make_orch(g1, mode="proactive", top_k=1, interval=10)
    assert orch.proactive_tick(3) == []


def test_proactive_launches_top_profile(g1):
    orch = make_orch(g1, mode="proactive", top_k=1, interval=5)
    orch.store.ingest(Event(host="H1", time=0, channel="dns", observables=(obs("domain", "d1"),)))
    launched = orch.proactive_tick(5)
    assert len(launched) == 1
    testing = [h for h in orch.hypotheses.values() if h.status == "testing"]
    assert len(testing) == 1 and testing[0].suspect == "M2"  # J(M2,{d1})=1/3 beats M1's 1/6


def test_proactive_budget_truncates(g1):
    orch = make_orch(g1, mode="proactive", top_k=1, interval=5, proactive_budget=1.0)
    orch.store.ingest(Event(host="H1", time=0, channel="dns", observables=(obs("domain", "d1"),)))
    assert orch.proactive_tick(5) == []
    assert any(n["kind"] == "proactive-truncated" for n in orch.notifications)


def test_proactive_disabled(g1):
    orch = make_orch(g1, mode="reactive")
    with pytest.raises(LoopModeError):
        orch.proactive_tick(50)


# --- adjudication --------------------------------------------------------------------------


def _testing_hypothesis_with_container(orch):
    created = orch.on_external_trigger(trigger_r1())
    h = orch.hypothesis(created[0].id)
    cid = orch.active_container[h.id]
    container = orch.runtime.container(cid)
    container.cancel("test-force-terminal")
    return h, cid


def test_adjudicate_confirms_on_coverage_and_classes(g1):
    orch = make_orch(g1, threshold=0.0)
    h, cid = _testing_hypothesis_with_container(orch)
    findings = {
        obs("file-hash-sha256", "h1"),
        obs("file-hash-sha256", "h2"),
        obs("registry-key", "r1"),
        obs("mutex", "mx1"),
    }
    record = orch.adjudicate(cid, "confirm", findings, searched=findings)
    assert record.hypothesis_status == "confirmed"
    assert record.coverage == pytest.approx(3.0 / 4.6)
    assert record.weight_classes == 2
    assert orch.hypothesis(h.id).status == "confirmed"
    # confirmed evidence folds into the sighted set
    assert obs("mutex", "mx1") in orch.hypothesis(h.id).sighted


def test_adjudicate_below_threshold_applies_found_fraction(g1):
    orch = make_orch(g1, threshold=0.0)
    h, cid = _testing_hypothesis_with_container(orch)
    before = orch.hypothesis(h.id).support
    searched = {obs("file-hash-sha256", "h1"), obs("file-hash-sha256", "h2")}
    record = orch.adjudicate(cid, "confirm", {obs("file-hash-sha256", "h1")}, searched=searched)
    after = orch.hypothesis(h.id)
    assert record.hypothesis_status == "stale"  # found-fraction 0.5 >= theta_ref
    assert after.support == pytest.approx(before * 0.5)
    assert record.coverage == pytest.approx(1.5 / 4.6)


def test_adjudicate_empty_findings_full_search_demotes(g1):
    orch = make_orch(g1, threshold=0.0)
    h, cid = _testing_hypothesis_with_container(orch)
    searched = {obs("file-hash-sha256", "h1"), obs("file-hash-sha256", "h2"), obs("mutex", "mx1")}
    record = orch.adjudicate(cid, "confirm", frozenset(), searched=searched)
    after = orch.hypothesis(h.id)
    assert record.hypothesis_status == "demoted"
    assert after.status == "demoted" and after.support == 0.0


def test_adjudicate_unknown_container(g1):
    orch = make_orch(g1)
    with pytest.raises(UnknownContainerError):
        orch.adjudicate("c-9999", "confirm", frozenset())


def test_adjudicate_running_container_rejected(g1):
    orch = make_orch(g1, threshold=0.0)
    created = orch.on_external_trigger(trigger_r1())
    cid = orch.active_container[created[0].id]
    with pytest.raises(OrchestratorError):
        orch.adjudicate(cid, "confirm", frozenset())


def test_adjudicate_idempotent_returns_existing_record(g1):
    orch = make_orch(g1, threshold=0.0)
    h, cid = _testing_hypothesis_with_container(orch)
    first = orch.adjudicate(cid, "confirm", frozenset(), searched=frozenset())
    second = orch.adjudicate(cid, "confirm", frozenset(), searched=frozenset())
    assert first == second and len(orch.records) == 1


def test_single_container_rule(g1):
    orch = make_orch(g1, threshold=0.0)
    created = orch.on_external_trigger(trigger_r1())
    h = orch.hypothesis(created[0].id)
    with pytest.raises(OrchestratorError):
        orch._launch(h)


# --- analyst actions ---------------------------------------------------------------------


def test_approve_launches(g1):
    orch = make_orch(g1, threshold=1.0)
    h = orch.on_external_trigger(trigger_r1())[0]
    out = orch.analyst_action("approve", h.id)
    assert out.status == "testing"
    assert h.id in orch.active_container


def test_augment_unknown_observable_flagged(g1):
    orch = make_orch(g1, threshold=1.0)
    h = orch.on_external_trigger(trigger_r1())[0]
    out = orch.analyst_action("augment", h.id, {"add": [{"type": "domain", "value": "d9.evil"}]})
    assert obs("domain", "d9.evil") in out.expected_unsighted
    assert out.provenance == "analyst-augmented"
    assert orch.meta[h.id]["unresolved_in_cti"] == ["domain:d9.evil"]


def test_augment_testing_hypothesis_relaunches(g1):
    orch = make_orch(g1, threshold=0.0)
    h = orch.on_external_trigger(trigger_r1())[0]
    first_cid = orch.active_container[h.id]
    out = orch.analyst_action("augment", h.id, {"add": [{"type": "domain", "value": "d9.evil"}]})
    assert out.status == "testing"
    assert orch.active_container[h.id] != first_cid
    assert orch.runtime.container(first_cid).status == "failed"  # cancelled


def test_pin_blocks_auto_demotion(g1):
    orch = make_orch(g1, threshold=0.0)
    created = orch.on_external_trigger(trigger_r1())
    h = orch.hypothesis(created[0].id)
    orch.analyst_action("pin", h.id)
    cid = orch.active_container[h.id]
    orch.runtime.container(cid).cancel("force")
    searched = {obs("file-hash-sha256", "h1"), obs("file-hash-sha256", "h2")}
    record = orch.adjudicate(cid, "confirm", frozenset(), searched=searched)
    assert record.hypothesis_status == "proposed"  # would demote, pin returns it to triage
    assert orch.hypothesis(h.id).status == "proposed"


def test_dismiss_cancels_container_and_unregisters_rules(g1):
    orch = make_orch(g1, threshold=0.0)
    h = orch.on_external_trigger(trigger_r1())[0]
    cid = orch.active_container[h.id]
    assert orch.store.rules()  # lead alerts registered
    out = orch.analyst_action("dismiss", h.id)
    assert out.status == "stale"
    assert orch.runtime.container(cid).status == "failed"
    assert all(r.handler[0] != cid for r in orch.store.rules())


def test_dismiss_proposed(g1):
    orch = make_orch(g1, threshold=1.0)
    h = orch.on_external_trigger(trigger_r1())[0]
    assert orch.analyst_action("dismiss", h.id).status == "stale"


def test_terminal_hypothesis_rejects_actions(g1):
    orch = make_orch(g1, threshold=1.0)
    h = orch.on_external_trigger(trigger_r1())[0]
    orch.analyst_action("dismiss", h.id)
    with pytest.raises(TerminalHypothesisError):
        orch.analyst_action("approve", h.id)


def test_unknown_hypothesis(g1):
    orch = make_orch(g1)
    with pytest.raises(UnknownHypothesisError):
        orch.analyst_action("approve", "hyp-9999")


# --- lifecycle legality: exhaustive enumeration -----------------------------------------------


def test_transition_table_exhaustive(g1):
    orch = make_orch(g1)
    for src in STATUSES:
        for dst in STATUSES:
            h = Hypothesis(
                id=f"hyp-x-{src}-{dst}",
                suspect="M1",
                suspect_name="alpha",
                ioa=frozenset({"TQ1", "TQ2"}),
                sighted=frozenset(),
                expected_unsighted=frozenset(),
                support=0.0,
                status=src,
            )
            orch.hypotheses[h.id] = h
            if (src, dst) in ALLOWED_TRANSITIONS:
                assert orch._transition(h, dst).status == dst
            else:
                with pytest.raises(IllegalTransitionError):
                    orch._transition(h, dst)


# --- ranking bookkeeping -------------------------------------------------------------------


def test_rank_history_snapshots_accumulate(g1):
    orch = make_orch(g1, threshold=1.0)
    orch.on_external_trigger(trigger_r1())
    orch.on_external_trigger(trigger_d1())
    assert len(orch.rank_history) == 2
    last = orch.rank_history[-1]["ranking"]
    assert last[0]["suspect"] in {"M1", "M2"}


def test_finalize_adjudicates_running_containers(g1):
    orch = make_orch(g1, threshold=0.0)
    h = orch.on_external_trigger(trigger_r1())[0]
    assert not orch.quiescent()
    orch.finalize()
    assert orch.quiescent()
    final = orch.hypothesis(h.id)
    assert final.status == "demoted"  # monitors searched, nothing found
    assert len(orch.records) == 1
