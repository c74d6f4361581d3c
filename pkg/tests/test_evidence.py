import random

import pytest

from huntloop.evidence import (
    AlertNotification,
    Event,
    EvidenceStore,
    InvalidEventError,
    InvalidQueryError,
    Query,
    q,
)
from huntloop.observables import Observable

from .oracles import linear_scan


def ev(host="H1", time=0, channel="registry", values=(), attrs=None):
    observables = tuple(Observable(t, v) for t, v in values)
    return Event(host=host, time=time, channel=channel, observables=observables, attrs=attrs or {})


# --- ingest --------------------------------------------------------------------


def test_first_event_gets_seq_1():
    store = EvidenceStore()
    assert store.ingest(ev()).seq == 1


def test_seq_monotone():
    store = EvidenceStore()
    assert store.ingest(ev()).seq == 1
    assert store.ingest(ev()).seq == 2


def test_event_missing_host_invalid():
    store = EvidenceStore()
    with pytest.raises(InvalidEventError):
        store.ingest(ev(host=""))
    with pytest.raises(InvalidEventError):
        store.ingest(ev(time=-3))
    with pytest.raises(InvalidEventError):
        store.ingest(ev(channel="syslog"))


def test_retention_log_replay(tmp_path):
    path = str(tmp_path / "events.jsonl")
    store = EvidenceStore(log_path=path)
    store.ingest(ev(values=[("registry-key", "r1")], attrs={"a": "b"}))
    store.ingest(ev(host="H2", channel="dns", values=[("domain", "d1")]))
    store.close()
    fresh = EvidenceStore()
    assert fresh.load_log(path) == 2
    assert fresh.event(2).host == "H2"
    assert fresh.observed_values() == store.observed_values()


# --- search -----------------------------------------------------------------------


def test_search_channel_example():
    store = EvidenceStore()
    e1 = store.ingest(ev(host="H1", channel="registry", values=[("registry-key", "r1")]))
    store.ingest(ev(host="H2", channel="dns", values=[("domain", "d1")]))
    assert store.search(q(("channel", "registry"))) == [e1]


def test_search_empty_store():
    assert EvidenceStore().search(q(("host", "H1"))) == []


def test_search_conjunction_no_match():
    store = EvidenceStore()
    store.ingest(ev(host="H1", channel="registry", values=[("registry-key", "r1")]))
    store.ingest(ev(host="H2", channel="dns", values=[("domain", "d1")]))
    assert store.search(q(("host", "H1"), ("value", "d1"))) == []


def test_invalid_queries_rejected():
    store = EvidenceStore()
    with pytest.raises(InvalidQueryError):
        store.search(Query(()))
    with pytest.raises(InvalidQueryError):
        store.search(q(("time", 10, 3)))
    with pytest.raises(InvalidQueryError):
        store.search(q(("channel", "nope")))
    with pytest.raises(InvalidQueryError):
        store.search(Query.from_json({"conjuncts": [{"field": "seq", "op": "eq", "value": "1"}]}))


def test_query_json_round_trip():
    query = q(("channel", "dns"), ("time", 0, 9), ("value-in", {"a", "b"}), ("attr", "k", "v"))
    assert Query.from_json(query.to_json()) == query


def _random_corpus(rng, n):
    hosts = [f"H{i}" for i in range(5)]
    channels = ["registry", "dns", "process", "file", "task-result"]
    otypes = ["registry-key", "domain", "process-name", "file-hash-sha256"]
    values = [f"val{i}" for i in range(12)]
    store = EvidenceStore()
    for _ in range(n):
        pairs = [(rng.choice(otypes), rng.choice(values)) for _ in range(rng.randint(0, 3))]
        attrs = {k: rng.choice(values) for k in rng.sample(["a", "b", "c"], rng.randint(0, 2))}
        store.ingest(
            ev(
                host=rng.choice(hosts),
                time=rng.randint(0, 50),
                channel=rng.choice(channels),
                values=pairs,
                attrs=attrs,
            )
        )
    return store


def _random_query_tuples(rng):
    pool = [
        ("host", f"H{rng.randint(0, 5)}"),
        ("channel", rng.choice(["registry", "dns", "process", "file"])),
        ("time", *(sorted((rng.randint(0, 50), rng.randint(0, 50))))),
        ("otype", rng.choice(["registry-key", "domain", "process-name"])),
        ("value", f"val{rng.randint(0, 13)}"),
        ("value-in", {f"val{rng.randint(0, 13)}" for _ in range(rng.randint(1, 3))}),
        ("attr", rng.choice("abc"), f"val{rng.randint(0, 13)}"),
        ("attr-prefix", rng.choice("abc"), "val"),
    ]
    return rng.sample(pool, k=rng.randint(1, 3))


def _as_query(tuples):
    return q(*tuples)


def test_search_matches_linear_scan_oracle():
    rng = random.Random(2024)
    store = _random_corpus(rng, 400)
    events = [store.event(i) for i in range(1, store.max_seq + 1)]
    for _ in range(150):
        tuples = _random_query_tuples(rng)
        assert store.search(_as_query(tuples)) == linear_scan(events, tuples)


# --- alert rules ----------------------------------------------------------------------


def collect_dispatches(store):
    delivered = []
    store.dispatcher = lambda handler, notification: delivered.append((handler, notification))
    return delivered


def test_register_then_matching_event_then_tick_fires():
    store = EvidenceStore()
    delivered = collect_dispatches(store)
    store.register_alert(q(("value", "r1")), 1, ("c-1", "lead"))
    e = store.ingest(ev(values=[("registry-key", "r1")]))
    fired = store.tick(1)
    assert len(fired) == 1 and fired[0].matched == (e,)
    assert delivered and delivered[0][0] == ("c-1", "lead")


def test_rule_sees_only_post_registration_events_by_default():
    store = EvidenceStore()
    store.ingest(ev(values=[("registry-key", "r1")]))
    store.register_alert(q(("value", "r1")), 1, ("c-1", "lead"))
    assert store.tick(1) == []


def test_include_history_sees_past_events():
    store = EvidenceStore()
    e = store.ingest(ev(values=[("registry-key", "r1")]))
    store.register_alert(q(("value", "r1")), 1, ("c-1", "lead"), include_history=True)
    fired = store.tick(1)
    assert fired and fired[0].matched == (e,)


def test_interval_lower_bound():
    with pytest.raises(InvalidQueryError):
        EvidenceStore().register_alert(q(("value", "x")), 0, ("c", "h"))


def test_no_due_rules_returns_empty():
    store = EvidenceStore()
    store.register_alert(q(("value", "r1")), 10, ("c-1", "lead"))
    assert store.tick(1) == []


def test_due_rule_no_matches_advances_watermark():
    store = EvidenceStore()
    rule_id = store.register_alert(q(("value", "r1")), 1, ("c-1", "lead"))
    store.ingest(ev(values=[("domain", "d1")], channel="dns"))
    assert store.tick(1) == []
    rule = {r.id: r for r in store.rules()}[rule_id]
    assert rule.watermark == 1


def test_due_rule_three_events_one_notification():
    store = EvidenceStore()
    store.register_alert(q(("value", "r1")), 2, ("c-1", "lead"))
    for _ in range(3):
        store.ingest(ev(values=[("registry-key", "r1")]))
    fired = store.tick(2)
    assert len(fired) == 1 and len(fired[0].matched) == 3


def test_events_during_tick_seen_next_evaluation():
    store = EvidenceStore()

    def dispatcher(handler, notification):
        # handler ingests a new matching event while the tick is running
        if store.max_seq < 5:
            store.ingest(ev(values=[("registry-key", "r1")]))

    store.dispatcher = dispatcher
    store.register_alert(q(("value", "r1")), 1, ("c-1", "lead"))
    store.ingest(ev(values=[("registry-key", "r1")]))
    first = store.tick(1)
    assert len(first) == 1 and len(first[0].matched) == 1
    second = store.tick(2)  # the event ingested during tick 1
    assert len(second) == 1 and second[0].matched[0].seq == 2


def test_failed_dispatch_parks_and_retries():
    store = EvidenceStore()
    calls = []

    def flaky(handler, notification):
        calls.append(notification.rule_id)
        if len(calls) == 1:
            raise RuntimeError("handler offline")

    store.dispatcher = flaky
    store.register_alert(q(("value", "r1")), 1, ("c-1", "lead"))
    store.ingest(ev(values=[("registry-key", "r1")]))
    store.tick(1)
    assert store.parked_count() == 1
    store.tick(2)
    assert store.parked_count() == 0 and len(calls) == 2


def test_tick_backwards_rejected():
    store = EvidenceStore()
    store.tick(5)
    with pytest.raises(Exception):
        store.tick(4)


def test_unregister_for_container():
    store = EvidenceStore()
    store.register_alert(q(("value", "a")), 1, ("c-1", "lead"))
    store.register_alert(q(("value", "b")), 1, ("c-2", "lead"))
    removed = store.unregister_for_container("c-1")
    assert len(removed) == 1 and len(store.rules()) == 1


# --- no-skip / exactly-once matching property ---------------------------------------


def test_no_skip_delivery_over_random_interleavings():
    rng = random.Random(777)
    for _ in range(20):
        store = EvidenceStore()
        store.dispatcher = lambda *a: None
        n_rules = rng.randint(1, 3)
        rules = {}
        registration_seq = {}
        matched_by_rule: dict[str, list[int]] = {}
        now = 0
        all_events = []
        for step in range(rng.randint(10, 40)):
            action = rng.random()
            if action < 0.55:
                value = rng.choice(["r1", "r2", "r3"])
                e = store.ingest(ev(values=[("registry-key", value)], time=now))
                all_events.append(e)
            elif action < 0.8 or not rules:
                if len(rules) < n_rules:
                    value = rng.choice(["r1", "r2"])
                    rid = store.register_alert(q(("value", value)), rng.randint(1, 3), ("c", "h"))
                    rules[rid] = value
                    registration_seq[rid] = store.max_seq
                    matched_by_rule[rid] = []
            else:
                now += rng.randint(1, 3)
                for notification in store.tick(now):
                    matched_by_rule[notification.rule_id].extend(e.seq for e in notification.matched)
        now += 10
        for notification in store.tick(now):
            matched_by_rule[notification.rule_id].extend(e.seq for e in notification.matched)

        for rid, value in rules.items():
            expected = [
                e.seq
                for e in all_events
                if e.seq > registration_seq[rid]
                and any(o.value == value for o in e.observables)
            ]
            got = sorted(matched_by_rule[rid])
            assert got == expected, f"rule {rid} value {value}: {got} != {expected}"
            assert len(got) == len(set(got))  # exactly-once matching


def test_watermark_monotone():
    rng = random.Random(31)
    store = EvidenceStore()
    store.dispatcher = lambda *a: None
    rid = store.register_alert(q(("value", "r1")), 1, ("c", "h"))
    last = 0
    now = 0
    for _ in range(30):
        if rng.random() < 0.6:
            store.ingest(ev(values=[("registry-key", rng.choice(["r1", "r2"]))]))
        else:
            now += 1
            store.tick(now)
        rule = {r.id: r for r in store.rules()}[rid]
        assert rule.watermark >= last
        last = rule.watermark


def test_notifications_nonempty_and_matching():
    store = EvidenceStore()
    store.dispatcher = lambda *a: None
    query = q(("value", "r1"))
    store.register_alert(query, 1, ("c", "h"))
    store.ingest(ev(values=[("registry-key", "r1")]))
    store.ingest(ev(values=[("registry-key", "r2")]))
    for notification in store.tick(1):
        assert notification.matched
        assert all(query.matches(e) for e in notification.matched)


def test_notification_hosts_and_max_seq():
    store = EvidenceStore()
    s1 = store.ingest(ev(host="H2", values=[("registry-key", "r1")]))
    s2 = store.ingest(ev(host="H1", values=[("registry-key", "r1")]))
    n = AlertNotification("al-1", (s1, s2), 3)
    assert n.hosts() == ("H1", "H2")
    assert n.max_seq() == 2


def test_concurrent_ingest_assigns_unique_seqs():
    import threading

    store = EvidenceStore()
    seen = []

    def worker(host):
        local = []
        for _ in range(250):
            local.append(store.ingest(ev(host=host)).seq)
        seen.append(local)

    threads = [threading.Thread(target=worker, args=(f"H{i}",)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    all_seqs = [s for chunk in seen for s in chunk]
    assert len(all_seqs) == 1000
    assert sorted(all_seqs) == list(range(1, 1001))  # atomic, gapless, unique
