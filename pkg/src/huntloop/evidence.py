"""Mini-SIEM: event ingestion, indexed conjunctive search, scheduled alert rules.

Time is virtual (integer ticks). Alert rules are evaluated on tick() against the
event log as it stood when the tick began; events ingested during dispatch are
picked up by the next due evaluation. Dispatch is at-least-once: a failed
delivery is parked and retried on subsequent ticks, and handlers are expected
to deduplicate on (rule id, max matched seq).
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

from .observables import Observable

CHANNELS = ("process", "file", "registry", "network", "dns", "task-result", "measurement")

# (field, op) combinations the conjunctive query language accepts.
_QUERY_OPS = frozenset(
    {
        ("host", "eq"),
        ("channel", "eq"),
        ("time", "range"),
        ("otype", "eq"),
        ("value", "eq"),
        ("value", "in"),
        ("attr", "eq"),
        ("attr", "prefix"),
    }
)


class EvidenceError(Exception):
    pass


class InvalidEventError(EvidenceError):
    pass


class InvalidQueryError(EvidenceError):
    pass


@dataclass(frozen=True)
class Event:
    host: str
    time: int
    channel: str
    observables: tuple[Observable, ...] = ()
    attrs: Mapping[str, str] = field(default_factory=dict)
    seq: int = 0  # assigned by the store on ingest

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "host": self.host,
            "time": self.time,
            "channel": self.channel,
            "observables": [o.to_json() for o in self.observables],
            "attrs": dict(self.attrs),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Event":
        return cls(
            host=data["host"],
            time=data["time"],
            channel=data["channel"],
            observables=tuple(Observable.from_json(o) for o in data.get("observables", [])),
            attrs=dict(data.get("attrs", {})),
            seq=data.get("seq", 0),
        )


@dataclass(frozen=True)
class Conjunct:
    field: str
    op: str
    value: object
    key: str | None = None

    def matches(self, event: Event) -> bool:
        if self.field == "host":
            return event.host == self.value
        if self.field == "channel":
            return event.channel == self.value
        if self.field == "time":
            lo, hi = self.value  # type: ignore[misc]
            return lo <= event.time <= hi
        if self.field == "otype":
            return any(o.otype == self.value for o in event.observables)
        if self.field == "value":
            if self.op == "eq":
                return any(o.value == self.value for o in event.observables)
            return any(o.value in self.value for o in event.observables)  # type: ignore[operator]
        if self.field == "attr":
            got = event.attrs.get(self.key or "")
            if got is None:
                return False
            if self.op == "eq":
                return got == self.value
            return got.startswith(self.value)  # type: ignore[arg-type]
        raise InvalidQueryError(f"unknown query field {self.field!r}")

    def to_json(self) -> dict:
        out: dict = {"field": self.field, "op": self.op}
        if self.field == "time":
            out["value"] = list(self.value)  # type: ignore[arg-type]
        elif self.op == "in":
            out["value"] = sorted(self.value)  # type: ignore[arg-type]
        else:
            out["value"] = self.value
        if self.key is not None:
            out["key"] = self.key
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> "Conjunct":
        value = data.get("value")
        op = data.get("op")
        if data.get("field") == "time" and isinstance(value, (list, tuple)):
            value = tuple(value)
        elif op == "in" and isinstance(value, (list, tuple, set)):
            value = frozenset(value)
        return cls(field=data.get("field", ""), op=op or "", value=value, key=data.get("key"))


@dataclass(frozen=True)
class Query:
    conjuncts: tuple[Conjunct, ...]

    def validate(self) -> None:
        if not self.conjuncts:
            raise InvalidQueryError("query needs at least one conjunct")
        for c in self.conjuncts:
            if (c.field, c.op) not in _QUERY_OPS:
                raise InvalidQueryError(f"unsupported predicate: field={c.field!r} op={c.op!r}")
            if c.field == "time":
                if not (isinstance(c.value, tuple) and len(c.value) == 2 and c.value[0] <= c.value[1]):
                    raise InvalidQueryError(f"bad time range: {c.value!r}")
            elif c.field == "attr":
                if not c.key:
                    raise InvalidQueryError("attr predicate needs a key")
                if not isinstance(c.value, str):
                    raise InvalidQueryError("attr predicate needs a string value")
            elif c.op == "in":
                if not isinstance(c.value, frozenset) or not c.value:
                    raise InvalidQueryError("in-set predicate needs a non-empty set")
            elif not isinstance(c.value, str):
                raise InvalidQueryError(f"{c.field} predicate needs a string value")
            if c.field == "channel" and c.value not in CHANNELS:
                raise InvalidQueryError(f"unknown channel {c.value!r}")

    def matches(self, event: Event) -> bool:
        return all(c.matches(event) for c in self.conjuncts)

    def to_json(self) -> dict:
        return {"conjuncts": [c.to_json() for c in self.conjuncts]}

    @classmethod
    def from_json(cls, data: Mapping) -> "Query":
        return cls(tuple(Conjunct.from_json(c) for c in data.get("conjuncts", [])))

    def value_predicates(self) -> frozenset[str]:
        """Literal values this query searches for (eq and in-set predicates)."""
        values: set[str] = set()
        for c in self.conjuncts:
            if c.field == "value":
                if c.op == "eq":
                    values.add(c.value)  # type: ignore[arg-type]
                else:
                    values.update(c.value)  # type: ignore[arg-type]
        return frozenset(values)


def q(*conjuncts: tuple) -> Query:
    """Shorthand query builder: q(("channel", "registry"), ("value", "r1")).

    2-tuples are eq predicates on host/channel/otype/value; ("time", lo, hi),
    ("value-in", {..}), ("attr", key, value), ("attr-prefix", key, prefix).
    """
    built = []
    for c in conjuncts:
        if c[0] == "time":
            built.append(Conjunct("time", "range", (c[1], c[2])))
        elif c[0] == "value-in":
            built.append(Conjunct("value", "in", frozenset(c[1])))
        elif c[0] == "attr":
            built.append(Conjunct("attr", "eq", c[2], key=c[1]))
        elif c[0] == "attr-prefix":
            built.append(Conjunct("attr", "prefix", c[2], key=c[1]))
        else:
            built.append(Conjunct(c[0], "eq", c[1]))
    return Query(tuple(built))


@dataclass
class AlertRule:
    id: str
    query: Query
    interval: int
    handler: tuple[str, str]  # (container id, handler name)
    watermark: int
    include_history: bool
    last_eval: int


@dataclass(frozen=True)
class AlertNotification:
    rule_id: str
    matched: tuple[Event, ...]
    fired_at: int

    def hosts(self) -> tuple[str, ...]:
        return tuple(sorted({e.host for e in self.matched}))

    def max_seq(self) -> int:
        return max(e.seq for e in self.matched)

    def to_json(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "fired_at": self.fired_at,
            "matched": [e.to_json() for e in self.matched],
        }


Dispatcher = Callable[[tuple[str, str], AlertNotification], None]


class EvidenceStore:
    """Append-only event log with in-memory indexes and scheduled alert rules."""

    def __init__(self, dispatcher: Dispatcher | None = None, log_path: str | None = None):
        self._lock = threading.Lock()
        self._events: list[Event] = []
        self._by_host: dict[str, list[int]] = {}
        self._by_channel: dict[str, list[int]] = {}
        self._by_value: dict[str, list[int]] = {}
        self._by_otype: dict[str, list[int]] = {}
        self._observed: set[Observable] = set()
        self._rules: dict[str, AlertRule] = {}
        self._rule_order: list[str] = []
        self._parked: list[tuple[tuple[str, str], AlertNotification]] = []
        self._rule_counter = 0
        self.dispatcher = dispatcher
        self.now = 0
        self._log = open(log_path, "a", encoding="utf-8") if log_path else None

    # -- ingestion ---------------------------------------------------------

    def ingest(self, event: Event) -> Event:
        """Validate, assign the next seq, index, and persist. Returns the stored event."""
        if not isinstance(event, Event):
            raise InvalidEventError(f"not an Event: {event!r}")
        if not event.host:
            raise InvalidEventError("event missing host")
        if not isinstance(event.time, int) or event.time < 0:
            raise InvalidEventError(f"bad event time: {event.time!r}")
        if event.channel not in CHANNELS:
            raise InvalidEventError(f"unknown channel: {event.channel!r}")
        with self._lock:
            stored = replace(event, seq=len(self._events) + 1)
            self._events.append(stored)
            self._by_host.setdefault(stored.host, []).append(stored.seq)
            self._by_channel.setdefault(stored.channel, []).append(stored.seq)
            for obs in stored.observables:
                values = self._by_value.setdefault(obs.value, [])
                if not values or values[-1] != stored.seq:
                    values.append(stored.seq)
                otypes = self._by_otype.setdefault(obs.otype, [])
                if not otypes or otypes[-1] != stored.seq:
                    otypes.append(stored.seq)
                self._observed.add(obs)
            if self._log:
                self._log.write(json.dumps(stored.to_json(), sort_keys=True) + "\n")
                self._log.flush()
        return stored

    def load_log(self, path: str) -> int:
        """Replay a retention log into an empty store. Returns events loaded."""
        count = 0
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    self.ingest(Event.from_json(json.loads(line)))
                    count += 1
        return count

    @property
    def max_seq(self) -> int:
        return len(self._events)

    def event(self, seq: int) -> Event:
        return self._events[seq - 1]

    def observed_values(self) -> frozenset[Observable]:
        """Every distinct observable ever ingested (the ranker's evidence set)."""
        return frozenset(self._observed)

    # -- search ------------------------------------------------------------

    def _candidates(self, query: Query) -> list[int] | None:
        """Smallest single-conjunct index posting list, or None for full scan."""
        best: list[int] | None = None
        for c in query.conjuncts:
            postings: list[int] | None = None
            if c.op == "eq":
                if c.field == "host":
                    postings = self._by_host.get(c.value, [])
                elif c.field == "channel":
                    postings = self._by_channel.get(c.value, [])
                elif c.field == "value":
                    postings = self._by_value.get(c.value, [])
                elif c.field == "otype":
                    postings = self._by_otype.get(c.value, [])
            elif c.field == "value" and c.op == "in":
                merged: set[int] = set()
                for v in c.value:  # type: ignore[union-attr]
                    merged.update(self._by_value.get(v, ()))
                postings = sorted(merged)
            if postings is not None and (best is None or len(postings) < len(best)):
                best = postings
        return best

    def search(self, query: Query) -> list[Event]:
        """Exactly the events satisfying all conjuncts, in seq order."""
        query.validate()
        with self._lock:
            snapshot = len(self._events)
            candidates = self._candidates(query)
        if candidates is None:
            seqs: Iterable[int] = range(1, snapshot + 1)
        else:
            seqs = (s for s in candidates if s <= snapshot)
        return [e for e in (self._events[s - 1] for s in seqs) if query.matches(e)]

    # -- alert rules -------------------------------------------------------

    def register_alert(
        self,
        query: Query,
        interval: int,
        handler: tuple[str, str],
        include_history: bool = False,
    ) -> str:
        query.validate()
        if interval < 1:
            raise InvalidQueryError(f"alert interval must be >= 1, got {interval}")
        with self._lock:
            self._rule_counter += 1
            rule_id = f"al-{self._rule_counter:04d}"
            self._rules[rule_id] = AlertRule(
                id=rule_id,
                query=query,
                interval=interval,
                handler=tuple(handler),  # type: ignore[arg-type]
                watermark=0 if include_history else len(self._events),
                include_history=include_history,
                last_eval=self.now,
            )
            self._rule_order.append(rule_id)
        return rule_id

    def unregister_alert(self, rule_id: str) -> None:
        with self._lock:
            if rule_id in self._rules:
                del self._rules[rule_id]
                self._rule_order.remove(rule_id)

    def rules(self) -> list[AlertRule]:
        return [self._rules[r] for r in self._rule_order]

    def unregister_for_container(self, container_id: str) -> list[str]:
        removed = [r.id for r in self.rules() if r.handler[0] == container_id]
        for rid in removed:
            self.unregister_alert(rid)
        return removed

    def tick(self, now: int) -> list[AlertNotification]:
        """Retry parked deliveries, then evaluate every due rule.

        A due rule sees events with watermark < seq <= (max seq at tick start)
        and its watermark advances to that snapshot whether or not it matched.
        """
        if now < self.now:
            raise EvidenceError(f"tick went backwards: {now} < {self.now}")
        self.now = now

        still_parked = []
        for handler, notification in self._parked:
            try:
                self._deliver(handler, notification)
            except Exception:
                still_parked.append((handler, notification))
        self._parked = still_parked

        snapshot = len(self._events)
        fired: list[AlertNotification] = []
        for rule_id in list(self._rule_order):
            rule = self._rules.get(rule_id)
            if rule is None or now - rule.last_eval < rule.interval:
                continue
            rule.last_eval = now
            low = rule.watermark
            rule.watermark = max(rule.watermark, snapshot)
            matched = tuple(
                e for e in self._events[low:snapshot] if rule.query.matches(e)
            )
            if not matched:
                continue
            notification = AlertNotification(rule_id=rule_id, matched=matched, fired_at=now)
            fired.append(notification)
            try:
                self._deliver(rule.handler, notification)
            except Exception:
                self._parked.append((rule.handler, notification))
        return fired

    def _deliver(self, handler: tuple[str, str], notification: AlertNotification) -> None:
        if self.dispatcher is not None:
            self.dispatcher(handler, notification)

    def parked_count(self) -> int:
        return len(self._parked)

    def close(self) -> None:
        if self._log:
            self._log.close()
            self._log = None
