"""Simulated endpoint fleet: per-host synthetic state, on-access policies,
forensic tasks, and cost accounting.

The asymmetry at the heart of the module: policies see only activity at or
after their deployment tick, while tasks inspect host state directly and find
artifacts no matter when they were created. Each host is a serial state
machine; the fleet dispatch interface is safe to call from many containers.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .costs import CostLedger, CostModel
from .evidence import Event
from .observables import Observable, normalize_value

ACTIVITY_KINDS = (
    "create-file",
    "touch-file",
    "set-registry",
    "access-registry",
    "start-process",
    "acquire-mutex",
    "dns-query",
    "connect-ip",
)

SCAN_KINDS = ("file-search", "registry-scan", "process-list", "mutex-scan", "netlog-scan")

TRIGGERS = {
    "file-open": ("file", "file-path"),
    "registry-access": ("registry", "registry-key"),
    "process-start": ("process", "process-name"),
    "dns-query": ("dns", "domain"),
}


class FleetError(Exception):
    pass


class UnknownHostError(FleetError):
    pass


class MalformedPolicyError(FleetError):
    pass


class MalformedTaskError(FleetError):
    pass


@dataclass(frozen=True)
class Pattern:
    """Literal value or prefix match; a trailing '*' in the string form means prefix."""

    kind: str  # literal | prefix
    value: str

    def matches(self, candidate: str) -> bool:
        if self.kind == "literal":
            return candidate == self.value
        return candidate.startswith(self.value)

    @classmethod
    def from_string(cls, raw: str) -> "Pattern":
        if raw.endswith("*"):
            return cls("prefix", raw[:-1])
        return cls("literal", raw)

    def to_string(self) -> str:
        return self.value + "*" if self.kind == "prefix" else self.value


@dataclass(frozen=True)
class Monitor:
    trigger: str
    pattern: Pattern
    channel: str

    @classmethod
    def from_json(cls, data: Mapping) -> "Monitor":
        trigger = data.get("trigger")
        if trigger not in TRIGGERS:
            raise MalformedPolicyError(f"unknown monitor trigger: {trigger!r}")
        default_channel, otype = TRIGGERS[trigger]
        raw = data.get("pattern", "")
        if not isinstance(raw, str) or not raw.rstrip("*").strip():
            raise MalformedPolicyError(f"monitor needs a non-empty pattern, got {raw!r}")
        if raw.endswith("*"):
            pattern = Pattern("prefix", normalize_value(otype, raw[:-1]))
        else:
            pattern = Pattern("literal", normalize_value(otype, raw))
        return cls(trigger=trigger, pattern=pattern, channel=data.get("channel", default_channel))

    def to_json(self) -> dict:
        return {"trigger": self.trigger, "pattern": self.pattern.to_string(), "channel": self.channel}


@dataclass(frozen=True)
class PolicySpec:
    id: str
    monitors: tuple[Monitor, ...]

    @classmethod
    def from_json(cls, data: Mapping) -> "PolicySpec":
        monitors = tuple(Monitor.from_json(m) for m in data.get("monitors", []))
        if not monitors:
            raise MalformedPolicyError("policy needs at least one monitor")
        if not data.get("id"):
            raise MalformedPolicyError("policy needs an id")
        return cls(id=data["id"], monitors=monitors)

    def to_json(self) -> dict:
        return {"id": self.id, "monitors": [m.to_json() for m in self.monitors]}

    def monitored_observables(self) -> frozenset[Observable]:
        """Literal monitor patterns as typed observables (prefix patterns excluded)."""
        out = set()
        for m in self.monitors:
            if m.pattern.kind == "literal":
                out.add(Observable(TRIGGERS[m.trigger][1], m.pattern.value))
        return frozenset(out)


_SCAN_PARAM_KEYS = {
    "file-search": ("hashes", "paths"),
    "registry-scan": ("keys",),
    "process-list": ("names",),
    "mutex-scan": ("names",),
    "netlog-scan": ("values",),
}

_SCAN_OTYPE = {
    "registry-scan": "registry-key",
    "process-list": "process-name",
    "mutex-scan": "mutex",
}


@dataclass(frozen=True)
class TaskSpec:
    id: str
    scan: str
    params: Mapping[str, tuple]
    cost: float
    time_range: tuple[int, int] | None = None

    @classmethod
    def from_json(cls, data: Mapping, cost_model: CostModel | None = None) -> "TaskSpec":
        scan = data.get("scan")
        if scan not in SCAN_KINDS:
            raise MalformedTaskError(f"unknown scan kind: {scan!r}")
        if not data.get("id"):
            raise MalformedTaskError("task needs an id")
        params = {}
        for key in _SCAN_PARAM_KEYS[scan]:
            params[key] = tuple(data.get(key, ()))
        non_empty = any(params[k] for k in params)
        # process-list may run unfiltered; every other scan needs parameters
        if scan != "process-list" and not non_empty:
            raise MalformedTaskError(f"{scan} needs non-empty scan parameters")
        cost = data.get("cost")
        if cost is None:
            cost = (cost_model or CostModel()).task_cost(scan)
        if cost <= 0:
            raise MalformedTaskError(f"task cost must be > 0, got {cost}")
        time_range = tuple(data["time_range"]) if data.get("time_range") else None
        return cls(id=data["id"], scan=scan, params=params, cost=float(cost), time_range=time_range)

    def to_json(self) -> dict:
        out: dict = {"id": self.id, "scan": self.scan, "cost": self.cost}
        for key, values in self.params.items():
            if values:
                out[key] = list(values)
        if self.time_range:
            out["time_range"] = list(self.time_range)
        return out

    def searched_observables(self) -> frozenset[Observable]:
        """What this scan looks for, as typed observables."""
        out: set[Observable] = set()
        if self.scan == "file-search":
            out.update(Observable("file-hash-sha256", h) for h in self.params.get("hashes", ()))
            out.update(Observable("file-path", p) for p in self.params.get("paths", ()))
        elif self.scan == "netlog-scan":
            # netlog values are untyped on the wire (domain/ip/url); skip typing
            return frozenset()
        else:
            otype = _SCAN_OTYPE[self.scan]
            key = _SCAN_PARAM_KEYS[self.scan][0]
            out.update(Observable(otype, v) for v in self.params.get(key, ()))
        return frozenset(out)


@dataclass
class HostState:
    host: str
    files: dict[str, str] = field(default_factory=dict)  # path -> hash
    registry: dict[str, str] = field(default_factory=dict)
    processes: set[str] = field(default_factory=set)
    mutexes: set[str] = field(default_factory=set)
    netlog: list[tuple[int, str, str]] = field(default_factory=list)  # (tick, value, direction)
    clock: int = 0

    @classmethod
    def from_json(cls, data: Mapping) -> "HostState":
        return cls(
            host=data["id"],
            files={normalize_value("file-path", p): h.lower() for p, h in data.get("files", {}).items()},
            registry={normalize_value("registry-key", k): v for k, v in data.get("registry", {}).items()},
            processes={normalize_value("process-name", p) for p in data.get("processes", [])},
            mutexes={normalize_value("mutex", m) for m in data.get("mutexes", [])},
        )


def _netlog_observable(value: str) -> Observable:
    """Type a raw netlog value: URL if schemed, IPv4 if dotted digits, else domain."""
    if "://" in value:
        return Observable("url", value)
    parts = value.split(".")
    if len(parts) == 4 and all(p.isdigit() for p in parts):
        return Observable("ip", value)
    return Observable("domain", value)


@dataclass
class _Deployment:
    id: str
    policy: PolicySpec
    deployed_at: int


class AgentFleet:
    """The fleet dispatch surface workflow containers talk to (via the mediator)."""

    def __init__(
        self,
        hosts: list[HostState],
        sink: Callable[[Event], Event] | None = None,
        ledger: CostLedger | None = None,
        cost_model: CostModel | None = None,
        measurement_period: int = 0,
        seed: int = 0,
    ):
        self._hosts: dict[str, HostState] = {h.host: h for h in hosts}
        self._deployments: dict[str, list[_Deployment]] = {h: [] for h in self._hosts}
        self._locks: dict[str, threading.Lock] = {h: threading.Lock() for h in self._hosts}
        self.sink = sink
        self.ledger = ledger or CostLedger()
        self.cost_model = cost_model or CostModel()
        self.measurement_period = measurement_period
        self._rng = random.Random(seed)
        self._dep_counter = 0
        self.now = 0

    @classmethod
    def from_json(cls, data: Mapping, **kwargs) -> "AgentFleet":
        hosts = [HostState.from_json(h) for h in data.get("hosts", [])]
        if not hosts:
            raise FleetError("fleet definition has no hosts")
        return cls(hosts, **kwargs)

    def host_ids(self) -> list[str]:
        return sorted(self._hosts)

    def host(self, host_id: str) -> HostState:
        try:
            return self._hosts[host_id]
        except KeyError:
            raise UnknownHostError(f"unknown host: {host_id!r}") from None

    def set_clock(self, now: int) -> None:
        self.now = now
        for h in self._hosts.values():
            h.clock = now

    def _emit(self, event: Event) -> Event:
        return self.sink(event) if self.sink else event

    # -- policies ------------------------------------------------------------

    def deploy_policy(self, host_id: str, policy: PolicySpec) -> str:
        state = self.host(host_id)
        if not policy.monitors:
            raise MalformedPolicyError("policy has no monitors")
        with self._locks[host_id]:
            self._dep_counter += 1
            dep_id = f"dep-{self._dep_counter:04d}"
            self._deployments[host_id].append(_Deployment(dep_id, policy, state.clock))
            self.ledger.charge(state.clock, host_id, self.cost_model.policy_deploy, f"policy:{policy.id}")
        return dep_id

    def _policy_events(self, host_id: str, trigger: str, value: str, extra_obs: list[Observable]) -> list[Event]:
        state = self._hosts[host_id]
        channel_default, otype = TRIGGERS[trigger]
        events = []
        for dep in self._deployments[host_id]:
            if state.clock < dep.deployed_at:
                continue  # activity strictly before deployment is invisible
            for monitor in dep.policy.monitors:
                if monitor.trigger != trigger or not monitor.pattern.matches(value):
                    continue
                events.append(
                    self._emit(
                        Event(
                            host=host_id,
                            time=state.clock,
                            channel=monitor.channel,
                            observables=tuple([Observable(otype, value)] + extra_obs),
                            attrs={
                                "source": "policy",
                                "policy": dep.policy.id,
                                "deployment": dep.id,
                                "trigger": trigger,
                            },
                        )
                    )
                )
        return events

    # -- activity -------------------------------------------------------------

    def simulate_activity(self, host_id: str, action: Mapping) -> list[Event]:
        """Mutate host state per the activity record; emit events for matching monitors."""
        state = self.host(host_id)
        kind = action.get("kind")
        with self._locks[host_id]:
            if kind == "create-file":
                path = normalize_value("file-path", action["path"])
                state.files[path] = action["hash"].lower()
                extra = [Observable("file-hash-sha256", action["hash"])]
                return self._policy_events(host_id, "file-open", path, extra)
            if kind == "touch-file":
                path = normalize_value("file-path", action["path"])
                extra = []
                if path in state.files:
                    extra = [Observable("file-hash-sha256", state.files[path])]
                return self._policy_events(host_id, "file-open", path, extra)
            if kind == "set-registry":
                key = normalize_value("registry-key", action["key"])
                state.registry[key] = str(action.get("value", ""))
                return self._policy_events(host_id, "registry-access", key, [])
            if kind == "access-registry":
                key = normalize_value("registry-key", action["key"])
                return self._policy_events(host_id, "registry-access", key, [])
            if kind == "start-process":
                name = normalize_value("process-name", action["name"])
                state.processes.add(name)
                return self._policy_events(host_id, "process-start", name, [])
            if kind == "acquire-mutex":
                state.mutexes.add(normalize_value("mutex", action["name"]))
                return []  # no on-access monitor for mutexes; forensics only
            if kind == "dns-query":
                domain = normalize_value("domain", action["domain"])
                state.netlog.append((state.clock, domain, "out"))
                return self._policy_events(host_id, "dns-query", domain, [])
            if kind == "connect-ip":
                value = str(action["ip"]).strip()
                state.netlog.append((state.clock, value, "out"))
                return []  # network connections are netlog-scan territory
        raise FleetError(f"unknown activity kind: {kind!r}")

    # -- forensic tasks ---------------------------------------------------------

    def run_task(self, host_id: str, task: TaskSpec) -> list[Event]:
        """Scan current host state; one task-result event per matching artifact."""
        state = self.host(host_id)
        if task.scan not in SCAN_KINDS:
            raise MalformedTaskError(f"unknown scan kind: {task.scan!r}")
        with self._locks[host_id]:
            self.ledger.charge(state.clock, host_id, task.cost, f"task:{task.id}:{task.scan}")
            hits: list[tuple[tuple[Observable, ...], dict]] = []
            if task.scan == "file-search":
                hashes = {h.lower() for h in task.params.get("hashes", ())}
                paths = {normalize_value("file-path", p) for p in task.params.get("paths", ())}
                for path in sorted(state.files):
                    digest = state.files[path]
                    if digest in hashes or path in paths:
                        hits.append(
                            (
                                (Observable("file-path", path), Observable("file-hash-sha256", digest)),
                                {"artifact": "file"},
                            )
                        )
            elif task.scan == "registry-scan":
                keys = {normalize_value("registry-key", k) for k in task.params.get("keys", ())}
                for key in sorted(keys & state.registry.keys()):
                    hits.append(((Observable("registry-key", key),), {"artifact": "registry", "data": state.registry[key]}))
            elif task.scan == "process-list":
                names = {normalize_value("process-name", n) for n in task.params.get("names", ())}
                matched = sorted(state.processes if not names else names & state.processes)
                for name in matched:
                    hits.append(((Observable("process-name", name),), {"artifact": "process"}))
            elif task.scan == "mutex-scan":
                names = {normalize_value("mutex", n) for n in task.params.get("names", ())}
                for name in sorted(names & state.mutexes):
                    hits.append(((Observable("mutex", name),), {"artifact": "mutex"}))
            elif task.scan == "netlog-scan":
                values = {str(v).strip().lower() for v in task.params.get("values", ())}
                lo, hi = task.time_range or (0, state.clock)
                for tick, value, direction in state.netlog:
                    if lo <= tick <= hi and value.lower() in values:
                        hits.append(
                            ((_netlog_observable(value),),
                             {"artifact": "netlog", "at": str(tick), "direction": direction})
                        )
            events = []
            for observables, extra in hits:
                attrs = {"source": "task", "task": task.id, "scan": task.scan, "kind": "hit", **extra}
                events.append(
                    self._emit(Event(host=host_id, time=state.clock, channel="task-result", observables=observables, attrs=attrs))
                )
        return events

    # -- measurements ------------------------------------------------------------

    def sample_measurements(self, now: int) -> list[Event]:
        """Emit cpu/mem/io measurement events at the configured sampling period."""
        if self.measurement_period <= 0 or now % self.measurement_period != 0:
            return []
        events = []
        for host_id in self.host_ids():
            for metric in ("cpu", "mem", "io"):
                value = round(self._rng.uniform(0.0, 100.0), 3)
                events.append(
                    self._emit(
                        Event(
                            host=host_id,
                            time=now,
                            channel="measurement",
                            attrs={"source": "measurement", "metric": metric, "value": str(value)},
                        )
                    )
                )
        return events

    def cost_report(self, window: tuple[int, int] | None = None) -> dict[str, float]:
        return self.ledger.report(window)
