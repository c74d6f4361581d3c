"""Resource cost model and the shared charge ledger.

Defaults make forensic scans an order of magnitude costlier than on-access
monitors; all values are configuration. Alert-rule charges are booked against
the synthetic SIEM_HOST since they load the evidence store, not an endpoint.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, fields
from typing import Mapping

SIEM_HOST = "_siem"

_SCAN_COST_FIELD = {
    "file-search": "file_search",
    "registry-scan": "registry_scan",
    "process-list": "process_list",
    "mutex-scan": "mutex_scan",
    "netlog-scan": "netlog_scan",
}


class CostModelError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    policy_deploy: float = 1.0  # per host
    alert_rule: float = 1.0
    file_search: float = 20.0  # per host, per scan below
    registry_scan: float = 10.0
    process_list: float = 5.0
    mutex_scan: float = 5.0
    netlog_scan: float = 10.0
    lead_fraction: float = 0.25
    forensic_fraction: float = 0.7

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name.endswith("_fraction"):
                continue
            if getattr(self, f.name) <= 0:
                raise CostModelError(f"cost {f.name} must be > 0")
        for name in ("lead_fraction", "forensic_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise CostModelError(f"{name} must be in (0,1)")
        if self.lead_fraction + self.forensic_fraction > 1:
            raise CostModelError("stage fractions must sum to <= 1")

    def task_cost(self, scan: str) -> float:
        try:
            return getattr(self, _SCAN_COST_FIELD[scan])
        except KeyError:
            raise CostModelError(f"unknown scan kind: {scan!r}") from None

    @classmethod
    def from_json(cls, data: Mapping | None) -> "CostModel":
        return cls(**dict(data or {}))

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class Charge:
    tick: int
    host: str
    amount: float
    what: str


@dataclass
class CostLedger:
    """Append-only record of every cost charge; reports are sums over it."""

    entries: list[Charge] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def charge(self, tick: int, host: str, amount: float, what: str) -> None:
        if amount < 0:
            raise CostModelError(f"negative charge: {amount}")
        with self._lock:
            self.entries.append(Charge(tick, host, amount, what))

    def report(self, window: tuple[int, int] | None = None) -> dict[str, float]:
        """Cost per host within [lo, hi] (inclusive); whole ledger when None."""
        out: dict[str, float] = {}
        for c in self.entries:
            if window is not None and not (window[0] <= c.tick <= window[1]):
                continue
            out[c.host] = out.get(c.host, 0.0) + c.amount
        return dict(sorted(out.items()))

    def total(self) -> float:
        return sum(c.amount for c in self.entries)
