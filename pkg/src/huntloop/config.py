"""Service configuration: weight table, thresholds, cost model, loop settings, paths.

A config file is a JSON object whose keys override these defaults; unknown
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from typing import Mapping

from .costs import CostModel
from .observables import DEFAULT_WEIGHTS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LoopConfig:
    mode: str = "both"  # reactive | proactive | both
    top_k: int = 3
    auto_approve_threshold: float = 0.3
    proactive_interval: int = 20
    proactive_budget: float = 500.0

    def __post_init__(self) -> None:
        if self.mode not in ("reactive", "proactive", "both"):
            raise ConfigError(f"unknown loop mode: {self.mode!r}")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if not 0.0 <= self.auto_approve_threshold <= 1.0:
            raise ConfigError("auto_approve_threshold must be in [0,1]")


@dataclass(frozen=True)
class ServiceConfig:
    weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    theta_conf: float = 0.5
    theta_ref: float = 0.1
    min_weight_classes: int = 2
    cost_model: CostModel = field(default_factory=CostModel)
    loop: LoopConfig = field(default_factory=LoopConfig)
    workflow_budget: float = 200.0
    max_transitions: int = 32
    alert_interval: int = 5
    completion_interval: int = 1
    wave_interval: int = 10
    fan_out_cap: int = 5
    workflow_strategy: str = "staged"
    otype_filter: frozenset[str] | None = None
    measurement_period: int = 0
    trusted_sources: tuple[str, ...] | None = None
    attackdb_path: str | None = None
    fleet_path: str | None = None
    journal_path: str | None = None
    evidence_log_path: str | None = None
    audit_log_path: str | None = None

    @classmethod
    def from_json(cls, data: Mapping) -> "ServiceConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "cost_model" in kwargs:
            kwargs["cost_model"] = CostModel.from_json(kwargs["cost_model"])
        if "loop" in kwargs:
            kwargs["loop"] = LoopConfig(**kwargs["loop"])
        if kwargs.get("otype_filter") is not None:
            kwargs["otype_filter"] = frozenset(kwargs["otype_filter"])
        if kwargs.get("trusted_sources") is not None:
            kwargs["trusted_sources"] = tuple(kwargs["trusted_sources"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | None) -> "ServiceConfig":
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def with_overrides(self, **kwargs) -> "ServiceConfig":
        return replace(self, **kwargs)
