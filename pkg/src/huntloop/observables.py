"""Typed observables: the atoms of evidence shared by every HuntLoop module.

An observable is an (otype, value) pair with a fixed normalization per type,
so that the same artifact reported by different feeds or sensors compares
equal. Pyramid-of-Pain weight classes live here too, since both the
hypothesis ranker and the workflow generator key off them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping
from urllib.parse import urlsplit, urlunsplit

OTYPES = (
    "file-hash-sha256",
    "file-hash-md5",
    "ip",
    "domain",
    "url",
    "file-path",
    "process-name",
    "registry-key",
    "mutex",
    "email",
)

# Weight classes along the Pyramid of Pain: hashes are the most indicative
# and the least robust; host artifacts are the reverse.
HASH_CLASS = "hash"
NETWORK_CLASS = "network"
HOST_ARTIFACT_CLASS = "host-artifact"

WEIGHT_CLASS_OF = {
    "file-hash-sha256": HASH_CLASS,
    "file-hash-md5": HASH_CLASS,
    "ip": NETWORK_CLASS,
    "domain": NETWORK_CLASS,
    "url": NETWORK_CLASS,
    "email": NETWORK_CLASS,
    "file-path": HOST_ARTIFACT_CLASS,
    "process-name": HOST_ARTIFACT_CLASS,
    "registry-key": HOST_ARTIFACT_CLASS,
    "mutex": HOST_ARTIFACT_CLASS,
}

DEFAULT_WEIGHTS = {
    HASH_CLASS: 1.0,
    NETWORK_CLASS: 0.8,
    HOST_ARTIFACT_CLASS: 0.5,
}

_LOWERCASE_OTYPES = frozenset(
    {
        "file-hash-sha256",
        "file-hash-md5",
        "domain",
        "email",
        "registry-key",
        "process-name",
        "mutex",
    }
)


class ObservableError(ValueError):
    """Raised for an unknown otype or an empty/unnormalizable value."""


def normalize_value(otype: str, value: str) -> str:
    """Apply the per-type normalization rules.

    Hashes, domains, emails, registry keys, process names and mutexes are
    lowercased; URLs are lowercased in scheme+host only; file paths are
    lowercased with separators canonicalized to '/'. IPs pass through.
    """
    if otype not in WEIGHT_CLASS_OF:
        raise ObservableError(f"unknown observable type: {otype!r}")
    if not isinstance(value, str):
        raise ObservableError(f"observable value must be a string, got {type(value).__name__}")
    value = value.strip()
    if not value:
        raise ObservableError("observable value is empty")
    if otype in _LOWERCASE_OTYPES:
        return value.lower()
    if otype == "file-path":
        return value.replace("\\", "/").lower()
    if otype == "url":
        parts = urlsplit(value)
        if parts.scheme or parts.netloc:
            return urlunsplit(
                (parts.scheme.lower(), parts.netloc.lower(), parts.path, parts.query, parts.fragment)
            )
        return value
    return value  # ip: identity


@dataclass(frozen=True, order=True)
class Observable:
    """A normalized (otype, value) pair; equality and ordering are by both fields."""

    otype: str
    value: str

    def __post_init__(self) -> None:
        normalized = normalize_value(self.otype, self.value)
        object.__setattr__(self, "value", normalized)

    @property
    def weight_class(self) -> str:
        return WEIGHT_CLASS_OF[self.otype]

    def to_json(self) -> dict:
        return {"type": self.otype, "value": self.value}

    @classmethod
    def from_json(cls, data: Mapping) -> "Observable":
        if not isinstance(data, Mapping) or "type" not in data or "value" not in data:
            raise ObservableError(f"bad observable entry: {data!r}")
        return cls(data["type"], data["value"])


def weight_of(observable: Observable, weights: Mapping[str, float] | None = None) -> float:
    """Weight of one observable under a class->weight table (default table if None)."""
    table = DEFAULT_WEIGHTS if weights is None else weights
    w = table[observable.weight_class]
    if w <= 0:
        raise ObservableError(f"non-positive weight for class {observable.weight_class!r}")
    return w


def weighted_sum(observables: Iterable[Observable], weights: Mapping[str, float] | None = None) -> float:
    # sorted so float accumulation order is stable across processes
    return sum(weight_of(o, weights) for o in sorted(observables))


def weight_classes(observables: Iterable[Observable]) -> frozenset[str]:
    """Distinct Pyramid-of-Pain weight classes present in a set of observables."""
    return frozenset(o.weight_class for o in observables)
