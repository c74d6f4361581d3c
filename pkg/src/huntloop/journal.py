"""Append-only JSON-lines journal with periodic snapshots.

Every orchestrator state change is one journal entry; replay folds the
entries into a state dict, starting from the most recent snapshot if one is
present. Replaying a journal written up to any point reproduces the state at
that point exactly, which is what the crash-recovery tests check.
"""

from __future__ import annotations

import json
import os
from typing import Callable, Iterator


class Journal:
    def __init__(self, path: str | None, snapshot_every: int = 500):
        self.path = path
        self.snapshot_every = snapshot_every
        self._since_snapshot = 0
        self._fh = open(path, "a", encoding="utf-8") if path else None
        self.entries: list[dict] = []  # kept in memory when no path is configured

    def append(self, entry_type: str, data: dict, snapshot_state: Callable[[], dict] | None = None) -> None:
        entry = {"t": entry_type, "data": data}
        if self._fh:
            self._fh.write(json.dumps(entry, sort_keys=True) + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())
        else:
            self.entries.append(entry)
        self._since_snapshot += 1
        if snapshot_state is not None and self._since_snapshot >= self.snapshot_every:
            self.snapshot(snapshot_state())

    def snapshot(self, state: dict) -> None:
        entry = {"t": "snapshot", "data": state}
        if self._fh:
            self._fh.write(json.dumps(entry, sort_keys=True) + "\n")
            self._fh.flush()
        else:
            self.entries.append(entry)
        self._since_snapshot = 0

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    @staticmethod
    def read(path: str) -> Iterator[dict]:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)

    @staticmethod
    def replay(path: str) -> dict:
        """Fold a journal file into orchestrator state (see Orchestrator.restore)."""
        entries = list(Journal.read(path))
        # fast-forward to the last snapshot, then apply the tail
        start = 0
        state: dict = {"hypotheses": {}, "meta": {}, "records": [], "workflows": {}, "containers": {}, "counters": {}}
        for i, entry in enumerate(entries):
            if entry["t"] == "snapshot":
                state = entry["data"]
                start = i + 1
        for entry in entries[start:]:
            apply_entry(state, entry)
        return state


def apply_entry(state: dict, entry: dict) -> None:
    kind, data = entry["t"], entry["data"]
    if kind == "hypothesis":
        state["hypotheses"][data["hypothesis"]["id"]] = data["hypothesis"]
        state["meta"][data["hypothesis"]["id"]] = data.get("meta", {})
    elif kind == "record":
        state["records"].append(data)
    elif kind == "workflow":
        state["workflows"][data["workflow"]["id"]] = data["workflow"]
    elif kind == "container":
        state["containers"][data["container_id"]] = data
    elif kind == "counters":
        state["counters"] = data
    elif kind == "snapshot":
        state.clear()
        state.update(data)
    else:
        raise ValueError(f"unknown journal entry type: {kind!r}")
