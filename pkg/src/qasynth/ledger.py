"""Thread-safe event log for a pipeline run."""

from __future__ import annotations

import threading
from collections import Counter
from pathlib import Path
from typing import Any

from .records import dumps


class RunLedger:
    """Collects per-run events: backend calls, retries, shortfalls, drops.

    Events are plain dicts with a ``kind`` key. Counters are kept alongside
    so stage summaries don't have to rescan the event list.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.events: list[dict[str, Any]] = []
        self.counters: Counter[str] = Counter()

    def record(self, kind: str, **fields: Any) -> None:
        with self._lock:
            self.events.append({"kind": kind, **fields})
            self.counters[kind] += 1

    def bump(self, name: str, n: int = 1) -> None:
        with self._lock:
            self.counters[name] += n

    def of_kind(self, kind: str) -> list[dict[str, Any]]:
        with self._lock:
            return [e for e in self.events if e["kind"] == kind]

    def flush(self, path: str | Path) -> None:
        """Append buffered events to ``path`` and clear the buffer."""
        with self._lock:
            events, self.events = self.events, []
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as fh:
            for event in events:
                fh.write(dumps(event) + "\n")
