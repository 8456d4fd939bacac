"""Metric collection, persistence and run summaries.

The metric file holds one JSON object per line with the fields ``task_id``,
``round``, ``scope``, ``name``, ``value``, ``wall_time`` in that order.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Iterable

from .core import MetricRecord

__all__ = ["Tracker", "MetricSummary", "RunSummary", "summarize_records", "import_records",
           "record_to_line", "lower_is_better"]


def lower_is_better(name: str) -> bool:
    return "loss" in name or "bytes" in name or name.endswith("_seconds")


def record_to_line(r: MetricRecord) -> str:
    return json.dumps({
        "task_id": r.task_id,
        "round": r.round_index,
        "scope": r.scope,
        "name": r.name,
        "value": r.value,
        "wall_time": r.wall_time,
    })


def _line_to_record(line: str) -> MetricRecord:
    d = json.loads(line)
    return MetricRecord(d["task_id"], d["round"], d["scope"], d["name"], float(d["value"]), float(d["wall_time"]))


def import_records(path) -> list[MetricRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return [_line_to_record(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class MetricSummary:
    best: float
    final: float
    round_of_best: int
    final_round: int
    count: int


@dataclass
class RunSummary:
    task_id: str
    metrics: dict[tuple[str, str], MetricSummary] = field(default_factory=dict)
    total_bytes: float = 0.0
    total_wall_time: float = 0.0
    selection_counts: dict[str, int] = field(default_factory=dict)

    def get(self, name: str, scope: str = "server") -> MetricSummary:
        return self.metrics[(scope, name)]


def summarize_records(records: Iterable[MetricRecord], task_id: str) -> RunSummary:
    """Best, final and round-of-best for every (scope, name) of one task."""
    out = RunSummary(task_id)
    grouped: dict[tuple[str, str], list[MetricRecord]] = {}
    for r in records:
        if r.task_id != task_id:
            continue
        grouped.setdefault((r.scope, r.name), []).append(r)
        out.total_wall_time = max(out.total_wall_time, r.wall_time)
        if r.scope == "server" and r.name in ("comm_bytes_up", "comm_bytes_down"):
            out.total_bytes += r.value
        if r.name == "selected" and r.value:
            out.selection_counts[r.scope] = out.selection_counts.get(r.scope, 0) + 1
    for key, rows in grouped.items():
        sign = -1.0 if lower_is_better(key[1]) else 1.0
        best_row = rows[0]
        for r in rows[1:]:
            if sign * r.value > sign * best_row.value:
                best_row = r
        out.metrics[key] = MetricSummary(best_row.value, rows[-1].value, best_row.round_index,
                                         rows[-1].round_index, len(rows))
    return out


class Tracker:
    """Append-only metric stream, optionally mirrored line by line to a file."""

    def __init__(self, path=None):
        self._lock = threading.Lock()
        self._records: list[MetricRecord] = []
        self._fh = open(path, "a", encoding="utf-8", newline="\n") if path is not None else None

    def record(self, r: MetricRecord) -> None:
        with self._lock:
            self._records.append(r)
            if self._fh is not None:
                self._fh.write(record_to_line(r) + "\n")
                self._fh.flush()

    def log(self, task_id: str, round_index: int, scope: str, name: str, value: float,
            wall_time: float = 0.0) -> None:
        self.record(MetricRecord(task_id, round_index, scope, name, float(value), wall_time))

    def records(self, task_id: str | None = None) -> list[MetricRecord]:
        with self._lock:
            return [r for r in self._records if task_id is None or r.task_id == task_id]

    def summarize(self, task_id: str) -> RunSummary:
        return summarize_records(self.records(task_id), task_id)

    def export(self, task_id: str, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for r in self.records(task_id):
                fh.write(record_to_line(r) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
