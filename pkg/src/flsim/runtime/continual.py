"""Class-incremental task schedules and the client-side drift detector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..data import js_divergence

__all__ = ["ContinualTask", "ContinualSchedule", "DriftState", "detect_drift"]


@dataclass(frozen=True)
class ContinualTask:
    labels: tuple[int, ...]
    rounds: int


@dataclass(frozen=True)
class ContinualSchedule:
    """Ordered tasks over pairwise disjoint label sets; checked on construction."""

    tasks: tuple[ContinualTask, ...]
    n_classes: int

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("schedule needs at least one task")
        seen: set[int] = set()
        for t, task in enumerate(self.tasks):
            labels = set(task.labels)
            if len(labels) != len(task.labels) or not labels:
                raise ValueError(f"task {t} has empty or repeated labels")
            if seen & labels:
                raise ValueError(f"task {t} reuses labels {sorted(seen & labels)}")
            if min(labels) < 0 or max(labels) >= self.n_classes:
                raise ValueError(f"task {t} has labels outside [0, {self.n_classes})")
            if task.rounds < 1:
                raise ValueError(f"task {t} needs a positive round budget")
            seen |= labels

    @classmethod
    def even_split(cls, n_classes: int, num_tasks: int, rounds_per_task: int) -> "ContinualSchedule":
        chunks = np.array_split(np.arange(n_classes), num_tasks)
        return cls(tuple(ContinualTask(tuple(int(c) for c in ch), rounds_per_task) for ch in chunks), n_classes)


@dataclass(frozen=True)
class DriftState:
    reference: np.ndarray
    threshold: float

    def __post_init__(self):
        ref = np.asarray(self.reference, dtype=np.float64)
        if abs(ref.sum() - 1.0) > 1e-9 or np.any(ref < 0):
            raise ValueError("reference histogram must be normalized")
        if not 0.0 < self.threshold <= math.log(2):
            raise ValueError("threshold must lie in (0, ln 2]")
        object.__setattr__(self, "reference", ref)


def detect_drift(state: DriftState, current) -> tuple[bool, float]:
    """Flag drift when JS(reference, current) exceeds the threshold."""
    js = js_divergence(state.reference, current)
    return js > state.threshold, js
