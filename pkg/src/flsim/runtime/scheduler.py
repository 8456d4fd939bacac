"""FIFO task scheduler: one running task per engine."""

from __future__ import annotations

import itertools
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any

from ..core import TaskConfig, parse_config
from .server import RunReport, run_task

__all__ = ["TaskQueueEntry", "TaskScheduler"]


@dataclass
class TaskQueueEntry:
    task_id: str
    config: TaskConfig
    status: str = "queued"
    submitted_at: float = field(default_factory=time.time)
    report: RunReport | None = None
    error: str | None = None


class TaskScheduler:
    """Tasks run strictly one after another in submission order."""

    def __init__(self, **run_kwargs: Any):
        self.entries: dict[str, TaskQueueEntry] = {}
        self._queue: deque[str] = deque()
        self._ids = itertools.count(1)
        self._run_kwargs = run_kwargs

    def submit_task(self, config: TaskConfig | str) -> str:
        """Queue a task.  Text is parsed first; invalid configs raise and are never queued."""
        if isinstance(config, str):
            config = parse_config(config)
        if not isinstance(config, TaskConfig):
            raise TypeError("config must be a TaskConfig or configuration text")
        task_id = f"{config.task_id}-{next(self._ids)}"
        self.entries[task_id] = TaskQueueEntry(task_id, config.replace(task_id=task_id))
        self._queue.append(task_id)
        return task_id

    @property
    def running(self) -> list[str]:
        return [t for t, e in self.entries.items() if e.status == "running"]

    def run_next(self) -> TaskQueueEntry | None:
        if not self._queue:
            return None
        entry = self.entries[self._queue.popleft()]
        entry.status = "running"
        try:
            entry.report = run_task(entry.config, **self._run_kwargs)
            entry.status = "finished"
        except Exception as exc:
            entry.status = "failed"
            entry.error = f"{type(exc).__name__}: {exc}"
        return entry

    def run_all(self) -> list[TaskQueueEntry]:
        done = []
        while (entry := self.run_next()) is not None:
            done.append(entry)
        return done
