"""Server-side aggregation: FedAvg, FedYogi, partial-model merge and clustered models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import IncongruentError, ParameterSet, UploadEnvelope, congruence_check, linear_combine

__all__ = [
    "AggregationError",
    "AggregatorState",
    "ClusterBook",
    "fedavg",
    "fedyogi_step",
    "merge_partial",
    "assign_cluster",
    "aggregate_clusters",
    "Aggregator",
]


class AggregationError(ValueError):
    pass


def _ordered(uploads: Iterable[UploadEnvelope]) -> list[UploadEnvelope]:
    # fixed summation order regardless of arrival order
    return sorted(uploads, key=lambda u: u.client_id)


def fedavg(uploads: Sequence[UploadEnvelope]) -> ParameterSet:
    """Sample-count weighted mean of the uploaded parameters."""
    ups = _ordered(uploads)
    if not ups:
        raise AggregationError("no uploads to aggregate")
    total = sum(u.num_samples for u in ups)
    if total <= 0:
        raise AggregationError("uploads carry zero samples in total")
    first = ups[0].parameters
    for u in ups[1:]:
        if not congruence_check(first, u.parameters):
            raise IncongruentError(f"upload from client {u.client_id} is not congruent")
    return linear_combine([(u.num_samples / total, u.parameters) for u in ups])


@dataclass(frozen=True, eq=False)
class AggregatorState:
    kind: str
    server_lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    first_moment: ParameterSet | None = None
    second_moment: ParameterSet | None = None

    @classmethod
    def init(cls, kind: str, global_params: ParameterSet, server_lr: float = 1.0,
             beta1: float = 0.9, beta2: float = 0.99, tau: float = 1e-3) -> "AggregatorState":
        """``m = 0`` and ``v = tau**2`` element-wise (FedYogi); FedAvg keeps no moments."""
        if kind == "fedavg":
            return cls(kind, server_lr, beta1, beta2, tau)
        if kind != "fedyogi":
            raise ValueError(f"unknown aggregator {kind!r}")
        return cls(kind, server_lr, beta1, beta2, tau,
                   global_params.zeros_like(), global_params.zeros_like(tau * tau))


def fedyogi_step(state: AggregatorState, global_params: ParameterSet,
                 uploads: Sequence[UploadEnvelope]) -> tuple[ParameterSet, AggregatorState]:
    """Adaptive server step on the pseudo-gradient ``fedavg(uploads) - global``."""
    avg = fedavg(uploads)
    if not (congruence_check(avg, global_params) and congruence_check(global_params, state.first_moment)):
        raise IncongruentError("uploads, global model and moments must be congruent")
    b1, b2, tau, lr = state.beta1, state.beta2, state.tau, state.server_lr
    new_g, new_m, new_v = [], [], []
    for name, shape, w in global_params.blocks():
        w64 = w.astype(np.float64)
        delta = avg.flat(name).astype(np.float64) - w64
        m = b1 * state.first_moment.flat(name).astype(np.float64) + (1.0 - b1) * delta
        v = state.second_moment.flat(name).astype(np.float64)
        d2 = delta * delta
        v = v - (1.0 - b2) * d2 * np.sign(v - d2)
        new_g.append((name, shape, w64 + lr * m / (np.sqrt(v) + tau)))
        new_m.append((name, shape, m))
        new_v.append((name, shape, v))
    state = AggregatorState(state.kind, lr, b1, b2, tau, ParameterSet(new_m), ParameterSet(new_v))
    return ParameterSet(new_g), state


def merge_partial(global_params: ParameterSet, uploads: Sequence[UploadEnvelope],
                  partial_blocks: Sequence[str]) -> ParameterSet:
    """FedAvg over the listed blocks only; every other global block is passed through untouched."""
    listed = set(partial_blocks)
    if not listed:
        raise AggregationError("partial_blocks must be nonempty")
    for u in uploads:
        if set(u.parameters.names) != listed:
            extra = sorted(set(u.parameters.names) - listed)
            raise AggregationError(
                f"client {u.client_id} uploaded blocks {list(u.parameters.names)}"
                + (f" including non-listed {extra}" if extra else "")
            )
    return global_params.replace(fedavg(uploads))


def assign_cluster(losses: Sequence[float]) -> int:
    """Index of the smallest loss; ties go to the lowest cluster id."""
    if len(losses) == 0:
        raise AggregationError("no cluster losses")
    if not all(math.isfinite(v) for v in losses):
        raise AggregationError(f"non-finite cluster loss in {list(losses)}")
    return int(np.argmin(np.asarray(losses, dtype=np.float64)))


@dataclass(frozen=True, eq=False)
class ClusterBook:
    models: tuple[ParameterSet, ...]
    assignment: dict[int, int] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.models)


def aggregate_clusters(book: ClusterBook, uploads: Sequence[UploadEnvelope]) -> ClusterBook:
    """Per-cluster FedAvg; clusters without uploads keep their parameters."""
    groups: dict[int, list[UploadEnvelope]] = {}
    for u in uploads:
        if u.cluster_id is None or not 0 <= u.cluster_id < book.k:
            raise AggregationError(f"client {u.client_id} has invalid cluster id {u.cluster_id}")
        groups.setdefault(u.cluster_id, []).append(u)
    models = tuple(fedavg(groups[c]) if c in groups else m for c, m in enumerate(book.models))
    assignment = dict(book.assignment)
    assignment.update({u.client_id: u.cluster_id for u in uploads})
    return ClusterBook(models, assignment)


class Aggregator:
    """Round-driver helper bundling the configured rule and its state."""

    def __init__(self, kind: str, global_params: ParameterSet, partial_blocks: Sequence[str] = (),
                 server_lr: float = 1.0, beta1: float = 0.9, beta2: float = 0.99, tau: float = 1e-3):
        self.partial_blocks = tuple(partial_blocks)
        exchanged = global_params.subset(self.partial_blocks) if self.partial_blocks else global_params
        self.state = AggregatorState.init(kind, exchanged, server_lr, beta1, beta2, tau)

    def __call__(self, global_params: ParameterSet, uploads: Sequence[UploadEnvelope]) -> ParameterSet:
        if self.state.kind == "fedavg":
            if self.partial_blocks:
                return merge_partial(global_params, uploads, self.partial_blocks)
            return fedavg(uploads)
        exchanged = global_params.subset(self.partial_blocks) if self.partial_blocks else global_params
        updated, self.state = fedyogi_step(self.state, exchanged, uploads)
        return global_params.replace(updated)
