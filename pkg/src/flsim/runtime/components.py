"""Component registry and the built-in dataset and model builders."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..core import TaskConfig
from ..data import (
    Dataset,
    PartitionList,
    PartitionSpec,
    generate_blobs,
    mirror_partition,
    partition,
)
from ..learner import ModelSpec

__all__ = [
    "RegistryError",
    "FederatedData",
    "ComponentRegistry",
    "default_registry",
    "register_component",
    "register_dataset",
    "register_model",
    "register_client",
    "register_server",
    "build_blobs",
    "label_permutation",
]

KINDS = ("dataset", "model", "client", "server")


class RegistryError(LookupError):
    pass


@dataclass(eq=False)
class FederatedData:
    """Everything a task needs on the data side, already split across clients."""

    train: Dataset
    test: Dataset
    spec: PartitionSpec
    partitions: PartitionList
    client_train: list[Dataset]
    client_test: list[Dataset]
    server_train: Dataset | None = None
    client_groups: list[int] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.client_train)


def label_permutation(n_classes: int, group: int, seed: int) -> np.ndarray:
    """Fixed label relabelling for planted client population ``group`` (identity for 0)."""
    if group == 0:
        return np.arange(n_classes)
    rng = np.random.default_rng([seed, 7919, group])
    while True:
        perm = rng.permutation(n_classes)
        if np.all(perm != np.arange(n_classes)):
            return perm


def _stratified_take(labels: np.ndarray, n_classes: int, fraction: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 104729])
    picked = []
    for c in range(n_classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        picked.append(members[: max(1, int(round(fraction * len(members))))])
    return np.sort(np.concatenate(picked))


def build_blobs(config: TaskConfig, n_domains: int | None = None) -> FederatedData:
    """Built-in synthetic dataset: Gaussian blobs split according to ``config.data``.

    For the ``semi_server`` workflow a stratified ``server_labeled_fraction``
    of the training set is held by the server and only the rest is
    partitioned.  With ``label_groups > 1`` client ``i`` belongs to population
    ``i % label_groups`` whose labels are permuted by a fixed relabelling.
    """
    d = config.data
    train, test = generate_blobs(
        d.n_classes, d.n_per_class, d.n_features, n_domains or d.n_domains, d.seed,
        n_test_per_class=d.n_test_per_class, class_sep=d.class_sep, noise=d.noise,
    )
    server_train = None
    pool = train
    if config.workflow == "semi_server":
        labeled = _stratified_take(train.labels, train.n_classes, d.server_labeled_fraction, d.seed)
        rest = np.setdiff1d(np.arange(len(train)), labeled)
        server_train = train.subset(labeled)
        pool = train.subset(rest)
    spec = PartitionSpec.from_config(d)
    parts = partition(pool, spec)
    test_parts = mirror_partition(parts, pool, test, seed=d.seed + 1)
    client_train = [pool.subset(p.sample_indices) for p in parts]
    client_test = [test.subset(p.sample_indices) for p in test_parts]
    groups = [cid % d.label_groups for cid in range(len(parts))]
    if d.label_groups > 1:
        for cid, g in enumerate(groups):
            perm = label_permutation(d.n_classes, g, d.seed)
            client_train[cid] = client_train[cid].with_labels(perm[client_train[cid].labels])
            client_test[cid] = client_test[cid].with_labels(perm[client_test[cid].labels])
    return FederatedData(pool, test, spec, parts, client_train, client_test, server_train, groups)


def _build_domainnet_analog(config: TaskConfig) -> FederatedData:
    # six feature-shifted domains, as a desk-scale multi-domain stand-in
    return build_blobs(config, n_domains=max(6, config.data.n_domains))


def _build_mlp(config: TaskConfig, n_features: int, n_classes: int) -> ModelSpec:
    return ModelSpec.mlp(n_features, config.model.hidden, n_classes)


def _build_linear(config: TaskConfig, n_features: int, n_classes: int) -> ModelSpec:
    return ModelSpec.linear(n_features, n_classes)


class ComponentRegistry:
    """Name -> implementation tables for datasets, models, clients and servers.

    Dataset builders take a TaskConfig and return FederatedData; model
    builders take ``(config, n_features, n_classes)`` and return a ModelSpec;
    clients and servers are subclasses of the runtime's Client and Server.
    """

    def __init__(self):
        self._tables: dict[str, dict[str, Any]] = {k: {} for k in KINDS}
        self._verified: set[tuple[str, str]] = set()

    def register(self, kind: str, name: str, implementation: Any) -> None:
        if kind not in self._tables:
            raise RegistryError(f"unknown component kind {kind!r}; expected one of {KINDS}")
        if name in self._tables[kind]:
            raise RegistryError(f"{kind} {name!r} is already registered")
        self._tables[kind][name] = implementation

    def names(self, kind: str) -> list[str]:
        return sorted(self._tables[kind])

    def resolve(self, kind: str, name: str) -> Any:
        try:
            return self._tables[kind][name]
        except KeyError:
            raise RegistryError(f"no {kind} registered under {name!r}") from None

    def build_data(self, config: TaskConfig) -> FederatedData:
        builder = self.resolve("dataset", config.data.dataset)
        fed = builder(config)
        self._verify("dataset", config.data.dataset, isinstance(fed, FederatedData),
                     f"returned {type(fed).__name__}, not FederatedData")
        return fed

    def build_model(self, config: TaskConfig, n_features: int, n_classes: int) -> ModelSpec:
        spec = self.resolve("model", config.model.name)(config, n_features, n_classes)
        self._verify("model", config.model.name, isinstance(spec, ModelSpec),
                     f"returned {type(spec).__name__}, not ModelSpec")
        return spec

    def client_class(self, config: TaskConfig):
        from .client import Client

        cls = self.resolve("client", config.client.implementation)
        self._verify("client", config.client.implementation,
                     isinstance(cls, type) and issubclass(cls, Client), "is not a Client subclass")
        return cls

    def server_class(self, config: TaskConfig):
        from .server import Server

        cls = self.resolve("server", config.server.implementation)
        self._verify("server", config.server.implementation,
                     isinstance(cls, type) and issubclass(cls, Server), "is not a Server subclass")
        return cls

    def _verify(self, kind: str, name: str, ok: bool, problem: str) -> None:
        if (kind, name) in self._verified:
            return
        if not ok:
            raise RegistryError(f"{kind} {name!r} violates its contract: {problem}")
        self._verified.add((kind, name))


def _with_builtins(registry: ComponentRegistry) -> ComponentRegistry:
    from .client import Client
    from .server import Server

    registry.register("dataset", "blobs", build_blobs)
    registry.register("dataset", "domainnet-analog", _build_domainnet_analog)
    registry.register("model", "mlp", _build_mlp)
    registry.register("model", "linear_softmax", _build_linear)
    registry.register("client", "default", Client)
    registry.register("server", "default", Server)
    return registry


_DEFAULT: ComponentRegistry | None = None


def default_registry() -> ComponentRegistry:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = _with_builtins(ComponentRegistry())
    return _DEFAULT


def fresh_registry() -> ComponentRegistry:
    """A registry holding only the built-ins (handy for isolated tests)."""
    return _with_builtins(ComponentRegistry())


def register_component(kind: str, name: str, implementation: Any,
                       registry: ComponentRegistry | None = None) -> None:
    (registry or default_registry()).register(kind, name, implementation)


def register_dataset(name: str, builder: Callable[[TaskConfig], FederatedData], registry=None) -> None:
    register_component("dataset", name, builder, registry)


def register_model(name: str, builder: Callable[..., ModelSpec], registry=None) -> None:
    register_component("model", name, builder, registry)


def register_client(name: str, cls, registry=None) -> None:
    register_component("client", name, cls, registry)


def register_server(name: str, cls, registry=None) -> None:
    register_component("server", name, cls, registry)

