"""Shared domain types: parameter blocks, task configuration, round messages."""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "ConfigError",
    "ConfigSyntaxError",
    "IncongruentError",
    "ParameterSet",
    "congruence_check",
    "linear_combine",
    "DataConfig",
    "ServerConfig",
    "OptimizerConfig",
    "ClientConfig",
    "ModelConfig",
    "ContinualConfig",
    "TaskConfig",
    "parse_config",
    "serialize_config",
    "load_config",
    "RoundPlan",
    "UploadEnvelope",
    "MetricRecord",
]


class ConfigError(ValueError):
    """A configuration document violates a TaskConfig invariant."""

    def __init__(self, invariant: str, message: str):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant


class ConfigSyntaxError(ConfigError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        super().__init__("syntax", message)
        self.line = line
        self.column = column


class IncongruentError(ValueError):
    """Parameter sets disagree on block names, order or shapes."""


# --------------------------------------------------------------------------- #
# ParameterSet
# --------------------------------------------------------------------------- #

_BLOCK_DIR = struct.Struct("<I")


class ParameterSet:
    """Ordered, immutable collection of named float32 parameter blocks.

    Each block is stored flat together with its shape.  Instances never change
    after construction, so they can be shared between threads and clients
    without copying.
    """

    __slots__ = ("_names", "_shapes", "_values", "_index")

    def __init__(self, blocks: Iterable[tuple[str, Sequence[int], Any]] = ()):
        names: list[str] = []
        shapes: list[tuple[int, ...]] = []
        values: list[np.ndarray] = []
        for name, shape, vals in blocks:
            shape = tuple(int(s) for s in shape)
            if any(s < 0 for s in shape):
                raise ValueError(f"block {name!r}: negative dimension in {shape}")
            flat = np.array(vals, dtype=np.float32).reshape(-1)
            if flat.size != math.prod(shape):
                raise ValueError(
                    f"block {name!r}: shape {shape} needs {math.prod(shape)} values, got {flat.size}"
                )
            if not np.all(np.isfinite(flat)):
                raise ValueError(f"block {name!r}: non-finite values")
            flat.flags.writeable = False
            names.append(str(name))
            shapes.append(shape)
            values.append(flat)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate block names in {names}")
        self._names = tuple(names)
        self._shapes = tuple(shapes)
        self._values = tuple(values)
        self._index = {n: i for i, n in enumerate(names)}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParameterSet":
        return cls((name, np.shape(a), a) for name, a in arrays.items())

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return self._shapes

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def blocks(self) -> Iterator[tuple[str, tuple[int, ...], np.ndarray]]:
        return zip(self._names, self._shapes, self._values)

    def flat(self, name: str) -> np.ndarray:
        return self._values[self._index[name]]

    def __getitem__(self, name: str) -> np.ndarray:
        """Read-only view of block ``name`` in its declared shape."""
        i = self._index[name]
        return self._values[i].reshape(self._shapes[i])

    def shape(self, name: str) -> tuple[int, ...]:
        return self._shapes[self._index[name]]

    def to_arrays(self, dtype=np.float32) -> dict[str, np.ndarray]:
        """Writable copies of every block, reshaped."""
        return {n: np.array(v, dtype=dtype).reshape(s) for n, s, v in self.blocks()}

    def subset(self, names: Iterable[str]) -> "ParameterSet":
        """Blocks named in ``names``, kept in this set's order."""
        wanted = set(names)
        missing = wanted - set(self._names)
        if missing:
            raise KeyError(f"unknown blocks: {sorted(missing)}")
        return ParameterSet((n, s, v) for n, s, v in self.blocks() if n in wanted)

    def without(self, names: Iterable[str]) -> "ParameterSet":
        drop = set(names)
        return ParameterSet((n, s, v) for n, s, v in self.blocks() if n not in drop)

    def replace(self, other: "ParameterSet") -> "ParameterSet":
        """Copy of self with blocks present in ``other`` swapped in (shapes must agree)."""
        for name, shape, _ in other.blocks():
            if name not in self._index:
                raise IncongruentError(f"block {name!r} not in target set")
            if self.shape(name) != shape:
                raise IncongruentError(f"block {name!r}: shape {shape} != {self.shape(name)}")
        return ParameterSet(
            (n, s, other.flat(n) if n in other else v) for n, s, v in self.blocks()
        )

    def concat(self, other: "ParameterSet") -> "ParameterSet":
        return ParameterSet(list(self.blocks()) + list(other.blocks()))

    def zeros_like(self, fill: float = 0.0) -> "ParameterSet":
        return ParameterSet((n, s, np.full(v.size, fill, dtype=np.float32)) for n, s, v in self.blocks())

    @property
    def num_values(self) -> int:
        return sum(v.size for v in self._values)

    @property
    def nbytes(self) -> int:
        return 4 * self.num_values

    def vector(self) -> np.ndarray:
        """All values concatenated in block order (float64 copy)."""
        if not self._values:
            return np.zeros(0)
        return np.concatenate(self._values).astype(np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return congruence_check(self, other) and all(
            a.tobytes() == b.tobytes() for a, b in zip(self._values, other._values)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}{list(s)}" for n, s in zip(self._names, self._shapes))
        return f"ParameterSet({inner})"

    # -- binary form: block directory followed by little-endian float32 data --

    def to_bytes(self) -> bytes:
        head = [_BLOCK_DIR.pack(len(self._names))]
        for name, shape in zip(self._names, self._shapes):
            raw = name.encode("utf-8")
            head.append(struct.pack("<H", len(raw)) + raw)
            head.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}Q", *shape))
        body = b"".join(v.astype("<f4").tobytes() for v in self._values)
        return b"".join(head) + body

    @classmethod
    def from_bytes(cls, data: bytes | memoryview, offset: int = 0) -> tuple["ParameterSet", int]:
        """Decode a set starting at ``offset``; returns (set, offset after it)."""
        buf = memoryview(data)
        try:
            (count,) = _BLOCK_DIR.unpack_from(buf, offset)
            offset += _BLOCK_DIR.size
            directory = []
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", buf, offset)
                offset += 2
                name = bytes(buf[offset:offset + nlen]).decode("utf-8")
                offset += nlen
                (ndim,) = struct.unpack_from("<B", buf, offset)
                offset += 1
                shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
                offset += 8 * ndim
                directory.append((name, shape))
            blocks = []
            for name, shape in directory:
                n = math.prod(shape)
                if offset + 4 * n > len(buf):
                    raise ValueError("truncated parameter data")
                vals = np.frombuffer(buf, dtype="<f4", count=n, offset=offset)
                offset += 4 * n
                blocks.append((name, shape, vals))
        except struct.error as exc:
            raise ValueError(f"truncated parameter directory: {exc}") from exc
        return cls(blocks), offset


def congruence_check(a: ParameterSet, b: ParameterSet) -> bool:
    """True iff both sets have the same block names, in the same order, with the same shapes."""
    return a.names == b.names and a.shapes == b.shapes


def linear_combine(terms: Sequence[tuple[float, ParameterSet]]) -> ParameterSet:
    """Element-wise ``sum(coef * p)``.

    Accumulates in float64 in the order given and rounds to float32 once, so a
    convex combination of identical inputs reproduces them exactly.
    """
    if not terms:
        raise ValueError("linear_combine needs at least one term")
    first = terms[0][1]
    for _, p in terms[1:]:
        if not congruence_check(first, p):
            raise IncongruentError(f"{p!r} is not congruent with {first!r}")
    out = []
    for name, shape, _ in first.blocks():
        acc = np.zeros(math.prod(shape), dtype=np.float64)
        for coef, p in terms:
            acc += float(coef) * p.flat(name).astype(np.float64)
        out.append((name, shape, acc))
    return ParameterSet(out)


# --------------------------------------------------------------------------- #
# TaskConfig
# --------------------------------------------------------------------------- #

SPLIT_TYPES = ("iid", "dir", "shard", "hdir")
AGGREGATORS = ("fedavg", "fedyogi")
EXCHANGES = ("full", "partial")
WORKFLOWS = ("standard", "semi_server", "continual", "split", "clustered")
TEST_MODES = ("test_in_client", "test_in_server")


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "blobs"
    split_type: str = "iid"
    num_of_clients: int = 10
    alpha: float = 0.5
    shards_per_client: int = 2
    main_attribute: str = "label"
    seed: int = 0
    n_classes: int = 10
    n_per_class: int = 100
    n_test_per_class: int = 50
    n_features: int = 8
    n_domains: int = 1
    class_sep: float = 3.0
    noise: float = 1.0
    label_groups: int = 1
    server_labeled_fraction: float = 0.1


@dataclass(frozen=True)
class ServerConfig:
    rounds: int = 20
    clients_per_round: int = 10
    aggregator: str = "fedavg"
    test_every: int = 1
    server_lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    deadline: float = 0.0
    pseudo_threshold: float = 0.95
    warmup_epochs: int = 5
    finetune_epochs: int = 1
    implementation: str = "default"


@dataclass(frozen=True)
class OptimizerConfig:
    type: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005


@dataclass(frozen=True)
class ClientConfig:
    local_epoch: int = 5
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    proximal_mu: float = 0.0
    finetune_epochs: int = 0
    implementation: str = "default"


@dataclass(frozen=True)
class ModelConfig:
    name: str = "mlp"
    hidden: tuple[int, ...] = (32,)
    exchange: str = "full"
    partial_blocks: tuple[str, ...] = ()
    split_layer: int | None = None
    loss: str = "cross_entropy"


@dataclass(frozen=True)
class ContinualConfig:
    num_tasks: int = 2
    rounds_per_task: int = 10
    replay_fraction: float = 0.0
    drift_threshold: float = 0.1


@dataclass(frozen=True)
class TaskConfig:
    """Complete experiment description.  Validated on construction."""

    data: DataConfig = field(default_factory=DataConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    continual: ContinualConfig = field(default_factory=ContinualConfig)
    workflow: str = "standard"
    num_clusters: int = 2
    test_mode: str = "test_in_server"
    task_id: str = "task"

    def __post_init__(self):
        _validate(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections: Mapping[str, Any] | Any) -> "TaskConfig":
        """Return a copy with overrides; dict values update the named section."""
        doc = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, Mapping) and isinstance(doc.get(key), dict):
                merged = dict(doc[key])
                for k, v in value.items():
                    if isinstance(v, Mapping) and isinstance(merged.get(k), dict):
                        merged[k] = {**merged[k], **v}
                    else:
                        merged[k] = v
                doc[key] = merged
            else:
                doc[key] = value
        return from_dict(doc)


def _check(cond: bool, invariant: str, message: str) -> None:
    if not cond:
        raise ConfigError(invariant, message)


def _validate(c: TaskConfig) -> None:
    d, s, cl, m = c.data, c.server, c.client, c.model
    _check(d.split_type in SPLIT_TYPES, "data.split_type", f"{d.split_type!r} not in {SPLIT_TYPES}")
    _check(d.num_of_clients >= 1, "data.num_of_clients", "must be >= 1")
    _check(d.alpha > 0 and math.isfinite(d.alpha), "data.alpha", "must be a positive real")
    _check(d.shards_per_client >= 1, "data.shards_per_client", "must be a positive integer")
    _check(d.n_classes >= 2, "data.n_classes", "need at least two classes")
    _check(d.n_per_class >= 1 and d.n_test_per_class >= 1, "data.n_per_class", "counts must be positive")
    _check(d.n_features >= 1 and d.n_domains >= 1, "data.n_features", "dimensions must be positive")
    _check(d.label_groups >= 1, "data.label_groups", "must be >= 1")
    _check(0.0 < d.server_labeled_fraction < 1.0, "data.server_labeled_fraction", "must lie in (0, 1)")
    _check(s.rounds >= 1, "server.rounds", "rounds must be >= 1")
    _check(1 <= s.clients_per_round <= d.num_of_clients, "server.clients_per_round",
           f"clients_per_round={s.clients_per_round} must be in [1, num_of_clients={d.num_of_clients}]")
    _check(s.aggregator in AGGREGATORS, "server.aggregator", f"{s.aggregator!r} not in {AGGREGATORS}")
    _check(s.test_every >= 1, "server.test_every", "must be >= 1")
    _check(s.tau > 0 and s.server_lr > 0, "server.tau", "tau and server_lr must be positive")
    _check(0 <= s.beta1 < 1 and 0 <= s.beta2 < 1, "server.beta", "betas must lie in [0, 1)")
    _check(s.deadline >= 0, "server.deadline", "must be >= 0 (0 = unlimited)")
    _check(0.0 <= s.pseudo_threshold <= 1.0, "server.pseudo_threshold", "must lie in [0, 1]")
    _check(s.warmup_epochs >= 0 and s.finetune_epochs >= 0, "server.warmup_epochs", "must be >= 0")
    _check(cl.local_epoch >= 1, "client.local_epoch", "local_epoch must be >= 1")
    _check(cl.batch_size >= 1, "client.batch_size", "must be >= 1")
    _check(cl.optimizer.type.lower() == "sgd", "client.optimizer.type", "only SGD is built in")
    _check(cl.optimizer.lr >= 0 and cl.optimizer.momentum >= 0 and cl.optimizer.weight_decay >= 0,
           "client.optimizer", "lr, momentum and weight_decay must be nonnegative")
    _check(cl.proximal_mu >= 0, "client.proximal_mu", "must be nonnegative")
    _check(cl.finetune_epochs >= 0, "client.finetune_epochs", "must be >= 0")
    _check(m.exchange in EXCHANGES, "model.exchange", f"{m.exchange!r} not in {EXCHANGES}")
    _check(bool(m.partial_blocks) == (m.exchange == "partial"), "model.partial_blocks",
           "partial_blocks must be nonempty iff exchange = partial")
    _check((m.split_layer is not None) == (c.workflow == "split"), "model.split_layer",
           "split_layer must be set iff workflow = split")
    _check(m.split_layer is None or m.split_layer >= 1, "model.split_layer", "must be >= 1")
    _check(all(h >= 1 for h in m.hidden), "model.hidden", "hidden widths must be positive")
    _check(m.loss in ("cross_entropy", "mse"), "model.loss", "must be cross_entropy or mse")
    _check(c.workflow in WORKFLOWS, "workflow", f"{c.workflow!r} not in {WORKFLOWS}")
    _check(c.num_clusters >= 1, "num_clusters", "must be >= 1")
    _check(c.test_mode in TEST_MODES, "test_mode", f"{c.test_mode!r} not in {TEST_MODES}")
    ct = c.continual
    _check(ct.num_tasks >= 1 and ct.rounds_per_task >= 1, "continual.num_tasks", "must be >= 1")
    _check(ct.num_tasks <= d.n_classes, "continual.num_tasks", "more tasks than classes")
    _check(0.0 <= ct.replay_fraction <= 1.0, "continual.replay_fraction", "must lie in [0, 1]")
    _check(0.0 < ct.drift_threshold <= math.log(2), "continual.drift_threshold", "must lie in (0, ln 2]")


_SECTIONS = {
    "data": DataConfig,
    "server": ServerConfig,
    "client": ClientConfig,
    "model": ModelConfig,
    "continual": ContinualConfig,
}
_NESTED = {("client", "optimizer"): OptimizerConfig}
_TOP_SCALARS = {"workflow": str, "num_clusters": int, "test_mode": str, "task_id": str}


def _coerce(value: Any, annotation: Any, where: str) -> Any:
    ann = str(annotation)
    if ann in ("int",):
        ok = isinstance(value, int) and not isinstance(value, bool)
        _check(ok, where, f"expected integer, got {value!r}")
        return value
    if ann == "float":
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        _check(ok, where, f"expected number, got {value!r}")
        return float(value)
    if ann == "str":
        _check(isinstance(value, str), where, f"expected string, got {value!r}")
        return value
    if ann == "int | None":
        _check(value is None or (isinstance(value, int) and not isinstance(value, bool)),
               where, f"expected integer, got {value!r}")
        return value
    if ann.startswith("tuple[int"):
        ok = isinstance(value, (list, tuple)) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        _check(ok, where, f"expected list of integers, got {value!r}")
        return tuple(value)
    if ann.startswith("tuple[str"):
        ok = isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value)
        _check(ok, where, f"expected list of strings, got {value!r}")
        return tuple(value)
    raise TypeError(f"unhandled annotation {ann}")  # pragma: no cover


def _build_section(cls, doc: Mapping[str, Any], prefix: str, path: tuple[str, ...]):
    fields_ = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        where = f"{prefix}.{key}"
        _check(key in fields_, where, "unknown key")
        nested = _NESTED.get(path + (key,))
        if nested is not None:
            _check(isinstance(value, Mapping), where, "expected a table")
            kwargs[key] = _build_section(nested, value, where, path + (key,))
        else:
            kwargs[key] = _coerce(value, fields_[key].type, where)
    return cls(**kwargs)


def from_dict(doc: Mapping[str, Any]) -> TaskConfig:
    """Build a TaskConfig from a nested mapping, rejecting unknown keys."""
    kwargs: dict[str, Any] = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            if key == "model" and isinstance(value, str):
                value = {"name": value}
            _check(isinstance(value, Mapping), key, "expected a table")
            kwargs[key] = _build_section(_SECTIONS[key], value, key, (key,))
        elif key in _TOP_SCALARS:
            kwargs[key] = _coerce(value, _TOP_SCALARS[key].__name__, key)
        else:
            raise ConfigError(key, "unknown key")
    return TaskConfig(**kwargs)


def parse_config(source: str) -> TaskConfig:
    """Parse a TOML configuration document; missing keys take their defaults."""
    try:
        doc = tomllib.loads(source)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigSyntaxError(str(exc), getattr(exc, "lineno", None), getattr(exc, "colno", None)) from exc
    return from_dict(doc)


def load_config(path) -> TaskConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def serialize_config(config: TaskConfig) -> str:
    """TOML text for ``config``; ``parse_config`` of the result gives ``config`` back."""
    doc = _strip_none(config.to_dict())
    top = {k: doc.pop(k) for k in list(doc) if k in _TOP_SCALARS}
    return tomli_w.dumps({**top, **doc})


# --------------------------------------------------------------------------- #
# Round messages
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class RoundPlan:
    round_index: int
    selected_client_ids: tuple[int, ...]
    global_parameters: tuple[ParameterSet, ...]
    task_directives: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.selected_client_ids)) != len(self.selected_client_ids):
            raise ValueError("selected client ids must be distinct")


@dataclass(frozen=True)
class MetricRecord:
    task_id: str
    round_index: int
    scope: str
    name: str
    value: float
    wall_time: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"metric {self.name} has non-finite value {self.value}")


@dataclass(frozen=True)
class UploadEnvelope:
    client_id: int
    round_index: int
    parameters: ParameterSet
    num_samples: int
    train_loss: float
    metrics: tuple[MetricRecord, ...] = ()
    cluster_id: int | None = None

    def __post_init__(self):
        if self.num_samples < 0:
            raise ValueError("num_samples must be nonnegative")

    @property
    def skipped(self) -> bool:
        """A zero-sample upload is a skip notice and never aggregated."""
        return self.num_samples == 0
