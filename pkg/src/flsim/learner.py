"""Built-in models with hand-written backward passes, SGD, and client-side training loops.

Parameters are stored as float32 ``ParameterSet`` blocks named
``fc{i}.weight`` (out x in) and ``fc{i}.bias``.  All arithmetic runs in
float64 and results are rounded back to float32 for storage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import IncongruentError, OptimizerConfig, ParameterSet, congruence_check

__all__ = [
    "ModelSpec",
    "LocalObjective",
    "OptimizerState",
    "init_params",
    "forward",
    "predict_proba",
    "loss_and_grad",
    "sgd_step",
    "local_train",
    "evaluate",
    "split_model",
    "front_forward",
    "back_forward_backward",
    "front_backward",
    "split_forward_backward",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"FLCK"


def weight_name(i: int) -> str:
    return f"fc{i}.weight"


def bias_name(i: int) -> str:
    return f"fc{i}.bias"


@dataclass(frozen=True)
class ModelSpec:
    """Fully connected classifier: ``layer_widths`` runs from input width to class count."""

    kind: str
    layer_widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if any(w < 1 for w in widths):
            raise ValueError("layer widths must be positive")
        if self.kind == "linear_softmax":
            if len(widths) != 2:
                raise ValueError("linear_softmax maps input straight to classes")
        elif self.kind == "mlp":
            if len(widths) < 3:
                raise ValueError("mlp needs at least one hidden layer")
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if widths[-1] < 2:
            raise ValueError("need at least two classes")

    @classmethod
    def linear(cls, n_features: int, n_classes: int) -> "ModelSpec":
        return cls("linear_softmax", (n_features, n_classes))

    @classmethod
    def mlp(cls, n_features: int, hidden: Sequence[int], n_classes: int) -> "ModelSpec":
        return cls("mlp", (n_features, *hidden, n_classes))

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_features(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    def block_names(self, first: int = 0, last: int | None = None) -> list[str]:
        last = self.n_layers if last is None else last
        return [n for i in range(first, last) for n in (weight_name(i), bias_name(i))]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for i in range(self.n_layers):
            out[weight_name(i)] = (self.layer_widths[i + 1], self.layer_widths[i])
            out[bias_name(i)] = (self.layer_widths[i + 1],)
        return out


def init_params(spec: ModelSpec, seed: int) -> ParameterSet:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    blocks = []
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        blocks.append((weight_name(i), (fan_out, fan_in), rng.uniform(-limit, limit, size=fan_out * fan_in)))
        blocks.append((bias_name(i), (fan_out,), np.zeros(fan_out)))
    return ParameterSet(blocks)


@dataclass(frozen=True, eq=False)
class LocalObjective:
    loss: str = "cross_entropy"
    proximal_mu: float = 0.0
    anchor: ParameterSet | None = None

    def __post_init__(self):
        if self.loss not in ("cross_entropy", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.proximal_mu < 0:
            raise ValueError("proximal_mu must be nonnegative")
        if (self.anchor is not None) != (self.proximal_mu > 0):
            raise ValueError("anchor must be given exactly when proximal_mu > 0")


@dataclass(frozen=True, eq=False)
class OptimizerState:
    lr: float
    momentum: float
    weight_decay: float
    velocity: ParameterSet

    @classmethod
    def fresh(cls, config: OptimizerConfig, params: ParameterSet) -> "OptimizerState":
        return cls(config.lr, config.momentum, config.weight_decay, params.zeros_like())


# --------------------------------------------------------------------------- #
# numeric kernels on dicts of float64 arrays
# --------------------------------------------------------------------------- #


def _arrays(params: ParameterSet) -> dict[str, np.ndarray]:
    return params.to_arrays(np.float64)


def _check_params(spec: ModelSpec, params: ParameterSet, first: int = 0, last: int | None = None) -> None:
    shapes = spec.shapes()
    names = spec.block_names(first, last)
    if list(params.names) != names or any(params.shape(n) != shapes[n] for n in names):
        raise IncongruentError(f"{params!r} does not match model layers {first}..{last}")


def _layers_forward(spec: ModelSpec, arrays, h: np.ndarray, first: int, last: int):
    caches = []
    for i in range(first, last):
        z = h @ arrays[weight_name(i)].T + arrays[bias_name(i)]
        caches.append((h, z))
        h = np.maximum(z, 0.0) if i < spec.n_layers - 1 else z
    return h, caches


def _layers_backward(spec: ModelSpec, arrays, caches, dout: np.ndarray, first: int):
    """Backprop ``dout`` (gradient w.r.t. the last layer's activated output)."""
    grads = {}
    for offset in reversed(range(len(caches))):
        i = first + offset
        h_in, z = caches[offset]
        dz = dout * (z > 0) if i < spec.n_layers - 1 else dout
        grads[weight_name(i)] = dz.T @ h_in
        grads[bias_name(i)] = dz.sum(axis=0)
        dout = dz @ arrays[weight_name(i)]
    return grads, dout


def _output_loss(kind: str, out: np.ndarray, y: np.ndarray, n_classes: int):
    """Mean loss over the batch and its gradient w.r.t. ``out``."""
    b = out.shape[0]
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError("label out of range")
    if kind == "cross_entropy":
        shifted = out - out.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(lse - shifted[np.arange(b), y]))
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(b), y] -= 1.0
        return loss, probs / b
    onehot = np.zeros_like(out)
    onehot[np.arange(b), y] = 1.0
    diff = out - onehot
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def _proximal(objective: LocalObjective, arrays, names):
    if objective.proximal_mu == 0:
        return 0.0, {}
    mu = objective.proximal_mu
    anchor = objective.anchor
    loss = 0.0
    grads = {}
    for n in names:
        diff = arrays[n] - anchor[n].astype(np.float64)
        loss += 0.5 * mu * float(np.sum(diff**2))
        grads[n] = mu * diff
    return loss, grads


def _to_paramset(names, grads, shapes) -> ParameterSet:
    return ParameterSet((n, shapes[n], grads[n]) for n in names)


# --------------------------------------------------------------------------- #
# public operations
# --------------------------------------------------------------------------- #


def forward(spec: ModelSpec, params: ParameterSet, x: np.ndarray) -> np.ndarray:
    _check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_features:
        raise ValueError(f"expected (batch, {spec.n_features}) features, got {x.shape}")
    out, _ = _layers_forward(spec, _arrays(params), x, 0, spec.n_layers)
    return out


def predict_proba(spec: ModelSpec, params: ParameterSet, x: np.ndarray) -> np.ndarray:
    out = forward(spec, params, x)
    e = np.exp(out - out.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(objective: LocalObjective, spec: ModelSpec, params: ParameterSet,
                  x: np.ndarray, y: np.ndarray) -> tuple[float, ParameterSet]:
    """Mean batch loss plus ``mu/2 * ||w - anchor||^2`` and its gradient."""
    _check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty batch")
    if objective.anchor is not None and not congruence_check(objective.anchor, params):
        raise IncongruentError("proximal anchor is not congruent with params")
    arrays = _arrays(params)
    out, caches = _layers_forward(spec, arrays, x, 0, spec.n_layers)
    loss, dout = _output_loss(objective.loss, out, y, spec.n_classes)
    grads, _ = _layers_backward(spec, arrays, caches, dout, 0)
    prox_loss, prox_grads = _proximal(objective, arrays, params.names)
    for n, g in prox_grads.items():
        grads[n] = grads[n] + g
    return loss + prox_loss, _to_paramset(params.names, grads, spec.shapes())


def _sgd_update(p: np.ndarray, v: np.ndarray, g: np.ndarray, lr: float, momentum: float, wd: float):
    """One momentum-SGD update on float32 storage; returns new (p, v)."""
    p64 = p.astype(np.float64)
    step = g.astype(np.float64) + wd * p64
    v_new = (momentum * v.astype(np.float64) + step).astype(np.float32)
    p_new = (p64 - lr * v_new.astype(np.float64)).astype(np.float32)
    return p_new, v_new


def sgd_step(state: OptimizerState, params: ParameterSet, grad: ParameterSet) -> tuple[ParameterSet, OptimizerState]:
    """``v <- momentum*v + grad + wd*params``; ``params <- params - lr*v``.

    Returns the updated parameters and the optimizer state carrying the new velocity.
    """
    if not (congruence_check(params, grad) and congruence_check(params, state.velocity)):
        raise IncongruentError("params, grad and velocity must be congruent")
    new_p, new_v = [], []
    for name, shape, p in params.blocks():
        pn, vn = _sgd_update(p, state.velocity.flat(name), grad.flat(name),
                             state.lr, state.momentum, state.weight_decay)
        new_p.append((name, shape, pn))
        new_v.append((name, shape, vn))
    state = OptimizerState(state.lr, state.momentum, state.weight_decay, ParameterSet(new_v))
    return ParameterSet(new_p), state


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def local_train(spec: ModelSpec, params: ParameterSet, x: np.ndarray, y: np.ndarray,
                objective: LocalObjective, optimizer: OptimizerConfig, local_epoch: int,
                batch_size: int, seed: int) -> tuple[ParameterSet, int, float]:
    """Mini-batch SGD for ``local_epoch`` passes; the last partial batch is kept.

    Returns ``(params, num_samples, mean_loss)`` where the loss is the
    sample-weighted mean of the last epoch's pre-update batch losses (or one
    evaluation pass when ``local_epoch == 0``).
    """
    n = len(y)
    if n == 0:
        raise ValueError("cannot train on an empty partition")
    if local_epoch == 0:
        loss, _ = loss_and_grad(objective, spec, params, x, y)
        return params, n, loss
    rng = np.random.default_rng(seed)
    state = OptimizerState.fresh(optimizer, params)
    epoch_loss = 0.0
    for _ in range(local_epoch):
        total = 0.0
        for idx in _batches(n, batch_size, rng):
            loss, grad = loss_and_grad(objective, spec, params, x[idx], y[idx])
            params, state = sgd_step(state, params, grad)
            total += loss * len(idx)
        epoch_loss = total / n
    return params, n, epoch_loss


def evaluate(spec: ModelSpec, params: ParameterSet, x: np.ndarray, y: np.ndarray,
             loss: str = "cross_entropy") -> tuple[float, float]:
    """Argmax accuracy (ties go to the lowest class index) and mean loss."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot evaluate on empty data")
    out = forward(spec, params, x)
    mean_loss, _ = _output_loss(loss, out, y, spec.n_classes)
    accuracy = float(np.mean(np.argmax(out, axis=1) == y))
    return accuracy, mean_loss


# --------------------------------------------------------------------------- #
# split learning
# --------------------------------------------------------------------------- #


def split_model(spec: ModelSpec, params: ParameterSet, split_layer: int) -> tuple[ParameterSet, ParameterSet]:
    """Front = layers ``[0, split_layer)``, back = the rest."""
    if not 1 <= split_layer < spec.n_layers:
        raise ValueError(f"split_layer must be in [1, {spec.n_layers - 1}], got {split_layer}")
    _check_params(spec, params)
    front_names = spec.block_names(0, split_layer)
    return params.subset(front_names), params.without(front_names)


def _front_layers(spec: ModelSpec, front: ParameterSet) -> int:
    k = len(front) // 2
    if not 1 <= k < spec.n_layers:
        raise ValueError("front half must hold between 1 and n_layers - 1 layers")
    _check_params(spec, front, 0, k)
    return k


@dataclass(frozen=True, eq=False)
class FrontCache:
    split_layer: int
    caches: list
    activations: np.ndarray


def front_forward(spec: ModelSpec, front: ParameterSet, x: np.ndarray) -> FrontCache:
    """Client half: returns cut-layer activations plus what backward needs."""
    k = _front_layers(spec, front)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_features:
        raise ValueError(f"expected (batch, {spec.n_features}) features, got {x.shape}")
    act, caches = _layers_forward(spec, _arrays(front), x, 0, k)
    return FrontCache(k, caches, act)


def back_forward_backward(spec: ModelSpec, back: ParameterSet, activations: np.ndarray, y: np.ndarray,
                          objective: LocalObjective = LocalObjective()) -> tuple[float, ParameterSet, np.ndarray]:
    """Server half: loss, back-half gradient and gradient w.r.t. the activations."""
    k = spec.n_layers - len(back) // 2
    _check_params(spec, back, k, spec.n_layers)
    act = np.asarray(activations, dtype=np.float64)
    if act.ndim != 2 or act.shape[1] != spec.layer_widths[k]:
        raise ValueError(f"activations of width {act.shape[-1]} do not fit cut width {spec.layer_widths[k]}")
    arrays = _arrays(back)
    out, caches = _layers_forward(spec, arrays, act, k, spec.n_layers)
    loss, dout = _output_loss(objective.loss, out, np.asarray(y, dtype=np.int64), spec.n_classes)
    grads, dact = _layers_backward(spec, arrays, caches, dout, k)
    if objective.proximal_mu > 0:
        prox_obj = LocalObjective(objective.loss, objective.proximal_mu, objective.anchor.subset(back.names))
        prox_loss, prox = _proximal(prox_obj, arrays, back.names)
        loss += prox_loss
        for n, g in prox.items():
            grads[n] = grads[n] + g
    return loss, _to_paramset(back.names, grads, spec.shapes()), dact


def front_backward(spec: ModelSpec, front: ParameterSet, cache: FrontCache, act_grad: np.ndarray,
                   objective: LocalObjective = LocalObjective()) -> tuple[float, ParameterSet]:
    """Client half backward; returns (front proximal loss, front gradient)."""
    arrays = _arrays(front)
    act_grad = np.asarray(act_grad, dtype=np.float64)
    if act_grad.shape != cache.activations.shape:
        raise ValueError(f"activation gradient shape {act_grad.shape} != {cache.activations.shape}")
    grads, _ = _layers_backward(spec, arrays, cache.caches, act_grad, 0)
    prox_loss = 0.0
    if objective.proximal_mu > 0:
        prox_obj = LocalObjective(objective.loss, objective.proximal_mu, objective.anchor.subset(front.names))
        prox_loss, prox = _proximal(prox_obj, arrays, front.names)
        for n, g in prox.items():
            grads[n] = grads[n] + g
    return prox_loss, _to_paramset(front.names, grads, spec.shapes())


def split_forward_backward(spec: ModelSpec, front: ParameterSet, back: ParameterSet, x: np.ndarray,
                           y: np.ndarray, objective: LocalObjective = LocalObjective()
                           ) -> tuple[float, ParameterSet, ParameterSet, int]:
    """Run both halves across the cut; ``activation_bytes`` is the float32 size of the cut tensor."""
    cache = front_forward(spec, front, x)
    loss, grad_back, dact = back_forward_backward(spec, back, cache.activations, y, objective)
    prox_front, grad_front = front_backward(spec, front, cache, dact, objective)
    return loss + prox_front, grad_front, grad_back, int(cache.activations.size * 4)


def save_checkpoint(path, params: ParameterSet) -> None:
    """Magic, block directory, then raw little-endian float32 values."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + params.to_bytes())


def load_checkpoint(path) -> ParameterSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    params, end = ParameterSet.from_bytes(data, 4)
    if end != len(data):
        raise ValueError(f"{path} has trailing bytes")
    return params
