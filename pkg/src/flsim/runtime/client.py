"""Client executor: answers server plans with uploads and evaluation results."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Any, Callable

import numpy as np

from ..aggregation import assign_cluster
from ..comms import Endpoint, Message, MessageKind, TransportClosed, encode_upload, pack_body, tensor_set, unpack_body
from ..core import MetricRecord, ParameterSet, TaskConfig, UploadEnvelope
from ..data import Dataset
from ..learner import (
    LocalObjective,
    ModelSpec,
    OptimizerState,
    evaluate,
    front_backward,
    front_forward,
    init_params,
    local_train,
    predict_proba,
    sgd_step,
)
from .continual import DriftState, detect_drift

__all__ = ["WorkflowHooks", "default_hooks", "Client", "derive_seed", "SIM_SECONDS_PER_SAMPLE"]

log = logging.getLogger(__name__)

# simulated compute cost used by the resource model (seconds per sample-epoch)
SIM_SECONDS_PER_SAMPLE = 1e-4


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def model_seed(config: TaskConfig) -> int:
    return derive_seed(config.data.seed, 0x5EED)


@dataclass
class WorkflowHooks:
    """Optional overrides for individual workflow steps; ``None`` means the default.

    Server-side hooks receive the Server, client-side hooks the Client:

    * ``on_round_start(server, round_index)``
    * ``aggregate(server, uploads) -> ParameterSet``
    * ``post_aggregate(server, round_index)``
    * ``client_train(client, params, directives) -> (params, num_samples, loss)``
    * ``client_test(client, params, directives) -> (accuracy, loss, num_samples)``
    * ``construct_upload(client, params, num_samples, loss, directives) -> UploadEnvelope``
    """

    on_round_start: Callable | None = None
    aggregate: Callable | None = None
    post_aggregate: Callable | None = None
    client_train: Callable | None = None
    client_test: Callable | None = None
    construct_upload: Callable | None = None

    def resolve(self, name: str, default: Callable) -> Callable:
        hook = getattr(self, name)
        return default if hook is None else hook


def default_hooks() -> WorkflowHooks:
    """Hooks explicitly bound to the default implementations."""
    from .server import Server

    return WorkflowHooks(
        on_round_start=Server.on_round_start,
        aggregate=Server.aggregate,
        post_aggregate=Server.post_aggregate,
        client_train=Client.train,
        client_test=Client.test,
        construct_upload=Client.construct_upload,
    )


class Client:
    """Holds one client's data and runs training/testing when the server asks.

    Subclass and override ``train``, ``test`` or ``construct_upload`` (then
    register the subclass) to customise behaviour per component; pass
    ``WorkflowHooks`` to swap single steps without subclassing.
    """

    def __init__(self, client_id: int, train: Dataset, test: Dataset | None, spec: ModelSpec,
                 config: TaskConfig, hooks: WorkflowHooks | None = None):
        self.client_id = client_id
        self.train_data = train
        self.test_data = test
        self.spec = spec
        self.config = config
        self.hooks = hooks or WorkflowHooks()
        self.local_model = init_params(spec, model_seed(config))
        self.task_id = config.task_id
        # continual-learning state
        self.drift_state: DriftState | None = None
        self.task_labels: tuple[int, ...] | None = None
        self.replay_indices = np.zeros(0, dtype=np.int64)
        self.endpoint: Endpoint | None = None

    # ------------------------------------------------------------------ helpers

    @property
    def exchanged_blocks(self) -> tuple[str, ...] | None:
        m = self.config.model
        return m.partial_blocks if m.exchange == "partial" else None

    def seed_for(self, round_index: int, salt: int = 0) -> int:
        return derive_seed(self.config.data.seed, round_index, self.client_id, salt)

    def objective(self, anchor: ParameterSet) -> LocalObjective:
        mu = self.config.client.proximal_mu
        return LocalObjective(self.config.model.loss, mu, anchor if mu > 0 else None)

    def _fit(self, params: ParameterSet, x, y, epochs: int, seed: int) -> tuple[ParameterSet, int, float]:
        c = self.config.client
        return local_train(self.spec, params, x, y, self.objective(params), c.optimizer, epochs, c.batch_size, seed)

    def training_arrays(self, directives: dict[str, Any]) -> tuple[np.ndarray, np.ndarray]:
        """Features and labels used for this round's training."""
        d = self.train_data
        labels = directives.get("task_labels")
        if labels is None:
            return d.features, d.labels
        mask = np.isin(d.labels, labels)
        idx = np.union1d(np.flatnonzero(mask), self.replay_indices)
        return d.features[idx], d.labels[idx]

    # ------------------------------------------------------ overridable steps

    def train(self, params: ParameterSet, directives: dict[str, Any]) -> tuple[ParameterSet, int, float]:
        x, y = self.training_arrays(directives)
        if len(y) == 0:
            return params, 0, 0.0
        return self._fit(params, x, y, self.config.client.local_epoch, self.seed_for(directives["round"]))

    def test(self, params: ParameterSet, directives: dict[str, Any]) -> tuple[float, float, int]:
        data = self.test_data
        if data is None or len(data) == 0:
            return 0.0, 0.0, 0
        labels = directives.get("eval_labels")
        if labels is not None:
            data = data.subset(np.flatnonzero(np.isin(data.labels, labels)))
            if len(data) == 0:
                return 0.0, 0.0, 0
        ft = self.config.client.finetune_epochs
        if ft > 0 and len(self.train_data):
            params, _, _ = self._fit(params, self.train_data.features, self.train_data.labels, ft,
                                     self.seed_for(directives["round"], salt=1))
        acc, loss = evaluate(self.spec, params, data.features, data.labels, self.config.model.loss)
        return acc, loss, len(data)

    def construct_upload(self, params: ParameterSet, num_samples: int, loss: float,
                         directives: dict[str, Any]) -> UploadEnvelope:
        round_index = directives["round"]
        blocks = self.exchanged_blocks
        if num_samples == 0:
            params = ParameterSet()
        elif blocks is not None:
            params = params.subset(blocks)
        scope = f"client:{self.client_id}"
        epochs = self.config.client.local_epoch
        metrics = (
            MetricRecord(self.task_id, round_index, scope, "train_loss", float(loss)),
            MetricRecord(self.task_id, round_index, scope, "num_samples", float(num_samples)),
            MetricRecord(self.task_id, round_index, scope, "sim_train_seconds",
                         num_samples * epochs * SIM_SECONDS_PER_SAMPLE),
        )
        return UploadEnvelope(self.client_id, round_index, params, num_samples, float(loss), metrics,
                              directives.get("cluster_id"))

    # -------------------------------------------------------------- protocol

    def register_message(self) -> Message:
        body = pack_body({"client_id": self.client_id, "num_samples": len(self.train_data)})
        return Message(MessageKind.REGISTER, self.task_id, 0, body)

    def serve(self, endpoint: Endpoint) -> None:
        """Register, then answer plans until STOP or disconnection."""
        self.endpoint = endpoint
        try:
            endpoint.send(self.register_message())
            while True:
                m = endpoint.recv()
                if m.kind is MessageKind.STOP:
                    break
                if m.kind is MessageKind.PLAN:
                    self.handle_plan(m, endpoint)
        except TransportClosed:
            log.info("client %s: connection closed", self.client_id)
        finally:
            endpoint.close()

    def handle_plan(self, m: Message, endpoint: Endpoint) -> None:
        directives, params = unpack_body(m.payload)
        self.task_id = m.task_id
        directives["round"] = m.round_index
        try:
            if directives.get("mode") == "test":
                self._answer_test(m, directives, params, endpoint)
            else:
                self._answer_train(m, directives, params, endpoint)
        except TransportClosed:
            raise
        except Exception as exc:  # reported to the server, which counts it
            log.exception("client %s failed in round %s", self.client_id, m.round_index)
            body = pack_body({"client_id": self.client_id, "error": f"{type(exc).__name__}: {exc}"})
            endpoint.send(Message(MessageKind.EVAL_RESULT, m.task_id, m.round_index, body))

    def _merge_received(self, received: ParameterSet) -> ParameterSet:
        if self.exchanged_blocks is None:
            return received
        self.local_model = self.local_model.replace(received)
        return self.local_model

    def _answer_test(self, m, directives, params, endpoint) -> None:
        test = self.hooks.resolve("client_test", type(self).test)
        if directives.get("clustered"):
            x, y = self.train_data.features, self.train_data.labels
            losses = [evaluate(self.spec, p, x, y, self.config.model.loss)[1] for p in params]
            model = params[assign_cluster(losses)]
        else:
            model = self._merge_received(params[0])
        acc, loss, n = test(self, model, directives)
        body = pack_body({"client_id": self.client_id, "accuracy": acc, "loss": loss, "num_samples": n})
        endpoint.send(Message(MessageKind.EVAL_RESULT, m.task_id, m.round_index, body))

    def _answer_train(self, m, directives, params, endpoint) -> None:
        if directives.get("split"):
            trained, n, loss = self._train_split(m, directives, params[0], endpoint)
        else:
            if directives.get("clustered"):
                x, y = self.train_data.features, self.train_data.labels
                losses = [evaluate(self.spec, p, x, y, self.config.model.loss)[1] for p in params]
                directives["cluster_id"] = assign_cluster(losses)
                start = params[directives["cluster_id"]]
            else:
                start = self._merge_received(params[0])
            if "task_labels" in directives:
                self._observe_task(m, directives, endpoint)
            if directives.get("pseudo_threshold") is not None:
                trained, n, loss = self._train_pseudo(start, directives)
            else:
                train = self.hooks.resolve("client_train", type(self).train)
                trained, n, loss = train(self, start, directives)
            if self.exchanged_blocks is not None:
                self.local_model = trained
        build = self.hooks.resolve("construct_upload", type(self).construct_upload)
        envelope = build(self, trained, n, loss, directives)
        endpoint.send(encode_upload(m.task_id, envelope))

    # -------------------------------------------------------- workflow parts

    def _train_pseudo(self, params: ParameterSet, directives) -> tuple[ParameterSet, int, float]:
        """Label-in-server: train on confident pseudo-labels from the received model."""
        x = self.train_data.features
        if len(x) == 0:
            return params, 0, 0.0
        probs = predict_proba(self.spec, params, x)
        keep = probs.max(axis=1) > directives["pseudo_threshold"]
        if not keep.any():
            return params, 0, 0.0
        pseudo = np.argmax(probs[keep], axis=1)
        return self._fit(params, x[keep], pseudo, self.config.client.local_epoch,
                         self.seed_for(directives["round"]))

    def _observe_task(self, m: Message, directives, endpoint: Endpoint) -> None:
        """Track the task's label mix; on drift, cache replay samples and notify the server."""
        labels = tuple(directives["task_labels"])
        if labels == self.task_labels:
            return
        d = self.train_data
        hist = np.bincount(d.labels[np.isin(d.labels, labels)], minlength=d.n_classes).astype(np.float64)
        previous = self.task_labels
        self.task_labels = labels
        if hist.sum() == 0:
            return
        hist /= hist.sum()
        if self.drift_state is None:
            self.drift_state = DriftState(hist, self.config.continual.drift_threshold)
            return
        drifted, js = detect_drift(self.drift_state, hist)
        if not drifted:
            return
        body = pack_body({"client_id": self.client_id, "js": js})
        endpoint.send(Message(MessageKind.DRIFT_NOTICE, m.task_id, m.round_index, body))
        frac = self.config.continual.replay_fraction
        if frac > 0 and previous is not None:
            old = np.flatnonzero(np.isin(d.labels, previous))
            rng = np.random.default_rng(self.seed_for(m.round_index, salt=2))
            take = int(round(frac * len(old)))
            picked = rng.choice(old, size=take, replace=False) if take else np.zeros(0, dtype=np.int64)
            self.replay_indices = np.union1d(self.replay_indices, picked).astype(np.int64)
        self.drift_state = DriftState(hist, self.drift_state.threshold)

    def _train_split(self, m: Message, directives, front: ParameterSet,
                     endpoint: Endpoint) -> tuple[ParameterSet, int, float]:
        """Front half locally; the server runs the back half batch by batch."""
        d = self.train_data
        c = self.config.client
        n = len(d)
        if n == 0:
            return front, 0, 0.0
        rng = np.random.default_rng(self.seed_for(m.round_index))
        state = OptimizerState.fresh(c.optimizer, front)
        epoch_loss = 0.0
        for _ in range(c.local_epoch):
            total = 0.0
            order = rng.permutation(n)
            for start in range(0, n, c.batch_size):
                idx = order[start:start + c.batch_size]
                cache = front_forward(self.spec, front, d.features[idx])
                act = cache.activations.astype(np.float32)
                body = pack_body({"client_id": self.client_id, "labels": d.labels[idx].tolist()},
                                 [tensor_set("act", act)])
                endpoint.send(Message(MessageKind.ACTIVATIONS, m.task_id, m.round_index, body))
                reply = endpoint.recv()
                if reply.kind is not MessageKind.ACT_GRADS:
                    raise RuntimeError(f"expected ACT_GRADS, got {reply.kind.name}")
                header, (grads,) = unpack_body(reply.payload)
                _, grad = front_backward(self.spec, front, cache, grads["act_grad"])
                front, state = sgd_step(state, front, grad)
                total += header["loss"] * len(idx)
            epoch_loss = total / n
        return front, n, epoch_loss


# Names of hook fields, used by tests checking default equivalence.
HOOK_NAMES = tuple(f.name for f in fields(WorkflowHooks))
