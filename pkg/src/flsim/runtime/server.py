"""Round driver: client registry and selection, hubs, and the server workflows."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..aggregation import Aggregator, ClusterBook, aggregate_clusters, fedavg
from ..comms import (
    Endpoint,
    Message,
    MessageKind,
    TcpListener,
    TrafficMeter,
    TransportClosed,
    decode_upload,
    in_process_transport,
    pack_body,
    tcp_connect,
    tcp_listen,
    tensor_set,
    unpack_body,
)
from ..core import ParameterSet, TaskConfig, UploadEnvelope
from ..learner import (
    LocalObjective,
    ModelSpec,
    OptimizerState,
    back_forward_backward,
    evaluate,
    init_params,
    local_train,
    sgd_step,
    split_model,
)
from ..tracker import RunSummary, Tracker
from .client import Client, WorkflowHooks, derive_seed, model_seed
from .components import ComponentRegistry, FederatedData, default_registry
from .continual import ContinualSchedule

__all__ = [
    "ClientRecord",
    "ClientRegistry",
    "select_clients",
    "Hub",
    "InProcessHub",
    "TcpHub",
    "RoundSummary",
    "RunReport",
    "Server",
    "run_task",
    "run_standard",
    "run_semi_server",
    "run_continual",
    "run_split",
    "run_clustered",
    "serve",
    "join",
]

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- #
# registry and selection
# --------------------------------------------------------------------------- #


@dataclass
class ClientRecord:
    num_samples: int
    available: bool = True
    address: str = "in-process"


class ClientRegistry:
    def __init__(self):
        self._lock = threading.Lock()
        self.clients: dict[int, ClientRecord] = {}

    def add(self, client_id: int, num_samples: int, address: str = "in-process") -> None:
        with self._lock:
            if client_id in self.clients and self.clients[client_id].available:
                raise ValueError(f"client {client_id} is already registered")
            self.clients[client_id] = ClientRecord(num_samples, True, address)

    def set_available(self, client_id: int, available: bool) -> None:
        with self._lock:
            self.clients[client_id].available = available

    def available_ids(self) -> list[int]:
        with self._lock:
            return sorted(cid for cid, rec in self.clients.items() if rec.available)


def select_clients(registry: ClientRegistry, k: int, round_index: int, seed: int) -> list[int]:
    """Uniform sample without replacement from available clients, returned sorted."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pool = registry.available_ids()
    if not pool:
        raise RuntimeError("no clients available")
    if k >= len(pool):
        return pool
    rng = np.random.default_rng([int(seed), int(round_index), 0x5E1EC7])
    return sorted(int(c) for c in rng.choice(pool, size=k, replace=False))


# --------------------------------------------------------------------------- #
# hubs: the server's view of its client connections
# --------------------------------------------------------------------------- #


class Hub:
    def __init__(self, meter: TrafficMeter | None = None):
        self.meter = meter if meter is not None else TrafficMeter()
        self.registry = ClientRegistry()
        self.endpoints: dict[int, Endpoint] = {}

    def register_endpoint(self, endpoint: Endpoint, timeout: float | None = None, address: str = "in-process") -> int:
        m = endpoint.recv(timeout)
        if m.kind is not MessageKind.REGISTER:
            raise RuntimeError(f"expected REGISTER, got {m.kind.name}")
        header, _ = unpack_body(m.payload)
        cid = int(header["client_id"])
        self.registry.add(cid, int(header["num_samples"]), address)
        self.endpoints[cid] = endpoint
        return cid

    def send(self, client_id: int, m: Message) -> bool:
        try:
            self.endpoints[client_id].send(m)
            return True
        except TransportClosed:
            self.registry.set_available(client_id, False)
            return False

    def recv(self, client_id: int, timeout: float | None = None) -> Message:
        try:
            return self.endpoints[client_id].recv(timeout)
        except TransportClosed:
            self.registry.set_available(client_id, False)
            raise

    def stop(self) -> None:
        for cid in sorted(self.endpoints):
            ep = self.endpoints[cid]
            try:
                ep.send(Message(MessageKind.STOP))
            except TransportClosed:
                pass
        for ep in self.endpoints.values():
            ep.close()


class InProcessHub(Hub):
    """Clients run in threads of this process and talk through queue endpoints."""

    def __init__(self, clients: Sequence[Client]):
        super().__init__()
        self.threads: list[threading.Thread] = []
        pending = []
        for c in clients:
            server_ep, client_ep = in_process_transport(self.meter, TrafficMeter())
            t = threading.Thread(target=c.serve, args=(client_ep,), daemon=True, name=f"client-{c.client_id}")
            t.start()
            self.threads.append(t)
            pending.append(server_ep)
        for ep in pending:
            self.register_endpoint(ep)

    def stop(self) -> None:
        super().stop()
        for t in self.threads:
            t.join(timeout=10)


class TcpHub(Hub):
    """Waits for ``expected`` clients to connect and REGISTER on ``listener``."""

    def __init__(self, listener: TcpListener, expected: int, timeout: float | None = None):
        super().__init__(listener.meter)
        self.listener = listener
        for _ in range(expected):
            ep = listener.accept(timeout)
            peer = ep.sock.getpeername()
            self.register_endpoint(ep, timeout, address=f"{peer[0]}:{peer[1]}")

    def stop(self) -> None:
        super().stop()
        self.listener.close()


# --------------------------------------------------------------------------- #
# server
# --------------------------------------------------------------------------- #


@dataclass
class RoundSummary:
    round_index: int
    selected: list[int]
    received: list[int]
    skipped: list[int] = field(default_factory=list)
    stragglers: list[int] = field(default_factory=list)
    errors: list[int] = field(default_factory=list)
    failed: bool = False
    train_loss: float | None = None


@dataclass
class RunReport:
    task_id: str
    workflow: str
    params: ParameterSet
    history: list[tuple[int, float]] = field(default_factory=list)
    rounds: list[RoundSummary] = field(default_factory=list)
    accuracy_matrix: list[list[float | None]] | None = None
    summary: RunSummary | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def final_accuracy(self) -> float:
        return self.history[-1][1] if self.history else float("nan")

    @property
    def best_accuracy(self) -> float:
        return max(a for _, a in self.history) if self.history else float("nan")

    @property
    def best_round(self) -> int:
        best = self.best_accuracy
        return next(r for r, a in self.history if a == best)

    @property
    def average_accuracy(self) -> float | None:
        if self.accuracy_matrix is None:
            return None
        last = [a for a in self.accuracy_matrix[-1] if a is not None]
        return float(np.mean(last))


class Server:
    """Drives rounds for one task.  Override ``on_round_start``, ``aggregate``
    or ``post_aggregate`` in a subclass, or pass WorkflowHooks."""

    def __init__(self, config: TaskConfig, fed: FederatedData, spec: ModelSpec, hub: Hub,
                 tracker: Tracker | None = None, hooks: WorkflowHooks | None = None):
        self.config = config
        self.fed = fed
        self.spec = spec
        self.hub = hub
        self.tracker = tracker if tracker is not None else Tracker()
        self.hooks = hooks or WorkflowHooks()
        self.task_id = config.task_id
        self.global_params = init_params(spec, model_seed(config))
        s = config.server
        self.aggregator = Aggregator(s.aggregator, self.global_params, config.model.partial_blocks,
                                     s.server_lr, s.beta1, s.beta2, s.tau)
        self.book: ClusterBook | None = None
        self.report = RunReport(self.task_id, config.workflow, self.global_params)
        self._t0 = time.perf_counter()

    # ----------------------------------------------------------- defaults

    def on_round_start(self, round_index: int) -> None:
        pass

    def aggregate(self, uploads: Sequence[UploadEnvelope]):
        """New global state: a ParameterSet, or a ClusterBook for the clustered workflow."""
        if self.book is not None:
            return aggregate_clusters(self.book, uploads)
        if self.config.workflow == "split":
            return fedavg(uploads)
        return self.aggregator(self.global_params, uploads)

    def post_aggregate(self, round_index: int) -> None:
        pass

    # ------------------------------------------------------------ plumbing

    def log(self, round_index: int, scope: str, name: str, value: float) -> None:
        self.tracker.log(self.task_id, round_index, scope, name, value, time.perf_counter() - self._t0)

    def _hook(self, name: str):
        return self.hooks.resolve(name, getattr(type(self), name))

    def exchange_set(self, params: ParameterSet | None = None) -> ParameterSet:
        params = self.global_params if params is None else params
        m = self.config.model
        return params.subset(m.partial_blocks) if m.exchange == "partial" else params

    def plan_message(self, round_index: int, directives: dict[str, Any], params: Sequence[ParameterSet]) -> Message:
        return Message(MessageKind.PLAN, self.task_id, round_index, pack_body(directives, list(params)))

    def _deadline(self) -> float | None:
        d = self.config.server.deadline
        return time.monotonic() + d if d > 0 else None

    @staticmethod
    def _remaining(deadline: float | None) -> float | None:
        return None if deadline is None else max(0.0, deadline - time.monotonic())

    def collect_uploads(self, round_index: int, client_ids: Sequence[int], summary: RoundSummary,
                        deadline: float | None) -> list[UploadEnvelope]:
        uploads = []
        for cid in sorted(client_ids):
            while True:
                try:
                    m = self.hub.recv(cid, self._remaining(deadline))
                except TimeoutError:
                    summary.stragglers.append(cid)
                    break
                except TransportClosed:
                    summary.stragglers.append(cid)
                    break
                if m.round_index != round_index:
                    continue  # stale message from an earlier round
                if m.kind is MessageKind.DRIFT_NOTICE:
                    header, _ = unpack_body(m.payload)
                    self.log(round_index, f"client:{cid}", "drift_js", header["js"])
                    continue
                if m.kind is MessageKind.EVAL_RESULT:
                    header, _ = unpack_body(m.payload)
                    if "error" in header:
                        log.warning("client %s failed: %s", cid, header["error"])
                        summary.errors.append(cid)
                        self.log(round_index, f"client:{cid}", "client_error", 1.0)
                        break
                    continue
                if m.kind is MessageKind.ACTIVATIONS:
                    self._answer_activations(m, cid)
                    continue
                if m.kind is MessageKind.UPLOAD:
                    env = decode_upload(m)
                    if env.skipped:
                        summary.skipped.append(cid)
                    else:
                        uploads.append(env)
                        summary.received.append(cid)
                    for r in env.metrics:
                        self.log(round_index, r.scope, r.name, r.value)
                    break
        return uploads

    # ---------------------------------------------------------------- rounds

    def run_round(self, round_index: int, directives: dict[str, Any] | None = None) -> RoundSummary:
        """Distribute, collect, aggregate.  The global state changes at most once, at the end."""
        self._hook("on_round_start")(self, round_index)
        s = self.config.server
        selected = select_clients(self.hub.registry, s.clients_per_round, round_index, self.config.data.seed)
        summary = RoundSummary(round_index, selected, [])
        for cid in selected:
            self.log(round_index, f"client:{cid}", "selected", 1.0)
        directives = {"mode": "train", **(directives or {})}
        if self.book is not None:
            directives["clustered"] = True
            payload = list(self.book.models)
        elif self.config.workflow == "split":
            directives["split"] = True
            payload = [self.front]
        else:
            payload = [self.exchange_set()]
        msg = self.plan_message(round_index, directives, payload)
        deadline = self._deadline()
        if self.config.workflow == "split":
            # back half is stepped per batch in arrival order, so serve clients one at a time
            uploads = []
            for cid in selected:
                if self.hub.send(cid, msg):
                    uploads += self.collect_uploads(round_index, [cid], summary, deadline)
                else:
                    summary.stragglers.append(cid)
        else:
            sent = [cid for cid in selected if self.hub.send(cid, msg)]
            summary.stragglers.extend(cid for cid in selected if cid not in sent)
            uploads = self.collect_uploads(round_index, sent, summary, deadline)
        if uploads:
            total = sum(u.num_samples for u in uploads)
            summary.train_loss = sum(u.train_loss * u.num_samples for u in uploads) / total
            new_state = self._hook("aggregate")(self, uploads)
            self._install(new_state)
            self._hook("post_aggregate")(self, round_index)
        else:
            summary.failed = True
        self.log(round_index, "server", "uploads", len(uploads))
        self.log(round_index, "server", "round_failed", float(summary.failed))
        if summary.train_loss is not None:
            self.log(round_index, "server", "train_loss", summary.train_loss)
        self.report.rounds.append(summary)
        return summary

    def _install(self, state) -> None:
        if isinstance(state, ClusterBook):
            self.book = state
        elif self.config.workflow == "split":
            self.front = state
        else:
            self.global_params = state

    # ------------------------------------------------------------ evaluation

    def evaluate_model(self, params: ParameterSet, labels: Sequence[int] | None = None) -> tuple[float, float]:
        data = self.fed.test
        if labels is not None:
            data = data.subset(np.flatnonzero(np.isin(data.labels, labels)))
        return evaluate(self.spec, params, data.features, data.labels, self.config.model.loss)

    def evaluate_round(self, round_index: int, labels: Sequence[int] | None = None) -> float:
        """Test per ``test_mode``; records and returns the headline accuracy."""
        if self.config.test_mode == "test_in_server" or self.config.workflow in ("continual", "semi_server"):
            if self.book is not None:
                scores = [self.evaluate_model(m, labels) for m in self.book.models]
                acc = float(np.mean([a for a, _ in scores]))
                loss = float(np.mean([lo for _, lo in scores]))
            else:
                acc, loss = self.evaluate_model(self.current_model(), labels)
            self.log(round_index, "server", "accuracy", acc)
            self.log(round_index, "server", "loss", loss)
        else:
            acc = self._client_side_test(round_index, labels)
        self.report.history.append((round_index, acc))
        return acc

    def _client_side_test(self, round_index: int, labels) -> float:
        directives: dict[str, Any] = {"mode": "test"}
        if labels is not None:
            directives["eval_labels"] = list(labels)
        if self.book is not None:
            directives["clustered"] = True
            payload = list(self.book.models)
        elif self.config.workflow == "split":
            payload = [self.current_model()]
        else:
            payload = [self.exchange_set()]
        msg = self.plan_message(round_index, directives, payload)
        targets = [cid for cid in self.hub.registry.available_ids() if self.hub.send(cid, msg)]
        deadline = self._deadline()
        results = []
        for cid in targets:
            while True:
                try:
                    m = self.hub.recv(cid, self._remaining(deadline))
                except (TimeoutError, TransportClosed):
                    break
                if m.kind is MessageKind.EVAL_RESULT and m.round_index == round_index:
                    header, _ = unpack_body(m.payload)
                    if "error" not in header and header["num_samples"] > 0:
                        results.append(header)
                        self.log(round_index, f"client:{cid}", "accuracy", header["accuracy"])
                    break
        if not results:
            return float("nan")
        n = np.array([r["num_samples"] for r in results], dtype=np.float64)
        acc = np.array([r["accuracy"] for r in results])
        loss = np.array([r["loss"] for r in results])
        weighted = float(np.sum(acc * n) / n.sum())
        self.log(round_index, "server", "accuracy", weighted)
        self.log(round_index, "server", "accuracy_unweighted", float(acc.mean()))
        self.log(round_index, "server", "loss", float(np.sum(loss * n) / n.sum()))
        return weighted

    def current_model(self) -> ParameterSet:
        if self.config.workflow == "split":
            return self.front.concat(self.back)
        return self.global_params

    def _log_round_traffic(self, round_index: int) -> None:
        self.log(round_index, "server", "comm_bytes_down", self.hub.meter.bytes("sent", round_index))
        self.log(round_index, "server", "comm_bytes_up", self.hub.meter.bytes("received", round_index))
        self.log(round_index, "server", "memory_bytes", self.current_model().nbytes)
        if "activation_bytes" in self.report.extra:
            self.log(round_index, "server", "activation_bytes",
                     self.report.extra["activation_bytes"].get(round_index, 0))

    def _should_test(self, round_index: int, last: int) -> bool:
        return round_index % self.config.server.test_every == 0 or round_index == last

    # ------------------------------------------------------------- workflows

    def run(self, schedule: ContinualSchedule | None = None) -> RunReport:
        wf = self.config.workflow
        if wf == "standard":
            self._run_rounds(self.config.server.rounds)
        elif wf == "clustered":
            self._run_clustered()
        elif wf == "split":
            self._run_split()
        elif wf == "semi_server":
            self._run_semi()
        elif wf == "continual":
            self._run_continual(schedule)
        else:  # pragma: no cover - rejected by config validation
            raise ValueError(wf)
        self.report.params = self.final_checkpoint()
        self.report.summary = self.tracker.summarize(self.task_id)
        return self.report

    def final_checkpoint(self) -> ParameterSet:
        if self.book is not None:
            return ParameterSet(
                (f"cluster{c}/{n}", s, v) for c, m in enumerate(self.book.models) for n, s, v in m.blocks()
            )
        return self.current_model()

    def _run_rounds(self, rounds: int, first: int = 1, directives=None, after_aggregate=None,
                    eval_labels=None) -> None:
        last = first + rounds - 1
        for r in range(first, last + 1):
            self.run_round(r, directives)
            if after_aggregate is not None:
                after_aggregate(r)
            if self._should_test(r, last):
                self.evaluate_round(r, eval_labels)
            self._log_round_traffic(r)

    def _run_clustered(self) -> None:
        seed = model_seed(self.config)
        models = tuple(init_params(self.spec, derive_seed(seed, c)) for c in range(self.config.num_clusters))
        self.book = ClusterBook(models)
        self._run_rounds(self.config.server.rounds)

    def _run_split(self) -> None:
        self.front, self.back = split_model(self.spec, self.global_params, self.config.model.split_layer)
        self.back_state = OptimizerState.fresh(self.config.client.optimizer, self.back)
        self.report.extra["activation_bytes"] = {}
        self._run_rounds(self.config.server.rounds)

    def _answer_activations(self, m: Message, cid: int) -> None:
        header, (act,) = unpack_body(m.payload)
        activations = act["act"]
        loss, grad, dact = back_forward_backward(self.spec, self.back, activations, header["labels"],
                                                 LocalObjective(self.config.model.loss))
        self.back, self.back_state = sgd_step(self.back_state, self.back, grad)
        nbytes = self.report.extra["activation_bytes"]
        nbytes[m.round_index] = nbytes.get(m.round_index, 0) + activations.size * 4
        reply = pack_body({"loss": loss}, [tensor_set("act_grad", dact.astype(np.float32))])
        self.hub.send(cid, Message(MessageKind.ACT_GRADS, m.task_id, m.round_index, reply))

    def server_fit(self, epochs: int, salt: int) -> None:
        data = self.fed.server_train
        if epochs == 0 or data is None or len(data) == 0:
            return
        c = self.config.client
        self.global_params, _, _ = local_train(
            self.spec, self.global_params, data.features, data.labels, LocalObjective(self.config.model.loss),
            c.optimizer, epochs, c.batch_size, derive_seed(self.config.data.seed, salt, 0x5E4))

    def _run_semi(self) -> None:
        if self.fed.server_train is None:
            raise RuntimeError("semi_server workflow needs labeled server data")
        s = self.config.server
        self.server_fit(s.warmup_epochs, salt=0)
        self._run_rounds(s.rounds, directives={"pseudo_threshold": s.pseudo_threshold},
                         after_aggregate=lambda r: self.server_fit(s.finetune_epochs, salt=r))

    def _run_continual(self, schedule: ContinualSchedule | None) -> None:
        ct = self.config.continual
        if schedule is None:
            schedule = ContinualSchedule.even_split(self.fed.train.n_classes, ct.num_tasks, ct.rounds_per_task)
        matrix: list[list[float | None]] = []
        first = 1
        seen: list[int] = []
        for t, task in enumerate(schedule.tasks):
            seen.extend(task.labels)
            self._run_rounds(task.rounds, first, directives={"task_labels": list(task.labels)},
                             eval_labels=sorted(seen))
            first += task.rounds
            row: list[float | None] = []
            for j, prev in enumerate(schedule.tasks):
                if j <= t:
                    acc, _ = self.evaluate_model(self.global_params, prev.labels)
                    self.log(first - 1, "server", f"task{j}_accuracy", acc)
                    row.append(acc)
                else:
                    row.append(None)
            matrix.append(row)
        self.report.accuracy_matrix = matrix


# --------------------------------------------------------------------------- #
# entry points
# --------------------------------------------------------------------------- #


def _build(config: TaskConfig, registry: ComponentRegistry | None):
    registry = registry or default_registry()
    fed = registry.build_data(config)
    spec = registry.build_model(config, fed.train.n_features, fed.train.n_classes)
    return registry, fed, spec


def make_clients(config: TaskConfig, fed: FederatedData, spec: ModelSpec, registry: ComponentRegistry,
                 hooks: WorkflowHooks | None = None, ids: Sequence[int] | None = None) -> list[Client]:
    cls = registry.client_class(config)
    ids = range(fed.num_clients) if ids is None else ids
    return [cls(cid, fed.client_train[cid], fed.client_test[cid], spec, config, hooks) for cid in ids]


def run_task(config: TaskConfig, *, registry: ComponentRegistry | None = None, hooks: WorkflowHooks | None = None,
             tracker: Tracker | None = None, transport: str = "inprocess",
             schedule: ContinualSchedule | None = None) -> RunReport:
    """Run one task end to end with clients in this process.

    ``transport`` is ``"inprocess"`` (queue endpoints) or ``"tcp"`` (client
    threads connect to a loopback listener).
    """
    registry, fed, spec = _build(config, registry)
    clients = make_clients(config, fed, spec, registry, hooks)
    if transport == "inprocess":
        hub: Hub = InProcessHub(clients)
    elif transport == "tcp":
        listener = tcp_listen(("127.0.0.1", 0))
        address = listener.address
        for c in clients:
            threading.Thread(target=lambda c=c: c.serve(tcp_connect(address)), daemon=True).start()
        hub = TcpHub(listener, len(clients), timeout=30)
    else:
        raise ValueError(f"unknown transport {transport!r}")
    try:
        server = registry.server_class(config)(config, fed, spec, hub, tracker, hooks)
        return server.run(schedule)
    finally:
        hub.stop()


def _run_workflow(config: TaskConfig, workflow: str, **kwargs) -> RunReport:
    if config.workflow != workflow:
        raise ValueError(f"config describes workflow {config.workflow!r}, not {workflow!r}")
    return run_task(config, **kwargs)


def run_standard(config: TaskConfig, **kwargs) -> RunReport:
    return _run_workflow(config, "standard", **kwargs)


def run_semi_server(config: TaskConfig, **kwargs) -> RunReport:
    return _run_workflow(config, "semi_server", **kwargs)


def run_continual(config: TaskConfig, schedule: ContinualSchedule | None = None, **kwargs) -> RunReport:
    return _run_workflow(config, "continual", schedule=schedule, **kwargs)


def run_split(config: TaskConfig, **kwargs) -> RunReport:
    return _run_workflow(config, "split", **kwargs)


def run_clustered(config: TaskConfig, **kwargs) -> RunReport:
    return _run_workflow(config, "clustered", **kwargs)


def serve(config: TaskConfig, listen: str, *, tracker: Tracker | None = None,
          registry: ComponentRegistry | None = None, hooks: WorkflowHooks | None = None,
          accept_timeout: float | None = 300.0) -> RunReport:
    """Networked server: wait for every client to join, then run the task."""
    registry, fed, spec = _build(config, registry)
    listener = tcp_listen(listen)
    log.info("listening on %s:%s for %d clients", *listener.address, fed.num_clients)
    hub = TcpHub(listener, fed.num_clients, timeout=accept_timeout)
    try:
        server = registry.server_class(config)(config, fed, spec, hub, tracker, hooks)
        return server.run()
    finally:
        hub.stop()


def join(config: TaskConfig, server_address: str, client_id: int, *,
         registry: ComponentRegistry | None = None, hooks: WorkflowHooks | None = None,
         connect_timeout: float = 30.0) -> None:
    """Networked client: rebuild the partition locally, connect, serve until STOP.

    A refused connection is retried until ``connect_timeout`` so clients may
    start before the server is listening.
    """
    registry, fed, spec = _build(config, registry)
    if not 0 <= client_id < fed.num_clients:
        raise ValueError(f"client id {client_id} outside [0, {fed.num_clients})")
    (client,) = make_clients(config, fed, spec, registry, hooks, ids=[client_id])
    give_up = time.monotonic() + connect_timeout
    while True:
        try:
            endpoint = tcp_connect(server_address)
            break
        except ConnectionRefusedError:
            if time.monotonic() >= give_up:
                raise
            time.sleep(0.05)
    client.serve(endpoint)
