"""Sequential and model-parallel training executors.

The distributed executor runs one thread per spatial worker and uses the
calling thread as the temporal worker. Workers share nothing: each holds a
private copy of its parameter shard, its optimizer moments and its pixel
rows, and tensors move only through queues. Per step:

1. temporal -> every head: ``forward(sample index)`` (control)
2. head h -> temporal: conv activations (edge ``head{h}->temporal``)
3. temporal runs LSTM + dense with the raw target-day precipitation,
   computes the loss and sends per-head activation gradients back
   (edge ``temporal->head{h}``)
4. heads finish backward; on batch boundaries each device steps its own Adam

Both executors call the same block functions in the same order, so their
losses agree to rounding.
"""

from __future__ import annotations

import queue
import threading
import time
import traceback
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, TrainingDiverged, WorkerFailure
from .model import (
    DomSTModel,
    backward,
    forward,
    head_backward,
    head_forward,
    migrate_tensors,
    owner_of,
    temporal_backward,
    temporal_forward,
)
from .pixcon import rebalance_partitions

EXECUTORS = ("sequential", "distributed")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle_seed: int = 0
    executor: str = "sequential"
    workers: int | None = None  # spatial worker threads; default one per head
    rebalance: bool = False
    timeout_s: float = 600.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.executor not in EXECUTORS:
            raise ConfigError(f"unknown executor {self.executor!r}; choose from {EXECUTORS}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def adam(self) -> nx.AdamState:
        return nx.AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepTrace:
    step: int
    epoch: int
    loss: float
    worker_time: dict  # device -> seconds of compute in this step
    edge_messages: dict  # "head{h}->temporal" / "temporal->head{h}" -> count
    edge_bytes: dict

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: DomSTModel
    epoch_losses: list
    step_losses: list
    wall_time: float
    epoch_times: list
    traces: list = field(default_factory=list)
    partitions: list = field(default_factory=list)  # partition after each epoch


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _accumulate(acc: dict | None, grads: dict) -> dict:
    if acc is None:
        return dict(grads)
    return {k: acc[k] + grads[k] for k in acc}


def _average(acc: dict, n: int) -> dict:
    return acc if n == 1 else {k: v / n for k, v in acc.items()}


def _checked_loss(pred: float, y: float, step: int):
    loss, g = nx.mse_loss(pred, y)
    if not np.isfinite(loss):
        raise TrainingDiverged(step, loss)
    return loss, float(g[0])


# ------------------------------------------------------------------ sequential


def run_sequential(model: DomSTModel, samples: Sequence, cfg: TrainConfig) -> TrainResult:
    """Reference single-device training loop (forward, MSE, backward, Adam)."""
    if not samples:
        raise ValueError("no training samples")
    model = model.copy()
    state = cfg.adam()
    step = 0
    epoch_losses, step_losses, epoch_times = [], [], []
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total = 0.0
        for batch in _batches(epoch_order(len(samples), cfg.shuffle_seed, epoch), cfg.batch_size):
            acc = None
            for idx in batch:
                s = samples[idx]
                pred, cache = forward(model, s)
                try:
                    loss, g = _checked_loss(pred, s.y, step)
                except nx.NonFiniteError:
                    raise TrainingDiverged(step, float("nan")) from None
                acc = _accumulate(acc, backward(model, cache, g).params)
                step_losses.append(loss)
                total += loss
                step += 1
            nx.adam_step(model.params, _average(acc, len(batch)), state)
        epoch_losses.append(total / len(samples))
        epoch_times.append(time.perf_counter() - t0)
    return TrainResult(model, epoch_losses, step_losses, time.perf_counter() - t_start, epoch_times,
                       partitions=[model.partition])


# ----------------------------------------------------------------- distributed


@dataclass(frozen=True)
class DeviceGraph:
    """Logical devices, parameter ownership and message edges for one model."""

    n_heads: int
    owner: dict  # parameter name -> device
    edges: tuple

    @classmethod
    def from_model(cls, model: DomSTModel) -> "DeviceGraph":
        owner = {name: owner_of(name) for name in model.params}
        edges = tuple(f"head{h}->temporal" for h in range(model.n_heads)) + tuple(
            f"temporal->head{h}" for h in range(model.n_heads))
        graph = cls(model.n_heads, owner, edges)
        graph.validate(model)
        return graph

    @property
    def devices(self) -> list[str]:
        return [f"head{h}" for h in range(self.n_heads)] + ["temporal"]

    def shard(self, params: dict, device: str) -> dict:
        return {k: v.copy() for k, v in params.items() if self.owner[k] == device}

    def validate(self, model: DomSTModel) -> None:
        devices = set(self.devices)
        if set(self.owner) != set(model.params):
            raise ConfigError("device graph does not cover every parameter")
        stray = {d for d in self.owner.values() if d not in devices}
        if stray:
            raise ConfigError(f"parameters owned by unknown devices {sorted(stray)}")
        if len(self.edges) != 2 * self.n_heads or len(set(self.edges)) != len(self.edges):
            raise ConfigError("device graph must have exactly 2H distinct edges")


class _SpatialWorker(threading.Thread):
    """Serves one or more head devices. Owns their shards exclusively."""

    def __init__(self, wid: int, heads: list[int], config, shards: dict, data: dict, adam: dict,
                 outbox: queue.Queue, debug: bool):
        super().__init__(name=f"spatial-worker-{wid}", daemon=True)
        self.wid = wid
        self.heads = heads
        self.config = config
        self.shards = shards  # head -> {name: array}
        self.data = data  # head -> [N, P_h, L]
        self.adam = adam  # head -> AdamState
        self.outbox = outbox
        self.inbox: queue.Queue = queue.Queue()
        self.debug = debug
        self._caches: dict = {}
        self._acc: dict = {h: None for h in heads}

    def run(self):
        current = None
        try:
            while True:
                msg = self.inbox.get()
                kind = msg[0]
                if kind == "forward":
                    for h in self.heads:
                        current = h
                        t0 = time.perf_counter()
                        out, cache = head_forward(self.config, self.shards[h], h, self.data[h][msg[1]])
                        self._caches[h] = cache
                        self.outbox.put(("act", h, out, time.perf_counter() - t0))
                elif kind == "backward":
                    _, h, grad, update, n = msg
                    current = h
                    t0 = time.perf_counter()
                    grads, _ = head_backward(self.config, self.shards[h], h, self._caches.pop(h), grad)
                    if self.debug:
                        assert set(grads) <= set(self.shards[h]), f"head{h} produced foreign gradients"
                    self._acc[h] = _accumulate(self._acc[h], grads)
                    if update:
                        nx.adam_step(self.shards[h], _average(self._acc[h], n), self.adam[h])
                        self._acc[h] = None
                    self.outbox.put(("done", h, None, time.perf_counter() - t0))
                elif kind == "collect":
                    self.outbox.put(("shards", self.wid, (self.shards, self.adam), 0.0))
                elif kind == "stop":
                    return
                else:
                    raise RuntimeError(f"unknown message {kind!r}")
        except BaseException as exc:  # reported to the coordinator, which aborts the job
            head = current if current is not None else self.heads[0]
            reason = f"{type(exc).__name__}: {exc}"
            if self.debug:
                reason += "\n" + traceback.format_exc()
            self.outbox.put(("error", head, reason, 0.0))


class _Cluster:
    def __init__(self, model: DomSTModel, samples, cfg: TrainConfig, adam_heads: dict, debug: bool):
        self.model = model
        self.cfg = cfg
        self.graph = DeviceGraph.from_model(model)
        self.outbox: queue.Queue = queue.Queue()
        n_workers = min(cfg.workers or model.n_heads, model.n_heads)
        assign = [[h for h in range(model.n_heads) if h % n_workers == w] for w in range(n_workers)]
        self.worker_of = {}
        self.workers = []
        for w, heads in enumerate(assign):
            shards = {h: self.graph.shard(model.params, f"head{h}") for h in heads}
            data = {}
            for h in heads:
                members = model.partition.members(h)
                data[h] = np.stack([np.asarray(s.X, dtype=np.float64)[members] for s in samples])
            worker = _SpatialWorker(w, heads, model.config, shards, data, {h: adam_heads[h] for h in heads},
                                    self.outbox, debug)
            self.workers.append(worker)
            for h in heads:
                self.worker_of[h] = worker
        for worker in self.workers:
            worker.start()

    def recv(self, kind: str):
        try:
            msg = self.outbox.get(timeout=self.cfg.timeout_s)
        except queue.Empty:
            raise WorkerFailure("temporal", f"timed out waiting for {kind}") from None
        if msg[0] == "error":
            raise WorkerFailure(f"head{msg[1]}", msg[2])
        if msg[0] != kind:
            raise WorkerFailure("temporal", f"protocol error: expected {kind}, got {msg[0]}")
        return msg

    def collect(self):
        params, adam = {}, {}
        for worker in self.workers:
            worker.inbox.put(("collect",))
        for _ in self.workers:
            _, _, (shards, states), _ = self.recv("shards")
            for h, shard in shards.items():
                params.update(shard)
                adam[h] = states[h]
        return params, adam

    def stop(self):
        for worker in self.workers:
            worker.inbox.put(("stop",))
        for worker in self.workers:
            worker.join(timeout=5.0)


def _merge_moments(states: dict, key: str) -> dict:
    out = {}
    for st in states.values():
        out.update(getattr(st, key))
    return out


def _repartition_adam(states: dict, old, new, n_heads: int) -> dict:
    m = migrate_tensors(_merge_moments(states, "m"), old, new)
    v = migrate_tensors(_merge_moments(states, "v"), old, new)
    t = next(iter(states.values())).t
    out = {}
    for h in range(n_heads):
        proto = states[h]
        keep = lambda d: {k: a for k, a in d.items() if k.startswith(f"head{h}.")}  # noqa: E731
        out[h] = nx.AdamState(proto.lr, proto.beta1, proto.beta2, proto.eps, t, keep(m), keep(v))
    return out


def run_distributed(model: DomSTModel, samples: Sequence, cfg: TrainConfig, debug: bool = False) -> TrainResult:
    """Model-parallel training: one logical device per head plus the temporal device."""
    if not samples:
        raise ValueError("no training samples")
    model = model.copy()
    config = model.config
    H = model.n_heads
    adam_heads = {h: cfg.adam() for h in range(H)}
    adam_temporal = cfg.adam()
    temporal = DeviceGraph.from_model(model).shard(model.params, "temporal")
    cluster = _Cluster(model, samples, cfg, adam_heads, debug)
    step = 0
    epoch_losses, step_losses, epoch_times, traces, partitions = [], [], [], [], []
    t_start = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            total = 0.0
            epoch_traces = []
            for batch in _batches(epoch_order(len(samples), cfg.shuffle_seed, epoch), cfg.batch_size):
                acc = None
                for pos, idx in enumerate(batch):
                    update = pos == len(batch) - 1
                    s = samples[idx]
                    busy = {d: 0.0 for d in cluster.graph.devices}
                    n_msg = {e: 0 for e in cluster.graph.edges}
                    n_bytes = {e: 0 for e in cluster.graph.edges}
                    for worker in cluster.workers:
                        worker.inbox.put(("forward", int(idx)))
                    outs = [None] * H
                    for _ in range(H):
                        _, h, out, dt = cluster.recv("act")
                        outs[h] = out
                        busy[f"head{h}"] += dt
                        n_msg[f"head{h}->temporal"] += 1
                        n_bytes[f"head{h}->temporal"] += out.nbytes

                    tt = time.perf_counter()
                    pred, tcache = temporal_forward(config, temporal, outs, s.p_target)
                    try:
                        loss, g = _checked_loss(pred, s.y, step)
                    except nx.NonFiniteError:
                        raise TrainingDiverged(step, float("nan")) from None
                    tgrads, head_grads, _ = temporal_backward(config, temporal, tcache, g)
                    busy["temporal"] += time.perf_counter() - tt
                    for h in range(H):
                        cluster.worker_of[h].inbox.put(("backward", h, head_grads[h], update, len(batch)))
                        n_msg[f"temporal->head{h}"] += 1
                        n_bytes[f"temporal->head{h}"] += head_grads[h].nbytes

                    tt = time.perf_counter()
                    acc = _accumulate(acc, tgrads)
                    if update:
                        nx.adam_step(temporal, _average(acc, len(batch)), adam_temporal)
                        acc = None
                    busy["temporal"] += time.perf_counter() - tt
                    for _ in range(H):
                        _, h, _, dt = cluster.recv("done")
                        busy[f"head{h}"] += dt

                    trace = StepTrace(step, epoch, loss, busy, n_msg, n_bytes)
                    epoch_traces.append(trace)
                    step_losses.append(loss)
                    total += loss
                    step += 1
            traces.extend(epoch_traces)
            epoch_losses.append(total / len(samples))

            if cfg.rebalance and H > 1 and epoch < cfg.epochs - 1:
                head_times = [trace_summary(epoch_traces)["mean_busy"][f"head{h}"] for h in range(H)]
                new_partition = rebalance_partitions(model.partition, np.maximum(head_times, 1e-12))
                if new_partition != model.partition:
                    head_params, adam_heads = cluster.collect()
                    cluster.stop()
                    migrated = migrate_tensors(head_params, model.partition, new_partition)
                    adam_heads = _repartition_adam(adam_heads, model.partition, new_partition, H)
                    params = {k: np.ascontiguousarray(migrated[k]) if k in migrated else temporal[k]
                              for k in model.params}
                    model = DomSTModel(config, new_partition, params)
                    cluster = _Cluster(model, samples, cfg, adam_heads, debug)
            partitions.append(model.partition)
            epoch_times.append(time.perf_counter() - t0)

        head_params, _ = cluster.collect()
    finally:
        cluster.stop()
    params = {k: head_params[k] if k in head_params else temporal[k] for k in model.params}
    trained = DomSTModel(config, model.partition, params)
    return TrainResult(trained, epoch_losses, step_losses, time.perf_counter() - t_start, epoch_times,
                       traces, partitions)


def train(model: DomSTModel, samples: Sequence, cfg: TrainConfig) -> TrainResult:
    if cfg.executor == "distributed":
        return run_distributed(model, samples, cfg)
    return run_sequential(model, samples, cfg)


def trace_summary(traces: Sequence[StepTrace]) -> dict:
    """Aggregate per-device busy time and per-edge transfer totals."""
    if not traces:
        raise ValueError("trace_summary needs at least one trace")
    devices = list(traces[0].worker_time)
    busy = {d: np.array([t.worker_time[d] for t in traces]) for d in devices}
    heads = [d for d in devices if d.startswith("head")]
    head_means = [float(busy[d].mean()) for d in heads]
    lo = min(head_means) if head_means else 0.0
    return {
        "steps": len(traces),
        "mean_busy": {d: float(v.mean()) for d, v in busy.items()},
        "max_busy": {d: float(v.max()) for d, v in busy.items()},
        "transfer_messages": {e: int(sum(t.edge_messages[e] for t in traces)) for e in traces[0].edge_messages},
        "transfer_bytes": {e: int(sum(t.edge_bytes[e] for t in traces)) for e in traces[0].edge_bytes},
        "head_imbalance": (max(head_means) / lo) if lo > 0 else float("inf"),
    }
