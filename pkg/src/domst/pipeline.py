"""Input pipeline: one model replica per watershed, run sequentially (S) or on a pool (IP-D)."""

from __future__ import annotations

import concurrent.futures as cf
import hashlib
import multiprocessing as mp
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Sample, WatershedDataset, chrono_split, window_samples
from .errors import ConfigError
from .executors import TrainConfig, train
from .metrics import nse
from .model import DomSTModel, ModelConfig, build_model, params_digest, predict_series

MODES = ("S", "IP-D")
TIMING_FIELDS = frozenset({"wall_time", "setup_time", "train_time", "total_wall_time", "time_s", "time_ipd",
                           "speedup", "epoch_times", "sequential_time", "distributed_time"})


# ----------------------------------------------------------------- splitting


def split_by_watershed(corpus: Sequence[tuple[str, WatershedDataset]]) -> list[WatershedDataset]:
    if not corpus:
        raise ValueError("empty corpus")
    ids = [wid for wid, _ in corpus]
    if len(set(ids)) != len(ids):
        dup = sorted({w for w in ids if ids.count(w) > 1})
        raise ValueError(f"duplicate watershed ids: {dup}")
    out = []
    for wid, ds in sorted(corpus, key=lambda item: item[0]):
        if ds.watershed_id != wid:
            ds = WatershedDataset(wid, ds.pixels, ds.precipitation, ds.discharge, ds.dates, ds.truth)
        out.append(ds)
    return out


def job_seed(global_seed: int, watershed_id: str) -> int:
    digest = hashlib.blake2b(f"{int(global_seed)}:{watershed_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


# ------------------------------------------------------------------- scaling


@dataclass(frozen=True)
class Scaler:
    """Single precipitation scale and a discharge z-score, fitted on training samples."""

    precip_scale: float
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, samples: Sequence[Sample]) -> "Scaler":
        x = np.concatenate([s.X.reshape(-1) for s in samples])
        y = np.array([s.y for s in samples])
        scale = float(x.std()) or 1.0
        y_std = float(y.std()) or 1.0
        return cls(scale, float(y.mean()), y_std)

    def transform(self, s: Sample) -> Sample:
        return Sample(s.X / self.precip_scale, s.p_target / self.precip_scale, (s.y - self.y_mean) / self.y_std, s.t)

    def inverse_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean


# ---------------------------------------------------------------------- jobs


@dataclass
class Job:
    watershed_id: str
    model_config: ModelConfig
    train_config: TrainConfig
    dataset: WatershedDataset = field(repr=False)
    train_fraction: float = 0.8

    @property
    def seed(self) -> int:
        return self.model_config.seed

    def initial_model(self) -> DomSTModel:
        return build_model(self.model_config, self.dataset.pixels)


@dataclass
class JobResult:
    watershed_id: str
    status: str
    seed: int
    variant: str
    train_nse: float | None = None
    test_nse: float | None = None
    epochs: int = 0
    epoch_losses: list = field(default_factory=list)
    params_digest: str | None = None
    wall_time: float = 0.0
    setup_time: float = 0.0
    train_time: float = 0.0
    error: str | None = None
    model: DomSTModel | None = field(default=None, repr=False)
    test_pred: list = field(default_factory=list, repr=False)
    test_obs: list = field(default_factory=list, repr=False)
    traces: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k not in ("model", "test_pred", "test_obs", "traces")}


def replicate_models(config: ModelConfig, datasets: Sequence[WatershedDataset], global_seed: int,
                     train_config: TrainConfig | None = None, train_fraction: float = 0.8) -> list[Job]:
    """One job per watershed: same architecture, seed derived from (global_seed, watershed_id)."""
    train_config = train_config or TrainConfig()
    ids = [ds.watershed_id for ds in datasets]
    if len(set(ids)) != len(ids):
        raise ConfigError("each watershed needs exactly one dataset")
    jobs = []
    for ds in sorted(datasets, key=lambda d: d.watershed_id):
        if not ds.pixels or len(ds.pixels) != ds.n_pixels:
            raise ConfigError(f"watershed {ds.watershed_id}: pixel metadata does not match its data")
        seed = job_seed(global_seed, ds.watershed_id)
        jobs.append(Job(ds.watershed_id, config.with_seed(seed), train_config, ds, train_fraction))
    return jobs


def train_job(job: Job, keep_model: bool = False) -> JobResult:
    """Window, scale, train and evaluate one watershed. Never raises."""
    t0 = time.perf_counter()
    result = JobResult(job.watershed_id, "ok", job.seed, job.model_config.variant)
    try:
        samples = window_samples(job.dataset, job.model_config.lookback)
        train_raw, test_raw = chrono_split(samples, job.train_fraction)
        scaler = Scaler.fit(train_raw)
        train_set = [scaler.transform(s) for s in train_raw]
        test_set = [scaler.transform(s) for s in test_raw]
        model = job.initial_model()
        t1 = time.perf_counter()
        res = train(model, train_set, job.train_config)
        t2 = time.perf_counter()
        pred_train = scaler.inverse_y(predict_series(res.model, train_set))
        pred_test = scaler.inverse_y(predict_series(res.model, test_set))
        result.train_nse = nse(pred_train, [s.y for s in train_raw]).nse
        result.test_nse = nse(pred_test, [s.y for s in test_raw]).nse
        result.epochs = len(res.epoch_losses)
        result.epoch_losses = [float(v) for v in res.epoch_losses]
        result.params_digest = params_digest(res.model.params)
        result.setup_time = t1 - t0
        result.train_time = t2 - t1
        result.test_pred = pred_test.tolist()
        result.test_obs = [s.y for s in test_raw]
        if keep_model:
            result.model = res.model
            result.traces = res.traces
    except Exception as exc:
        result.status = "failed"
        result.error = f"{type(exc).__name__}: {exc}"
    result.wall_time = time.perf_counter() - t0
    return result


@dataclass
class PipelineReport:
    mode: str
    pool_size: int
    total_wall_time: float
    jobs: list

    @property
    def failed(self) -> list[str]:
        return [j.watershed_id for j in self.jobs if j.status != "ok"]

    def result(self, watershed_id: str) -> JobResult:
        return next(j for j in self.jobs if j.watershed_id == watershed_id)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "pool_size": self.pool_size,
            "total_wall_time": self.total_wall_time,
            "jobs": [j.to_dict() for j in self.jobs],
            "failed": self.failed,
        }


def _pool(pool_size: int, backend: str):
    if backend == "thread":
        return cf.ThreadPoolExecutor(max_workers=pool_size)
    if backend == "process":
        methods = mp.get_all_start_methods()
        ctx = mp.get_context("fork" if "fork" in methods else "spawn")
        return cf.ProcessPoolExecutor(max_workers=pool_size, mp_context=ctx)
    raise ConfigError(f"unknown pool backend {backend!r}")


def run_jobs(jobs: Sequence[Job], mode: str = "IP-D", pool_size: int = 4, backend: str = "process",
             keep_models: bool = False) -> PipelineReport:
    """Train every job. ``S`` runs them one at a time in-process; ``IP-D`` on a worker pool.

    Both modes take jobs in ascending watershed id order.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if pool_size < 1:
        raise ConfigError("pool_size must be >= 1")
    ordered = sorted(jobs, key=lambda j: j.watershed_id)
    t0 = time.perf_counter()
    if mode == "S":
        results = [train_job(job, keep_models) for job in ordered]
    else:
        with _pool(pool_size, backend) as pool:
            futures = [pool.submit(train_job, job, keep_models) for job in ordered]
            results = []
            for job, fut in zip(ordered, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:  # worker process died
                    results.append(JobResult(job.watershed_id, "failed", job.seed, job.model_config.variant,
                                             error=f"{type(exc).__name__}: {exc}"))
    total = time.perf_counter() - t0
    return PipelineReport(mode, 1 if mode == "S" else pool_size, total, results)


def speedup(time_s: float, time_ipd: float) -> float:
    if not (time_s > 0 and time_ipd > 0):
        raise ValueError("speedup needs positive times")
    return round(time_s / time_ipd, 1)


def strip_timing(obj):
    """Copy of a JSON-like report with wall-clock fields removed."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_FIELDS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj
