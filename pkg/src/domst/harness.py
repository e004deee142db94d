"""Experiment harness: three-variant NSE comparison, S vs IP-D timing, gradient checks."""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import GenConfig, Sample, WatershedDataset, generate_synthetic, window_samples
from .errors import ConfigError
from .executors import TrainConfig, run_distributed, run_sequential
from .metrics import relative_improvement, spearman_rho
from .model import VARIANTS, DomSTModel, ModelConfig, backward, build_model, forward
from .pipeline import Scaler, replicate_models, run_jobs, speedup, split_by_watershed

log = logging.getLogger(__name__)

VARIANT_LABELS = {
    "singlehead": "Singlehead",
    "singlehead_plus_p": "Singlehead(+P)",
    "multihead_plus_p": "Distributed-Multihead(+P)",
}
GRAD_TOL = 1e-4


def variant_config(base: ModelConfig, variant: str, heads: int | None = None) -> ModelConfig:
    """``base`` architecture re-targeted at ``variant``."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if variant == "multihead_plus_p":
        h = heads if heads is not None else (base.heads if base.variant == "multihead_plus_p" else 4)
        return replace(base, variant=variant, heads=h, use_pixcon=None)
    return replace(base, variant=variant, heads=None, use_pixcon=None)


def _r6(x):
    return None if x is None else round(float(x), 6)


# ----------------------------------------------------------------- comparison


@dataclass
class ComparisonTable:
    columns: list  # variant per column; a variant may repeat
    watersheds: list
    seeds: list
    cells: list  # [column][watershed][seed] -> test NSE or None (failed)
    failures: list = field(default_factory=list)

    def _values(self, col: int) -> list[float]:
        return [v for row in self.cells[col] for v in row if v is not None]

    def median(self, col: int) -> float:
        vals = self._values(col)
        return statistics.median(vals) if vals else float("nan")

    def column(self, variant: str) -> int:
        return self.columns.index(variant)

    def win_fraction(self, a: int, b: int) -> float:
        """Fraction of (watershed, seed) cells where column ``a`` >= column ``b``."""
        pairs = [(x, y) for ra, rb in zip(self.cells[a], self.cells[b]) for x, y in zip(ra, rb)
                 if x is not None and y is not None]
        return sum(x >= y for x, y in pairs) / len(pairs) if pairs else float("nan")

    def improvement(self, new: int, old: int) -> dict:
        rel = [relative_improvement(x, y) for rn, ro in zip(self.cells[new], self.cells[old])
               for x, y in zip(rn, ro) if x is not None and y is not None]
        new_vals, old_vals = self._values(new), self._values(old)
        return {
            "max_cell": _r6(max(rel)) if rel else None,
            "mean_cell": _r6(float(np.mean(rel))) if rel else None,
            "of_means": _r6(relative_improvement(float(np.mean(new_vals)), float(np.mean(old_vals))))
            if new_vals and old_vals else None,
        }

    def to_dict(self) -> dict:
        pairs = []
        n = len(self.columns)
        for a in range(n):
            for b in range(n):
                if a != b:
                    pairs.append({"a": self.columns[a], "b": self.columns[b], "a_col": a, "b_col": b,
                                  "win_fraction": _r6(self.win_fraction(a, b)),
                                  "relative_improvement": self.improvement(a, b)})
        return {
            "columns": list(self.columns),
            "watersheds": list(self.watersheds),
            "seeds": list(self.seeds),
            "test_nse": [[[_r6(v) for v in row] for row in col] for col in self.cells],
            "median_nse": [_r6(self.median(c)) for c in range(n)],
            "pairs": pairs,
            "failures": list(self.failures),
            "improvement_formula": "(NSE_new - NSE_old) / |NSE_old|",
        }

    def to_text(self) -> str:
        d = self.to_dict()
        labels = [VARIANT_LABELS[v] for v in self.columns]
        width = max(12, *(len(lab) for lab in labels)) + 2
        lines = ["Test NSE per watershed (median over seeds)", ""]
        lines.append("Watershed".ljust(12) + "".join(lab.rjust(width) for lab in labels))
        for w, wid in enumerate(self.watersheds):
            row = wid.ljust(12)
            for c in range(len(self.columns)):
                vals = [v for v in d["test_nse"][c][w] if v is not None]
                row += (f"{statistics.median(vals):.6f}" if vals else "failed").rjust(width)
            lines.append(row)
        lines.append("Median".ljust(12) + "".join(f"{m:.6f}".rjust(width) for m in d["median_nse"]))
        lines.append("")
        for p in d["pairs"]:
            if p["a_col"] > p["b_col"]:
                lines.append(f"{VARIANT_LABELS[p['a']]} >= {VARIANT_LABELS[p['b']]}: "
                             f"{p['win_fraction']:.6f} of cells")
        if self.failures:
            lines.append("")
            lines.extend(f"FAILED {f['variant']} {f['watershed']} seed {f['seed']}: {f['error']}"
                         for f in self.failures)
        return "\n".join(lines) + "\n"


def run_comparison(corpus: Sequence[tuple[str, WatershedDataset]], variants: Sequence[str], seeds: Sequence[int],
                   base: ModelConfig, train_config: TrainConfig, *, heads: int | None = None,
                   mode: str = "IP-D", pool_size: int = 4, backend: str = "process",
                   train_fraction: float = 0.8) -> ComparisonTable:
    """Train every (variant, watershed, seed) cell and tabulate test NSE."""
    if not variants or not seeds:
        raise ConfigError("need at least one variant and one seed")
    datasets = split_by_watershed(corpus)
    wids = [ds.watershed_id for ds in datasets]
    keyed = []
    for c, variant in enumerate(variants):
        cfg = variant_config(base, variant, heads)
        for s_i, seed in enumerate(seeds):
            for job in replicate_models(cfg, datasets, seed, train_config, train_fraction):
                keyed.append(((c, wids.index(job.watershed_id), s_i), job))
    order = sorted(range(len(keyed)), key=lambda i: keyed[i][1].watershed_id)
    report = run_jobs([job for _, job in keyed], mode, pool_size, backend)
    cells = [[[None] * len(seeds) for _ in wids] for _ in variants]
    failures = []
    for i, result in zip(order, report.jobs):
        (c, w, s_i), _ = keyed[i]
        if result.status == "ok":
            cells[c][w][s_i] = result.test_nse
        else:
            log.warning("cell %s/%s/seed %s failed: %s", variants[c], wids[w], seeds[s_i], result.error)
            failures.append({"variant": variants[c], "watershed": wids[w], "seed": seeds[s_i],
                             "error": result.error})
    return ComparisonTable(list(variants), wids, list(seeds), cells, failures)


# --------------------------------------------------------------------- timing


@dataclass
class TimingRow:
    variant: str
    time_s: float
    time_ipd: float
    identical: bool
    max_nse_diff: float
    failed: list

    @property
    def speedup(self) -> float:
        return speedup(self.time_s, self.time_ipd)

    def to_dict(self) -> dict:
        return {"approach": VARIANT_LABELS[self.variant], "variant": self.variant, "time_s": self.time_s,
                "time_ipd": self.time_ipd, "speedup": self.speedup, "results_identical": self.identical,
                "max_nse_diff": self.max_nse_diff, "failed": list(self.failed)}


@dataclass
class TimingTable:
    rows: list
    pool_size: int
    n_jobs: int
    model_parallel: dict | None = None

    def to_dict(self) -> dict:
        d = {"pool_size": self.pool_size, "n_jobs": self.n_jobs, "rows": [r.to_dict() for r in self.rows]}
        if self.model_parallel is not None:
            d["model_parallel"] = self.model_parallel
        return d

    def to_text(self) -> str:
        return format_timing_table([(VARIANT_LABELS[r.variant], r.time_s, r.time_ipd, r.speedup) for r in self.rows])


def format_timing_table(rows: Sequence[tuple[str, float, float, float]]) -> str:
    """Text table with columns Approach | Time (S) | Time (IP-D) | Speedup.

    All times share one unit: hours when any of them reaches an hour, else seconds.
    """
    header = ("Approach", "Time (S)", "Time (IP-D)", "Speedup")
    hours = any(max(ts, ti) >= 3600 for _, ts, ti, _ in rows)

    def fmt(seconds: float) -> str:
        return f"{seconds / 3600:.2f} hours" if hours else f"{seconds:.2f} s"

    body = [(name, fmt(ts), fmt(ti), f"{sp:.1f}x") for name, ts, ti, sp in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    out = [sep, line(header), sep]
    out.extend(line(r) for r in body)
    out.append(sep)
    return "\n".join(out) + "\n"


def run_timing_table(corpus, variants: Sequence[str], pool_size: int, base: ModelConfig,
                     train_config: TrainConfig, *, seed: int = 0, heads: int | None = None,
                     backend: str = "process") -> TimingTable:
    """Run identical jobs in S and IP-D mode for each variant and compare."""
    datasets = split_by_watershed(corpus)
    rows = []
    for variant in variants:
        jobs = replicate_models(variant_config(base, variant, heads), datasets, seed, train_config)
        rep_s = run_jobs(jobs, "S", pool_size)
        rep_i = run_jobs(jobs, "IP-D", pool_size, backend)
        identical = all(a.params_digest == b.params_digest and a.status == b.status == "ok"
                        for a, b in zip(rep_s.jobs, rep_i.jobs))
        diffs = [abs(a.test_nse - b.test_nse) for a, b in zip(rep_s.jobs, rep_i.jobs)
                 if a.test_nse is not None and b.test_nse is not None]
        rows.append(TimingRow(variant, rep_s.total_wall_time, rep_i.total_wall_time, identical,
                              max(diffs, default=float("nan")), sorted(set(rep_s.failed) | set(rep_i.failed))))
    return TimingTable(rows, pool_size, len(datasets))


def model_parallel_benchmark(dataset: WatershedDataset, config: ModelConfig, train_config: TrainConfig,
                             n_samples: int | None = None) -> dict:
    """Wall time of sequential vs distributed execution of one training job."""
    samples = window_samples(dataset, config.lookback)
    if n_samples is not None:
        samples = samples[:n_samples]
    scaler = Scaler.fit(samples)
    samples = [scaler.transform(s) for s in samples]
    model = build_model(config, dataset.pixels)
    seq = run_sequential(model, samples, replace(train_config, executor="sequential"))
    dist = run_distributed(model, samples, replace(train_config, executor="distributed"))
    a, b = np.array(seq.step_losses), np.array(dist.step_losses)
    return {
        "heads": config.heads,
        "workers": train_config.workers or config.heads,
        "steps": len(a),
        "sequential_time": seq.wall_time,
        "distributed_time": dist.wall_time,
        "speedup": seq.wall_time / dist.wall_time,
        "max_rel_loss_diff": float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300))),
    }


# --------------------------------------------------------------- verification


def pixcon_recovery_score(model: DomSTModel, contribution) -> float:
    """Spearman rank correlation between learned Pix-Con weights and true contributions."""
    if not model.config.use_pixcon:
        raise ConfigError(f"{model.config.variant} has no Pix-Con block")
    if contribution is None:
        raise ValueError("no ground-truth contributions (dataset is not synthetic)")
    return spearman_rho(model.pixcon_weights(), np.asarray(contribution, dtype=np.float64))


def gradient_check(variant: str, n_pixels: int = 8, lookback: int = 16, heads: int = 2, seed: int = 42,
                   eps: float = 1e-5, residual: float = 0.01, base: ModelConfig | None = None) -> dict:
    """Finite-difference check of the full model's backward pass.

    The probe uses dense positive inputs so no ReLU pre-activation sits
    exactly at its kink, and a target ``residual`` away from the initial
    prediction to keep the loss small relative to parameter perturbations.
    """
    ds = generate_synthetic(GenConfig(n_pixels=n_pixels, n_days=lookback + 2, seed=seed))
    base = base or ModelConfig()
    cfg = replace(variant_config(base, variant, heads), lookback=lookback, seed=seed)
    model = build_model(cfg, ds.pixels)
    rng = np.random.default_rng(seed)
    X = rng.gamma(1.0, 1.0, size=(n_pixels, lookback))
    p = rng.gamma(1.0, 1.0, size=n_pixels)
    p0, _ = forward(model, Sample(X, p, 0.0, lookback))
    probe = Sample(X, p, p0 + residual, lookback)

    def loss():
        return nx.mse_loss(forward(model, probe)[0], probe.y)[0]

    pred, cache = forward(model, probe)
    _, g = nx.mse_loss(pred, probe.y)
    grads = backward(model, cache, float(g[0])).params
    worst, per_tensor = nx.finite_diff_check(loss, model.params, grads, eps, detail=True)
    return {"variant": variant, "n_pixels": n_pixels, "lookback": lookback, "heads": cfg.heads, "seed": seed,
            "eps": eps, "n_params": int(sum(a.size for a in model.params.values())),
            "max_rel_error": worst, "worst_tensor": max(per_tensor, key=per_tensor.get),
            "passed": worst < GRAD_TOL}
