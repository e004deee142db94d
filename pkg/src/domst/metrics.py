"""Evaluation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import spearmanr

from .errors import ShapeError


@dataclass(frozen=True)
class NseResult:
    nse: float
    n: int
    obs_mean: float
    obs_var: float

    def to_dict(self) -> dict:
        return asdict(self)


def nse(sim, obs) -> NseResult:
    """Nash-Sutcliffe efficiency, ``1 - sum((obs-sim)^2) / sum((obs-mean(obs))^2)``."""
    sim = np.asarray(sim, dtype=np.float64).reshape(-1)
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if sim.shape != obs.shape:
        raise ShapeError("nse", obs.shape, sim.shape, "sim/obs length mismatch")
    if obs.size < 2:
        raise ValueError("NSE needs at least two observations")
    mean = float(obs.mean())
    denom = float(np.sum((obs - mean) ** 2))
    if denom <= 0:
        raise ValueError("NSE undefined: zero observed variance")
    num = float(np.sum((obs - sim) ** 2))
    return NseResult(1.0 - num / denom, int(obs.size), mean, denom / obs.size)


def relative_improvement(new: float, old: float) -> float:
    """``(new - old) / |old|``; the base used for "percent improvement" figures."""
    if old == 0:
        return float("inf") if new > 0 else (float("-inf") if new < 0 else 0.0)
    return (new - old) / abs(old)


def spearman_rho(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("spearman", a.shape, b.shape)
    if a.size < 2:
        raise ValueError("rank correlation needs at least two values")
    return float(spearmanr(a, b).statistic)
