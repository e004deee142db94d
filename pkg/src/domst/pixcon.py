"""Pixel-contribution weights and pixel-to-head partitioning."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .errors import ConfigError, ShapeError

WEIGHT_CLAMP = 1e-4
STRATEGIES = ("distance-quantile", "round-robin", "contiguous-block")
REBALANCE_RATIO = 1.25


@dataclass(frozen=True)
class PixelMeta:
    pixel_id: int
    row: int
    col: int
    distance_km: float

    def __post_init__(self):
        if not np.isfinite(self.distance_km) or self.distance_km < 0:
            raise ValueError(f"pixel {self.pixel_id}: distance_km must be finite and >= 0, "
                             f"got {self.distance_km}")


@dataclass
class PixConParams:
    logits: np.ndarray  # [P]

    @property
    def weights(self) -> np.ndarray:
        return expit(self.logits)


def default_tau(distances) -> float:
    """Median distance, falling back to 1 km when the median is zero."""
    tau = float(np.median(np.asarray(distances, dtype=np.float64)))
    return tau if tau > 0 else 1.0


def init_pixcon(distances, tau: float) -> PixConParams:
    d = np.asarray(distances, dtype=np.float64)
    if tau <= 0 or not np.isfinite(tau):
        raise ValueError(f"tau must be positive, got {tau}")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite and non-negative")
    w0 = np.clip(np.exp(-d / tau), WEIGHT_CLAMP, 1.0 - WEIGHT_CLAMP)
    return PixConParams(logit(w0))


def pixcon_apply(x, params: PixConParams):
    x = np.asarray(x, dtype=np.float64)
    w = params.weights
    if x.ndim != 2 or x.shape[0] != w.shape[0]:
        raise ShapeError("pixcon input", (w.shape[0], "L"), x.shape)
    return w[:, None] * x, (x, w)


def pixcon_backward(cache, grad_out):
    x, w = cache
    if grad_out.shape != x.shape:
        raise ShapeError("pixcon grad", x.shape, grad_out.shape)
    grad_x = w[:, None] * grad_out
    grad_logits = w * (1.0 - w) * np.einsum("pt,pt->p", x, grad_out)
    return grad_x, grad_logits


# ----------------------------------------------------------------- partitioning


@dataclass(frozen=True)
class PixelPartition:
    """Exact cover of pixel ids ``0..P-1`` by ``n_heads`` heads.

    ``order`` is the strategy's pixel ordering; rebalancing moves pixels at
    the boundary of a head within that ordering.
    """

    assignment: tuple[int, ...]
    n_heads: int
    order: tuple[int, ...]
    strategy: str = "distance-quantile"

    @property
    def n_pixels(self) -> int:
        return len(self.assignment)

    def members(self, head: int) -> list[int]:
        """Pixel ids of ``head`` in ascending id order."""
        return [p for p, h in enumerate(self.assignment) if h == head]

    def sizes(self) -> list[int]:
        return [self.assignment.count(h) for h in range(self.n_heads)]

    def validate(self) -> None:
        if sorted(self.order) != list(range(self.n_pixels)):
            raise ValueError("partition order is not a permutation of pixel ids")
        if any(not 0 <= h < self.n_heads for h in self.assignment):
            raise ValueError("partition assigns a pixel to an unknown head")
        if self.n_pixels >= self.n_heads and min(self.sizes()) < 1:
            raise ValueError("partition leaves a head empty")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_heads": self.n_heads,
            "order": list(self.order),
            "assignment": {str(p): h for p, h in enumerate(self.assignment)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PixelPartition":
        assign = d["assignment"]
        n = len(assign)
        return cls(tuple(int(assign[str(p)]) for p in range(n)), int(d["n_heads"]),
                   tuple(int(p) for p in d["order"]), d.get("strategy", "distance-quantile"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _chunk_sizes(n: int, k: int) -> list[int]:
    base, extra = divmod(n, k)
    return [base + (1 if h < extra else 0) for h in range(k)]


def partition_pixels(meta: Sequence[PixelMeta], n_heads: int,
                     strategy: str = "distance-quantile") -> PixelPartition:
    n = len(meta)
    if n_heads < 1:
        raise ConfigError(f"need at least one head, got {n_heads}")
    if n_heads > n:
        raise ConfigError(f"{n_heads} heads for {n} pixels: every head needs a pixel")
    ids = sorted(m.pixel_id for m in meta)
    if ids != list(range(n)):
        raise ConfigError("pixel ids must be exactly 0..P-1")
    by_id = {m.pixel_id: m for m in meta}
    assignment = [0] * n
    if strategy == "distance-quantile":
        order = sorted(range(n), key=lambda p: (by_id[p].distance_km, p))
    elif strategy in ("round-robin", "contiguous-block"):
        order = list(range(n))
    else:
        raise ConfigError(f"unknown partition strategy {strategy!r}; choose from {STRATEGIES}")

    if strategy == "round-robin":
        for pos, p in enumerate(order):
            assignment[p] = pos % n_heads
    else:
        pos = 0
        for h, size in enumerate(_chunk_sizes(n, n_heads)):
            for p in order[pos : pos + size]:
                assignment[p] = h
            pos += size
    return PixelPartition(tuple(assignment), n_heads, tuple(order), strategy)


def rebalance_partitions(partition: PixelPartition, per_head_step_times,
                         ratio: float = REBALANCE_RATIO) -> PixelPartition:
    """Move one boundary pixel from the slowest head to the fastest one.

    No-op unless slowest/fastest exceeds ``ratio``, and when the move would
    leave the slowest head empty.
    """
    times = np.asarray(per_head_step_times, dtype=np.float64)
    if times.shape != (partition.n_heads,):
        raise ShapeError("rebalance timings", (partition.n_heads,), times.shape)
    if not np.all(np.isfinite(times)) or np.any(times <= 0):
        raise ValueError("per-head step times must be finite and positive")
    slow = int(np.argmax(times))
    fast = int(np.argmin(times))
    if slow == fast or times[slow] / times[fast] <= ratio:
        return partition
    in_slow = [p for p in partition.order if partition.assignment[p] == slow]
    if len(in_slow) <= 1:
        return partition
    moved = in_slow[-1] if slow < fast else in_slow[0]
    assignment = list(partition.assignment)
    assignment[moved] = fast
    return PixelPartition(tuple(assignment), partition.n_heads, partition.order, partition.strategy)


def moved_pixels(old: PixelPartition, new: PixelPartition) -> list[tuple[int, int, int]]:
    """``(pixel, from_head, to_head)`` for every pixel whose head changed."""
    return [(p, a, b) for p, (a, b) in enumerate(zip(old.assignment, new.assignment)) if a != b]
