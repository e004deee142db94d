"""Watershed datasets: synthetic generation, CSV ingestion, windowing.

Units are fixed: precipitation in mm/day, distances in km, discharge in m^3/s.

CSV layout for one watershed::

    precip.csv      date,pixel_0,...,pixel_{P-1}
    meta.csv        pixel_id,row,col,distance_km
    discharge.csv   date,discharge_cms
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .pixcon import PixelMeta

PRECIP_FILE = "precip.csv"
META_FILE = "meta.csv"
DISCHARGE_FILE = "discharge.csv"
META_HEADER = ["pixel_id", "row", "col", "distance_km"]
DISCHARGE_HEADER = ["date", "discharge_cms"]


@dataclass(frozen=True)
class SyntheticTruth:
    contribution: np.ndarray  # c_p
    unit_hydrograph: np.ndarray
    base_flow: float


@dataclass
class WatershedDataset:
    watershed_id: str
    pixels: list  # [P] PixelMeta, ordered by pixel_id
    precipitation: np.ndarray  # [T, P]
    discharge: np.ndarray  # [T]
    dates: list = field(default_factory=list)
    truth: SyntheticTruth | None = None

    def __post_init__(self):
        self.precipitation = np.asarray(self.precipitation, dtype=np.float64)
        self.discharge = np.asarray(self.discharge, dtype=np.float64)
        t, p = self.precipitation.shape
        if len(self.pixels) != p:
            raise DataError(f"{len(self.pixels)} pixel metas for {p} precipitation columns")
        if self.discharge.shape != (t,):
            raise DataError(f"discharge length {self.discharge.shape} != {t} precipitation rows")
        if not self.dates:
            self.dates = [dt.date(2000, 1, 1) + dt.timedelta(days=i) for i in range(t)]
        if len(self.dates) != t:
            raise DataError("dates do not match the number of rows")
        if not (np.all(np.isfinite(self.precipitation)) and np.all(np.isfinite(self.discharge))):
            raise DataError("missing or non-finite values")
        if np.any(self.precipitation < 0) or np.any(self.discharge < 0):
            raise DataError("negative precipitation or discharge")

    @property
    def n_pixels(self) -> int:
        return self.precipitation.shape[1]

    @property
    def n_days(self) -> int:
        return self.precipitation.shape[0]

    @property
    def distances(self) -> np.ndarray:
        return np.array([m.distance_km for m in self.pixels])


@dataclass(frozen=True)
class Sample:
    X: np.ndarray  # [P, L] days t-L .. t-1
    p_target: np.ndarray  # [P] day t
    y: float
    t: int


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class GenConfig:
    n_pixels: int = 16
    n_days: int = 2000
    grid: tuple | None = None  # (rows, cols); defaults to a near-square grid
    tau_km: float = 5.0
    max_distance_km: float = 20.0
    unit_hydrograph: tuple = (0.5, 0.3, 0.2)
    base_flow: float = 10.0
    rain_rate: float = 0.25  # mean storm days per day
    seasonal_amplitude: float = 0.6
    pixel_coverage: float = 0.7  # chance a pixel is wet on a storm day
    gamma_shape: float = 0.8
    gamma_scale: float = 12.0  # mm/day
    noise_rel: float = 0.05
    seed: int = 0
    watershed_id: str = "ws00"

    def __post_init__(self):
        h = np.asarray(self.unit_hydrograph, dtype=np.float64)
        if h.ndim != 1 or h.size == 0 or h.sum() <= 0 or np.any(h < 0):
            raise ConfigError("unit hydrograph must be non-negative with positive sum")
        if not 0 <= self.noise_rel < 1:
            raise ConfigError("noise_rel must be in [0, 1)")
        if self.n_pixels < 1 or self.n_days < 2:
            raise ConfigError("need n_pixels >= 1 and n_days >= 2")
        if self.tau_km <= 0 or self.max_distance_km < 0 or self.base_flow < 0:
            raise ConfigError("tau_km must be positive, distances and base flow non-negative")
        if self.rain_rate < 0 or not 0 <= self.pixel_coverage <= 1:
            raise ConfigError("invalid rain process parameters")
        if self.grid is not None and self.grid[0] * self.grid[1] < self.n_pixels:
            raise ConfigError(f"grid {self.grid} too small for {self.n_pixels} pixels")

    def grid_shape(self) -> tuple[int, int]:
        if self.grid is not None:
            return int(self.grid[0]), int(self.grid[1])
        cols = math.ceil(math.sqrt(self.n_pixels))
        return math.ceil(self.n_pixels / cols), cols


def route_discharge(precip: np.ndarray, contribution, unit_hydrograph, base_flow: float) -> np.ndarray:
    """Noise-free linear routing ``b + sum_p c_p sum_k h_k x[t-k, p]``."""
    precip = np.asarray(precip, dtype=np.float64)
    c = np.asarray(contribution, dtype=np.float64)
    h = np.asarray(unit_hydrograph, dtype=np.float64)
    forcing = precip @ c  # [T]
    routed = np.zeros_like(forcing)
    for k, hk in enumerate(h):
        if k == 0:
            routed += hk * forcing
        else:
            routed[k:] += hk * forcing[:-k]
    return base_flow + routed


def _rainfall(gen: GenConfig, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(gen.n_days)
    intensity = gen.rain_rate * (1.0 + gen.seasonal_amplitude * np.sin(2 * np.pi * t / 365.25))
    storm = rng.random(gen.n_days) < 1.0 - np.exp(-np.clip(intensity, 0.0, None))
    wet = (rng.random((gen.n_days, gen.n_pixels)) < gen.pixel_coverage) & storm[:, None]
    depth = rng.gamma(gen.gamma_shape, gen.gamma_scale, size=(gen.n_days, gen.n_pixels))
    return np.where(wet, depth, 0.0)


def generate_synthetic(gen: GenConfig) -> WatershedDataset:
    rng = np.random.default_rng(np.random.SeedSequence(gen.seed))
    rows, cols = gen.grid_shape()
    dist = rng.uniform(0.0, gen.max_distance_km, size=gen.n_pixels)
    pixels = [PixelMeta(p, p // cols, p % cols, float(dist[p])) for p in range(gen.n_pixels)]
    contribution = np.exp(-dist / gen.tau_km)
    precip = _rainfall(gen, rng)
    clean = route_discharge(precip, contribution, gen.unit_hydrograph, gen.base_flow)
    signal_std = float(np.std(clean - gen.base_flow))
    noise = rng.normal(0.0, 1.0, size=gen.n_days) * (gen.noise_rel * signal_std)
    discharge = np.maximum(clean + noise, 0.0)
    truth = SyntheticTruth(contribution, np.asarray(gen.unit_hydrograph, dtype=np.float64), gen.base_flow)
    return WatershedDataset(gen.watershed_id, pixels, precip, discharge, truth=truth)


def synthetic_corpus(n_watersheds: int, base: GenConfig, seed: int = 0) -> list[tuple[str, WatershedDataset]]:
    """``n_watersheds`` independent watersheds with ids ``ws00, ws01, ...``."""
    out = []
    for i in range(n_watersheds):
        wid = f"ws{i:02d}"
        gen = GenConfig(**{**base.__dict__, "seed": seed * 1000 + i, "watershed_id": wid})
        out.append((wid, generate_synthetic(gen)))
    return out


# ------------------------------------------------------------------------ CSV


def write_watershed_csv(ds: WatershedDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / PRECIP_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date"] + [f"pixel_{p}" for p in range(ds.n_pixels)])
        for d, row in zip(ds.dates, ds.precipitation):
            w.writerow([d.isoformat()] + [repr(float(v)) for v in row])
    with open(directory / META_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(META_HEADER)
        for m in ds.pixels:
            w.writerow([m.pixel_id, m.row, m.col, repr(float(m.distance_km))])
    with open(directory / DISCHARGE_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DISCHARGE_HEADER)
        for d, q in zip(ds.dates, ds.discharge):
            w.writerow([d.isoformat(), repr(float(q))])
    return directory


def _parse_float(text: str, path, line: int, column: str, allow_negative=False) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"cannot parse {text!r} as a number", path, line, column) from None
    if not math.isfinite(v):
        raise DataError("missing or non-finite value", path, line, column)
    if v < 0 and not allow_negative:
        raise DataError(f"negative value {v}", path, line, column)
    return v


def _parse_date(text: str, path, line: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"bad ISO-8601 date {text!r}", path, line, "date") from None


def _read_rows(path: Path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read: {exc.strerror}", path) from None
    if not rows:
        raise DataError("empty file", path, 1)
    return rows


def _check_dates(dates, path):
    for i in range(1, len(dates)):
        if dates[i] <= dates[i - 1]:
            raise DataError(f"date {dates[i].isoformat()} not after {dates[i - 1].isoformat()}", path, i + 2, "date")


def load_watershed_csv(precip_path, meta_path, discharge_path, watershed_id: str | None = None) -> WatershedDataset:
    precip_path, meta_path, discharge_path = Path(precip_path), Path(meta_path), Path(discharge_path)

    rows = _read_rows(meta_path)
    if rows[0] != META_HEADER:
        raise DataError(f"header must be {','.join(META_HEADER)}", meta_path, 1)
    pixels = []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise DataError(f"expected 4 fields, got {len(row)}", meta_path, ln)
        try:
            pid, r, c = int(row[0]), int(row[1]), int(row[2])
        except ValueError:
            raise DataError("pixel_id/row/col must be integers", meta_path, ln) from None
        pixels.append(PixelMeta(pid, r, c, _parse_float(row[3], meta_path, ln, "distance_km")))
    pixels.sort(key=lambda m: m.pixel_id)
    n_pix = len(pixels)
    if [m.pixel_id for m in pixels] != list(range(n_pix)):
        raise DataError("pixel ids must be exactly 0..P-1", meta_path)

    rows = _read_rows(precip_path)
    header = ["date"] + [f"pixel_{p}" for p in range(n_pix)]
    if rows[0] != header:
        raise DataError(f"header must be date,pixel_0..pixel_{n_pix - 1}", precip_path, 1)
    dates, precip = [], []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != n_pix + 1:
            raise DataError(f"expected {n_pix + 1} fields, got {len(row)}", precip_path, ln)
        dates.append(_parse_date(row[0], precip_path, ln))
        precip.append([_parse_float(v, precip_path, ln, header[j + 1]) for j, v in enumerate(row[1:])])
    _check_dates(dates, precip_path)

    rows = _read_rows(discharge_path)
    if rows[0] != DISCHARGE_HEADER:
        raise DataError(f"header must be {','.join(DISCHARGE_HEADER)}", discharge_path, 1)
    q_dates, q = [], []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise DataError(f"expected 2 fields, got {len(row)}", discharge_path, ln)
        q_dates.append(_parse_date(row[0], discharge_path, ln))
        q.append(_parse_float(row[1], discharge_path, ln, "discharge_cms"))
    _check_dates(q_dates, discharge_path)

    q_set = set(q_dates)
    for ln, d in enumerate(dates, start=2):
        if d not in q_set:
            raise DataError(f"date {d.isoformat()} missing from discharge", discharge_path, None, "date")
    p_set = set(dates)
    for ln, d in enumerate(q_dates, start=2):
        if d not in p_set:
            raise DataError(f"date {d.isoformat()} missing from precipitation", precip_path, None, "date")

    wid = watershed_id if watershed_id is not None else precip_path.parent.name
    return WatershedDataset(wid, pixels, np.array(precip, dtype=np.float64).reshape(len(dates), n_pix),
                            np.array(q, dtype=np.float64), dates)


def load_watershed_dir(directory, watershed_id: str | None = None) -> WatershedDataset:
    directory = Path(directory)
    return load_watershed_csv(directory / PRECIP_FILE, directory / META_FILE, directory / DISCHARGE_FILE,
                              watershed_id if watershed_id is not None else directory.name)


# ------------------------------------------------------------------ windowing


def window_samples(ds: WatershedDataset, lookback: int) -> list[Sample]:
    if lookback < 1:
        raise ValueError("lookback must be >= 1")
    if ds.n_days <= lookback:
        raise DataError(f"{ds.n_days} days is too short for lookback {lookback}; need at least {lookback + 1}")
    xt = np.ascontiguousarray(ds.precipitation.T)  # [P, T]
    return [
        Sample(xt[:, t - lookback : t], ds.precipitation[t], float(ds.discharge[t]), t)
        for t in range(lookback, ds.n_days)
    ]


def chrono_split(samples: Sequence, train_fraction: float = 0.8):
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    n_train = math.ceil(round(len(samples) * train_fraction, 9))
    train, test = list(samples[:n_train]), list(samples[n_train:])
    if not train or not test:
        raise ValueError(f"split of {len(samples)} samples at {train_fraction} leaves a side empty")
    return train, test
