"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line with the measured quantity; the lines are
printed in the "acceptance criteria" section at the end of the pytest run.
"""

import json
import os
import subprocess
import sys
import time
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import record, small_config
from domst.data import (
    GenConfig,
    Sample,
    WatershedDataset,
    generate_synthetic,
    load_watershed_dir,
    synthetic_corpus,
    window_samples,
    write_watershed_csv,
)
from domst.executors import TrainConfig, run_distributed, run_sequential
from domst.harness import (
    gradient_check,
    model_parallel_benchmark,
    pixcon_recovery_score,
    run_comparison,
    run_timing_table,
)
from domst.model import ModelConfig, build_model, forward
from domst.pipeline import Scaler, replicate_models, strip_timing, train_job
from domst.pixcon import PixelMeta, partition_pixels
from oracles import straight_line_forward

pytestmark = pytest.mark.acceptance
VARIANTS = ["singlehead", "singlehead_plus_p", "multihead_plus_p"]
MANY = settings(max_examples=1000, deadline=None, suppress_health_check=list(HealthCheck))


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    reports = [gradient_check(v, n_pixels=8, lookback=16, heads=2, seed=42, eps=1e-5) for v in VARIANTS]
    elapsed = time.perf_counter() - t0
    worst = max(r["max_rel_error"] for r in reports)
    ok = worst < 1e-4 and elapsed < 60
    record(1, "gradient correctness", ok, f"max rel error {worst:.2e} (< 1e-4) in {elapsed:.1f} s (< 60 s)")
    assert ok


def test_c02_executor_equivalence(small_dataset):
    t0 = time.perf_counter()
    raw = window_samples(small_dataset, 16)
    scaler = Scaler.fit(raw)
    samples = [scaler.transform(s) for s in raw][:60]
    cfg = TrainConfig(epochs=1, shuffle_seed=42)
    worst, steps = 0.0, []
    for heads in (1, 2, 4):
        model = build_model(small_config(heads=heads), small_dataset.pixels)
        a = np.array(run_sequential(model, samples, cfg).step_losses)
        b = np.array(run_distributed(model, samples, cfg).step_losses)
        worst = max(worst, float(np.max(np.abs(a - b) / np.abs(a))))
        steps.append(len(a))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and min(steps) >= 50 and elapsed < 120
    record(2, "executor equivalence", ok,
           f"max per-step rel loss diff {worst:.1e} over {min(steps)} steps, H in {{1,2,4}}, {elapsed:.1f} s")
    assert ok


def test_c03_oracle_forward():
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        n_pix = int(rng.integers(4, 10))
        heads = int(rng.integers(1, min(4, n_pix) + 1))
        meta = [PixelMeta(p, 0, p, float(rng.uniform(0, 20))) for p in range(n_pix)]
        model = build_model(small_config(heads=heads, seed=i), meta)
        for name, v in model.params.items():
            model.params[name] = rng.normal(0, 0.5, v.shape)
        X, p = rng.gamma(1.0, 1.0, (n_pix, 16)), rng.gamma(1.0, 1.0, n_pix)
        pred, _ = forward(model, Sample(X, p, 0.0, 0))
        worst = max(worst, abs(pred - straight_line_forward(model, X, p)))
    ok = worst < 1e-12
    record(3, "oracle forward equivalence", ok, f"max |diff| {worst:.1e} over 100 instances (< 1e-12)")
    assert ok


def test_c04_learning_sanity():
    t0 = time.perf_counter()
    ds = generate_synthetic(GenConfig(n_pixels=16, n_days=2000, noise_rel=0.05, seed=42))
    job = replicate_models(ModelConfig(variant="multihead_plus_p", lookback=30), [ds], 42,
                           TrainConfig(epochs=8, executor="distributed"))[0]
    result = train_job(job)
    elapsed = time.perf_counter() - t0
    ok = result.status == "ok" and result.test_nse >= 0.8 and elapsed < 300
    record(4, "learning sanity", ok, f"held-out NSE {result.test_nse:.4f} (>= 0.8) in {elapsed:.0f} s (< 300 s)")
    assert ok


FIG3_GEN = GenConfig(n_pixels=8, n_days=400, noise_rel=0.05)
FIG3_MODEL = ModelConfig(lookback=20)
FIG3_TRAIN = TrainConfig(epochs=4)


def test_c05_three_variant_comparison():
    corpus = synthetic_corpus(4, FIG3_GEN, seed=42)
    table = run_comparison(corpus, VARIANTS, [42, 43, 44, 45, 46], FIG3_MODEL, FIG3_TRAIN, heads=4, mode="S")
    med = [table.median(c) for c in range(3)]
    win = table.win_fraction(1, 0)
    ok = not table.failures and med[2] >= med[0] and win >= 0.6
    record(5, "three-variant comparison", ok,
           f"median NSE singlehead {med[0]:.3f}, singlehead(+P) {med[1]:.3f}, multihead(+P) {med[2]:.3f}; "
           f"singlehead(+P) >= singlehead on {win:.0%} of 20 cells (>= 60%)")
    assert ok


def test_c06_input_pipeline_speedup():
    corpus = synthetic_corpus(8, GenConfig(n_pixels=8, n_days=250), seed=6)
    table = run_timing_table(corpus, ["singlehead_plus_p", "multihead_plus_p"], 4, ModelConfig(lookback=20),
                             TrainConfig(epochs=2), seed=42, heads=4)
    identical = all(r.identical and r.max_nse_diff <= 1e-9 for r in table.rows)
    speed = [r.speedup for r in table.rows]
    ok = identical and min(speed) >= 2.5
    record(6, "IP-D speedup (8 jobs, pool 4)", ok,
           f"speedup {', '.join(f'{s:.1f}x' for s in speed)} (>= 2.5x), results identical: {identical}, "
           f"cpus available: {len(os.sched_getaffinity(0))}")
    assert identical
    assert min(speed) >= 2.5


def test_c07_model_parallel_speedup():
    ds = generate_synthetic(GenConfig(n_pixels=16, n_days=200, seed=7))
    heavy = ModelConfig(variant="multihead_plus_p", heads=4, conv_layers=((128, 5), (128, 5)), lookback=30, seed=7)
    res = model_parallel_benchmark(ds, heavy, TrainConfig(epochs=1, workers=4), n_samples=32)
    ok = res["speedup"] >= 1.5
    record(7, "model-parallel speedup (H=4, 4 workers)", ok,
           f"sequential {res['sequential_time']:.2f} s, distributed {res['distributed_time']:.2f} s, "
           f"speedup {res['speedup']:.2f}x (>= 1.5x), loss diff {res['max_rel_loss_diff']:.1e}, "
           f"cpus available: {len(os.sched_getaffinity(0))}")
    assert res["max_rel_loss_diff"] < 1e-9
    assert ok


PIXCON_DAYS = 300
PIXCON_EPOCHS = 200


def _recovery_run(flat_init: bool):
    ds = generate_synthetic(GenConfig(n_pixels=16, n_days=PIXCON_DAYS, noise_rel=0.0, seed=42))
    model = build_model(ModelConfig(lookback=30, seed=42), ds.pixels)
    if flat_init:
        for name in model.params:
            if "pixcon" in name:
                model.params[name][:] = 0.0
    raw = window_samples(ds, 30)
    scaler = Scaler.fit(raw)
    res = run_sequential(model, [scaler.transform(s) for s in raw], TrainConfig(epochs=PIXCON_EPOCHS, shuffle_seed=42))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return pixcon_recovery_score(res.model, ds.truth.contribution)


def test_c08_pixcon_recovery():
    rho = _recovery_run(flat_init=False)
    ok = rho >= 0.6
    record(8, "Pix-Con recovery", ok, f"Spearman rho {rho:.3f} (>= 0.6) after {PIXCON_EPOCHS} epochs, noiseless, seed 42")
    assert ok


def test_c08b_pixcon_recovery_from_flat_init():
    # informational: the distance-based init already carries the ordering
    rho = _recovery_run(flat_init=True)
    record(80, "Pix-Con recovery from all-equal init (informational)", True, f"Spearman rho {rho:.3f}")


# ----------------------------------------------------------- criterion 9

C9 = {"windowing": 0, "sample count": 0, "csv round trip": 0, "exact cover": 0}


def _dataset(rng, T, P):
    pixels = [PixelMeta(p, p // 3, p % 3, float(rng.uniform(0, 30))) for p in range(P)]
    precip = np.where(rng.random((T, P)) < 0.4, rng.gamma(0.8, 10, (T, P)), 0.0)
    return WatershedDataset("w", pixels, precip, rng.uniform(0, 100, T))


@MANY
@given(st.integers(2, 50), st.integers(1, 6), st.data())
def test_c09a_windowing_leakage_and_count(T, P, data):
    L = data.draw(st.integers(1, T - 1))
    ds = _dataset(np.random.default_rng(T * 131 + P * 7 + L), T, P)
    samples = window_samples(ds, L)
    assert len(samples) == T - L
    C9["sample count"] += 1
    for s in samples:
        assert s.X.shape == (P, L)
        np.testing.assert_array_equal(s.X, ds.precipitation[s.t - L : s.t].T)
        np.testing.assert_array_equal(s.p_target, ds.precipitation[s.t])
        assert s.y == ds.discharge[s.t]
    C9["windowing"] += 1


@MANY
@given(st.integers(1, 12), st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_c09b_csv_round_trip(tmp_path_factory, P, T, seed):
    ds = _dataset(np.random.default_rng(seed), T, P)
    back = load_watershed_dir(write_watershed_csv(ds, tmp_path_factory.mktemp("rt") / "w"))
    assert back.precipitation.tobytes() == ds.precipitation.tobytes()
    assert back.discharge.tobytes() == ds.discharge.tobytes()
    assert back.pixels == ds.pixels and back.dates == ds.dates
    C9["csv round trip"] += 1


@MANY
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=64), st.data())
def test_c09c_partition_exact_cover(distances, data):
    H = data.draw(st.integers(1, len(distances)))
    strategy = data.draw(st.sampled_from(["distance-quantile", "round-robin", "contiguous-block"]))
    meta = [PixelMeta(p, 0, p, d) for p, d in enumerate(distances)]
    part = partition_pixels(meta, H, strategy)
    members = [set(part.members(h)) for h in range(H)]
    assert sum(map(len, members)) == len(distances)
    assert set().union(*members) == set(range(len(distances)))
    assert all(members)
    C9["exact cover"] += 1


def test_c09z_data_integrity_summary():
    ok = all(n >= 1000 for n in C9.values())
    record(9, "data integrity properties", ok,
           ", ".join(f"{k} {v} cases" for k, v in C9.items()) + " (>= 1000 each, all passed)")
    assert ok


# ---------------------------------------------------------- criterion 10


def _cli(args, out):
    cmd = [sys.executable, "-m", "domst.cli", *args, "--out", str(out)]
    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    return {p.name: strip_timing(json.loads(p.read_text())) for p in sorted(out.glob("*.json"))
            if p.name != "checkpoint.json"} | {
        "checkpoint": (out / "checkpoint.json").read_bytes() if (out / "checkpoint.json").exists() else None}


def test_c10_cli_determinism(tmp_path):
    small = ["--pixels", "6", "--days", "120", "--lookback", "16", "--hidden", "8", "--epochs", "2"]
    commands = {
        "train": ["train", "--seed", "42", "--heads", "2", "--dump-partition", *small],
        "compare": ["compare", "--seed", "42", "--watersheds", "2", "--seeds", "1,2", "--heads", "2", "--pool", "2",
                    *small],
        "bench": ["bench", "--seed", "42", "--watersheds", "2", "--variants", "singlehead", "--pool", "2", *small],
    }
    same = {}
    for name, args in commands.items():
        a = _cli(args, tmp_path / f"{name}-1")
        b = _cli(args, tmp_path / f"{name}-2")
        same[name] = a == b
    ok = all(same.values())
    record(10, "CLI determinism", ok, ", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in same.items())
           + " (timing fields excluded)")
    assert ok
