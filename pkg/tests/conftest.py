import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from domst.data import GenConfig, generate_synthetic, window_samples
from domst.pipeline import Scaler

np.seterr(all="raise", under="ignore")

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("fast", max_examples=10, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(GenConfig(n_pixels=8, n_days=120, seed=42))


@pytest.fixture(scope="session")
def scaled_samples(small_dataset):
    raw = window_samples(small_dataset, 16)
    scaler = Scaler.fit(raw)
    return [scaler.transform(s) for s in raw]


def small_config(variant="multihead_plus_p", heads=None, **kw):
    from domst.model import ConvSpec, ModelConfig

    base = dict(conv_layers=(ConvSpec(4, 3), ConvSpec(6, 3)), lstm_hidden=8, dense_sizes=(8, 1), lookback=16, seed=42)
    base.update(kw)
    if variant == "multihead_plus_p":
        base["heads"] = heads if heads is not None else 2
    return ModelConfig(variant=variant, **base)


# acceptance criteria report one line each; printed after the run
ACCEPTANCE: dict = {}


def record(number: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {name} -- {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
