import functools

import numpy as np
import pytest

from vutsim.config import ModelConfig
from vutsim.scenario import slice_frames, to_local_frame
from vutsim.synth import generate_synthetic_scenario


TINY = ModelConfig(d_model=8, n_heads=2, n_modes=3, n_lanes=2, n_lane_points=6, n_crosswalks=2,
                   n_crosswalk_points=4)


@functools.lru_cache(maxsize=None)
def synthetic(kind: str, seed: int = 0):
    return generate_synthetic_scenario(kind, seed)


@pytest.fixture(scope="session")
def intersection():
    return synthetic("intersection", 0)


@pytest.fixture(scope="session")
def car_following():
    return synthetic("car_following", 0)


@pytest.fixture(scope="session")
def local_frames(intersection):
    return [to_local_frame(f) for f in slice_frames(intersection)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fill_padding(inputs, rng, scale=1e3):
    """Copy of ``inputs`` with every masked entry replaced by random finite garbage; masks untouched."""
    import dataclasses

    hist = inputs.agent_history.copy()
    step_pad = ~(inputs.agent_mask[:, None] & (hist[..., 7] > 0.5))
    noise = rng.uniform(-scale, scale, hist.shape)
    noise[..., 7] = hist[..., 7]
    hist[step_pad] = noise[step_pad]
    lanes = np.where(inputs.lane_mask[..., None], inputs.lanes, rng.uniform(-scale, scale, inputs.lanes.shape))
    cws = np.where(inputs.crosswalk_mask[..., None], inputs.crosswalks,
                   rng.uniform(-scale, scale, inputs.crosswalks.shape))
    return dataclasses.replace(inputs, agent_history=hist, lanes=lanes, crosswalks=cws)


def max_output_delta(a, b):
    return max(float((a.trajectories - b.trajectories).abs().max()), float((a.scores - b.scores).abs().max()))


# acceptance criteria report one line each in the terminal summary
ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    marker = "test_acceptance.py::test_criterion_"
    if report.when == "call" and marker in report.nodeid:
        n = int(report.nodeid.split(marker)[1].split("_")[0])
        ACCEPTANCE[n] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {ACCEPTANCE[n]}")
