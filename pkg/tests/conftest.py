import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uncalib.telemetry import SensorGrid, SensorKind, TimeSeries

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_grid(n=3, kind="temperature", cadence=1, prefix="s"):
    return SensorGrid(tuple(f"{prefix}{i}" for i in range(n)), SensorKind.default(kind), cadence)


def noisy_series(n_frames=400, n=3, seed=0, start=0, base=21.0, noise=0.05):
    rng = np.random.default_rng(seed)
    grid = make_grid(n)
    t = np.arange(n_frames)
    s = base + 0.5 * np.sin(2 * np.pi * t / 200.0)
    values = s[:, None] + rng.normal(0.0, noise, (n_frames, n)) + np.linspace(-0.2, 0.2, n)
    return TimeSeries(grid, start + t, values)


@pytest.fixture
def grid3():
    return make_grid(3)


# one line per acceptance criterion, repeated at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
