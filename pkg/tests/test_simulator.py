import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uncalib import simulator as sm
from uncalib.errors import ConfigurationError
from uncalib.telemetry import write_csv

from conftest import make_grid


def spec(**kw):
    base = dict(grid=make_grid(4), duration_minutes=3000, seed=1, setpoint_base=21.0)
    base.update(kw)
    return sm.EnvironmentSpec(**base)


def test_quiet_environment_reads_base():
    s = sm.generate_environment(spec())
    assert np.all(s.values == 21.0)


def test_environment_is_deterministic():
    kw = dict(daily_amplitude=0.8, slow_drift_amplitude=0.5, offsets=(0.1, -0.2, 0.0, 0.3), noise_std=0.05)
    assert write_csv(sm.generate_environment(spec(**kw))) == write_csv(sm.generate_environment(spec(**kw)))
    assert not sm.generate_environment(spec(**kw)).equals(sm.generate_environment(spec(seed=2, **kw)))


def test_noise_moments():
    gains = (0.9, 1.0, 1.1, 1.05)
    offsets = (0.3, -0.1, 0.0, 0.2)
    noise = (0.05, 0.1, 0.3, 0.02)
    sp = spec(duration_minutes=100_000, daily_amplitude=0.8, slow_drift_amplitude=0.6, gains=gains,
              offsets=offsets, noise_std=noise)
    s = sm.generate_environment(sp)
    resid = s.values - (sm.latent_setpoint(sp)[:, None] * np.array(gains) + np.array(offsets))
    assert np.all(np.abs(resid.std(axis=0, ddof=1) / np.array(noise) - 1) < 0.02)


def test_gain_range_enforced():
    with pytest.raises(ConfigurationError):
        spec(gains=1.3)


@given(st.integers(0, 2**31), st.floats(0.01, 10.0), st.integers(1, 20000))
def test_bounded_walk_stays_in_band(seed, amplitude, n):
    y = sm.bounded_walk(np.random.default_rng(seed), n, amplitude)
    assert np.all(np.abs(y) <= amplitude * (1 + 1e-12))


def test_setpoint_steps():
    sp = spec(setpoint_steps=((0, -3.0), (1000, 3.0)))
    s = sm.latent_setpoint(sp)
    assert np.all(s[:1000] == 18.0) and np.all(s[1000:] == 24.0)


# -- drifts ---------------------------------------------------------------------------

def _flat(n=400):
    return sm.generate_environment(spec(duration_minutes=n))


def test_linear_midpoint():
    s = sm.inject_drift(_flat(), sm.DriftSpec(("s1",), "linear", 100, 0.5, 100))
    d = s.values[:, 1] - 21.0
    assert d[150] == pytest.approx(0.25)
    assert np.all(d[:100] == 0) and np.allclose(d[200:], 0.5)
    assert np.all(s.values[:, 0] == 21.0)


def test_step_offset_is_exact():
    s = sm.inject_drift(_flat(), sm.DriftSpec(("s2",), "step_offset", 50, 3.0))
    d = s.values[:, 2] - 21.0
    assert np.all(d[:50] == 0) and np.all(d[50:] == 3.0)


@pytest.mark.parametrize("kind", sm.DRIFT_KINDS[:3])
def test_profile_endpoints(kind):
    assert sm.drift_profile(kind, 0.0) == 0.0
    assert sm.drift_profile(kind, 1.0) == pytest.approx(1.0, abs=1e-15)


@given(st.sampled_from(sm.DRIFT_KINDS), st.lists(st.floats(0, 1.5), min_size=2, max_size=50))
def test_profiles_are_monotone_and_bounded(kind, u):
    u = np.sort(u)
    p = sm.drift_profile(kind, u)
    assert np.all(np.diff(p) >= -1e-15)
    assert np.all((p >= 0) & (p <= 1 + 1e-15))


def test_drift_validation():
    with pytest.raises(ConfigurationError):
        sm.DriftSpec(("s1",), "sigmoid", 0, 1.0)
    with pytest.raises(ConfigurationError):
        sm.inject_drift(_flat(100), sm.DriftSpec(("s1",), "linear", 50, 1.0, 100))
    with pytest.raises(ConfigurationError):
        sm.inject_drift(_flat(100), sm.DriftSpec(("zz",), "linear", 0, 1.0, 10))


# -- scenarios --------------------------------------------------------------------------

SCALE = 0.02


def test_detect_temperature_bundle():
    b = sm.make_experiment("detect_temperature", 7, SCALE)
    assert b.kind == "temperature"
    assert list(b.splits) == ["train", "val", "test"]
    assert all(s.grid.size == 17 for s in b.splits.values())
    (d,) = b.drifts["test"]
    assert d.kind == "linear" and d.magnitude == 0.5 and len(d.target_sensor_ids) == 1
    lens = [len(s) for s in b.splits.values()]
    assert lens == [round(90 * 1440 * SCALE), round(15 * 1440 * SCALE), round(30 * 1440 * SCALE)]
    m = np.concatenate([s.minutes for s in b.splits.values()])
    assert np.all(np.diff(m) == 1)


def test_pressure_grid_has_steps():
    b = sm.make_experiment("detect_pressure", 3, 1.0)
    assert b.splits["train"].grid.size == 24
    assert b.drifts["test"][0].magnitude == 1.5


def test_add_sensors_bundle():
    b = sm.make_experiment("add_sensors", 1, SCALE)
    assert b.splits["train"].grid.size == 13 and b.splits["retrain"].grid.size == 17
    assert b.splits["retrain"].grid.sensor_ids[:13] == b.splits["train"].grid.sensor_ids
    assert b.drifts["test"][0].target_sensor_ids[0] not in b.splits["train"].grid.sensor_ids


def test_offset_all_bundle():
    b = sm.make_experiment("offset_all", 2, SCALE)
    (d,) = b.drifts["test"]
    assert d.kind == "step_offset" and set(d.target_sensor_ids) == set(b.splits["test"].grid.sensor_ids)
    assert 0 < d.magnitude <= float(b.info["train_setpoint_std"])
    assert b.expect["events"] == "none"


def test_recalib_and_new_environment_sizes():
    r = sm.make_experiment("recalib_single", 4, 1.0)
    assert len(r.splits["retrain"]) == 10080
    n = sm.make_experiment("new_environment", 4, 0.1)
    assert len(n.splits["retrain"]) == 8000
    assert n.splits["retrain"].minutes[0] > n.splits["val"].minutes[-1]


def test_unknown_scenario_lists_valid_names():
    with pytest.raises(ConfigurationError) as info:
        sm.make_experiment("nope", 0)
    assert all(name in str(info.value) for name in sm.SCENARIOS)


def test_bundle_files_are_deterministic(tmp_path):
    for run in ("a", "b"):
        sm.write_bundle(sm.make_experiment("detect_humidity", 5, SCALE), tmp_path / run)
    for name in ("train.csv", "val.csv", "test.csv", "manifest.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
