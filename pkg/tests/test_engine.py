import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uncalib import detector as det
from uncalib import engine as eng
from uncalib.errors import ConfigurationError, InputError
from uncalib.mlp import TrainConfig
from uncalib.telemetry import TimeSeries

from conftest import make_grid, noisy_series

DCFG = det.DetectorConfig(window_minutes=10, density_threshold=0.8, persistence_minutes=30)
N = 8
FAST = TrainConfig(learning_rate=3e-3, batch_size=64, max_epochs=8, patience=3)


@pytest.fixture(scope="module")
def system():
    return fit()


def fit():
    return eng.fit_system(noisy_series(1200, N, seed=1, noise=0.3), noisy_series(300, N, seed=2, start=1200, noise=0.3),
                          seed=4, train_cfg=FAST, hidden=(16, 16))


def stream(n=3000, seed=3, step_at=1500, step=1.0):
    s = noisy_series(n, N, seed=seed, start=1500, noise=0.3)
    keep = np.ones(n, bool)
    keep[700:760] = False  # a one-hour outage
    values = s.values.copy()
    values[step_at:, 1] += step
    return TimeSeries(s.grid, s.minutes[keep], values[keep])


def run_chunked(system, s, bounds):
    e = eng.StreamEngine(system, s.grid, DCFG)
    out = []
    for a, b in zip([0, *bounds], [*bounds, len(s)]):
        out += e.push(s.minutes[a:b], s.values[a:b], s.mask[a:b])
    return out + e.flush()


def test_step_is_detected_once(system):
    s = stream()
    records = eng.detect_series(system, s, DCFG)
    events = [r for r in records if r["type"] == "event"]
    assert [(e["sensor_id"], e["direction"]) for e in events] == [("s1", "high")]
    assert events[0]["confirmed_at"] >= "1970-01-02"


def test_clean_stream_is_silent(system):
    records = eng.detect_series(system, stream(step=0.0), DCFG)
    assert not [r for r in records if r["type"] == "event"]


def test_status_records_cover_every_frame(system):
    s = stream()
    status = [r for r in eng.detect_series(system, s, DCFG) if r["type"] == "status"]
    assert sum(r["frames"] for r in status) == len(s)
    assert len(status) == len(np.unique(s.minutes // 1440))


@settings(max_examples=15)
@given(st.lists(st.integers(1, 2999), max_size=8, unique=True))
def test_chunking_does_not_change_records(system, cuts):
    s = stream()
    cuts = sorted(c for c in cuts if c < len(s))
    assert run_chunked(system, s, cuts) == eng.detect_series(system, s, DCFG)


def test_checkpoint_resume_equals_uninterrupted(system):
    s = stream()
    whole = eng.detect_series(system, s, DCFG)
    first = eng.StreamEngine(system, s.grid, DCFG)
    cut = 1777
    out = first.push(s.minutes[:cut], s.values[:cut], s.mask[:cut])
    assert first.checkpoint_due()
    data = json.loads(json.dumps(first.checkpoint()))
    assert not first.checkpoint_due()
    second = eng.StreamEngine.resume(system, s.grid, data)
    assert second.last_ingested == s.minutes[cut - 1]
    out += second.push(s.minutes[cut:], s.values[cut:], s.mask[cut:]) + second.flush()
    assert out == whole


def test_out_of_order_push_rejected(system):
    e = eng.StreamEngine(system, make_grid(N), DCFG)
    e.push([10, 11], np.full((2, N), 21.0))
    with pytest.raises(InputError):
        e.push([11], np.full((1, N), 21.0))


def test_grid_mismatch_rejected(system):
    with pytest.raises(ConfigurationError):
        eng.StreamEngine(system, make_grid(N + 1), DCFG)


def test_trace_shapes(system):
    s = stream()
    records, minutes, upper, lower = eng.detect_series(system, s, DCFG, trace=True)
    # outage minutes up to one window are filled in
    assert np.all(np.diff(minutes) > 0) and set(s.minutes) <= set(minutes.tolist())
    assert len(minutes) == len(s) + DCFG.window_minutes
    assert upper.shape == lower.shape == (len(minutes), N)
    assert upper[-1, 1] > 0.99 and upper[1000, 1] < 0.1


def test_save_load_round_trip(system, tmp_path):
    system.save(tmp_path)
    back = eng.DetectorSystem.load(tmp_path)
    s = stream()
    assert eng.detect_series(back, s, DCFG) == eng.detect_series(system, s, DCFG)
    (tmp_path / eng.RESIDUAL_FILE).unlink()
    with pytest.raises(InputError):
        eng.DetectorSystem.load(tmp_path)


def test_fit_is_deterministic(system):
    again = fit()
    assert all(np.array_equal(a, b) for a, b in zip(again.model.weights, system.model.weights))


def test_fit_rejects_empty():
    s = noisy_series(100)
    with pytest.raises(InputError):
        eng.fit_system(s, s[:0])


def test_retrain_grows_grid(system):
    n = 600
    tr = noisy_series(n, N + 1, seed=5, start=5000, noise=0.3)
    va = noisy_series(n, N + 1, seed=6, start=5000 + n, noise=0.3)
    cfg = TrainConfig(learning_rate=3e-3, batch_size=64, max_epochs=20, patience=5)
    new = eng.retrain_system(system, tr, va, cfg)
    assert new.sensor_ids == tuple(f"s{i}" for i in range(N + 1))
    assert all(np.array_equal(a, b) for a, b in zip(new.model.weights[:-1], system.model.weights[:-1]))
    assert eng.sensor_mae(new, va).shape == (N + 1,)
    with pytest.raises(ConfigurationError):
        eng.retrain_system(new, noisy_series(n, N, seed=5), noisy_series(n, N, seed=6), cfg)


def test_training_report_lists_sensors(system):
    text = eng.training_report(system, "temperature")
    assert text.startswith(f"grid: temperature {N} sensors")
    assert sum(line.split()[0] in system.sensor_ids for line in text.splitlines()) == N


def test_read_records(tmp_path):
    p = tmp_path / "a.jsonl"
    p.write_text('{"type":"status"}\n\n{"type":"event"}\n')
    assert len(eng.read_records(p)) == 2
    p.write_text('{"type":"status"}\n{"kind":1}\n')
    with pytest.raises(InputError, match="line 2"):
        eng.read_records(p)
