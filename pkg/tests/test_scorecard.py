import pytest

from uncalib.errors import InputError
from uncalib.scorecard import evaluate, manifest_drifts, read_manifest

MANIFEST = """scenario=detect_temperature
seed=0
kind=temperature
expect.events=drift
expect.max_deviation=0.5
expect.direction=high
drifts=1
drift.0.split=test
drift.0.targets=t3
drift.0.kind=linear
drift.0.onset=2021-04-01T00:00:00Z
drift.0.magnitude=0.5
"""


def event(sensor="t3", confirmed="2021-04-20T00:00:00Z", deviation=0.31, direction="high"):
    return {"type": "event", "sensor_id": sensor, "onset": "2021-04-06T00:00:00Z", "confirmed_at": confirmed,
            "direction": direction, "estimated_deviation": deviation, "time_to_tolerance_minutes": 5000,
            "density_at_confirmation": 0.9}


def test_manifest_parsing():
    m = read_manifest(MANIFEST)
    (d,) = manifest_drifts(m)
    assert d["targets"] == ["t3"] and d["magnitude"] == 0.5
    with pytest.raises(InputError):
        read_manifest("no equals here\n")


def test_perfect_run():
    card = evaluate(read_manifest(MANIFEST), [{"type": "status"}, event()])
    assert card.passed
    assert "summary: 1/1 detected, deviation <= 0.5 °C, 0 false positives" in card.lines
    assert card.lines[-1] == "result: PASS"


def test_missed_detection():
    card = evaluate(read_manifest(MANIFEST), [])
    assert not card.passed and card.detected == 0
    assert any("missed detection" in line for line in card.lines)


def test_deviation_over_limit_fails():
    assert not evaluate(read_manifest(MANIFEST), [event(deviation=0.51)]).passed


def test_wrong_direction_fails():
    assert not evaluate(read_manifest(MANIFEST), [event(direction="low")]).passed


def test_false_positive_counts_and_fails():
    card = evaluate(read_manifest(MANIFEST), [event(), event(sensor="t1")])
    assert card.false_positives == 1 and not card.passed


def test_event_before_onset_is_false_positive():
    card = evaluate(read_manifest(MANIFEST), [event(confirmed="2021-03-01T00:00:00Z")])
    assert card.false_positives == 1 and card.detected == 0 and not card.passed


def test_silence_expected():
    m = read_manifest(MANIFEST.replace("expect.events=drift", "expect.events=none"))
    assert evaluate(m, []).passed
    assert not evaluate(m, [event()]).passed


def test_incomplete_event_rejected():
    bad = event()
    del bad["direction"]
    with pytest.raises(InputError, match="lacks direction"):
        evaluate(read_manifest(MANIFEST), [bad])
