import pytest

from uncalib.config import SCHEMA, RunConfig, parse_config_text
from uncalib.errors import ConfigurationError


def test_defaults():
    cfg = RunConfig.build()
    assert cfg.seed == 0
    assert cfg.train().learning_rate == 1e-3
    assert cfg.retrain().max_epochs == 1000
    d = cfg.detector()
    assert (d.window_minutes, d.density_threshold, d.persistence_minutes) == (1440, 0.8, 20160)
    assert cfg.preprocess().sg_window == 31


def test_comments_and_blank_lines():
    cfg = RunConfig.build("# header\n\nseed = 7\n  train.hidden=16,8\n")
    assert cfg.seed == 7
    assert cfg["train.hidden"] == (16, 8)


def test_unknown_key_names_line():
    with pytest.raises(ConfigurationError, match="line 2: unknown key 'train.lr'"):
        parse_config_text("seed=1\ntrain.lr=0.1\n")


def test_missing_equals():
    with pytest.raises(ConfigurationError, match="line 1"):
        parse_config_text("seed 1\n")


def test_unparseable_value():
    with pytest.raises(ConfigurationError, match="train.batch_size"):
        RunConfig.build("train.batch_size=big\n")


def test_overrides_beat_file():
    cfg = RunConfig.build("seed=3\ndetector.window_minutes=60\n", {"seed": "9", "detector.window_minutes": None})
    assert cfg.seed == 9
    assert cfg["detector.window_minutes"] == 60


def test_unknown_override_rejected():
    with pytest.raises(ConfigurationError):
        RunConfig.build("", {"nope": "1"})


@pytest.mark.parametrize("line", [
    "detector.persistence_minutes=10",
    "detector.density_threshold=0",
    "preprocess.sg_window=4",
    "train.patience=0",
    "grid.kind=voltage",
])
def test_invalid_values_fail_at_startup(line):
    with pytest.raises(ConfigurationError):
        RunConfig.build(line + "\n")


def test_sensor_kind_overrides():
    cfg = RunConfig.build("grid.kind=pressure\ngrid.tolerance=2.5\n")
    kind = cfg.sensor_kind("temperature")
    assert kind.kind == "pressure" and kind.tolerance == 2.5
    with pytest.raises(ConfigurationError):
        RunConfig.build().sensor_kind()


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read config"):
        RunConfig.load(tmp_path / "absent.conf")


def test_every_key_round_trips_its_default():
    text = "".join(f"{k}={v}\n" for k, (_, v) in SCHEMA.items()
                   if v is not None and v != "" and not isinstance(v, tuple))
    cfg = RunConfig.build(text)
    assert cfg.values == RunConfig.build().values
