"""Run configuration: one ``key=value`` file with dotted section prefixes.

Blank lines and lines starting with ``#`` are ignored.  Every key must be
known; command-line flags override file values.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .detector import DetectorConfig
from .errors import ConfigurationError
from .mlp import HIDDEN, TrainConfig
from .preprocess import PreprocessConfig
from .telemetry import KINDS, SensorKind


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "paths.data": (str, ""),
    "paths.model": (str, ""),
    "paths.state": (str, ""),
    "paths.output": (str, ""),
    "grid.kind": (str, ""),
    "grid.cadence_minutes": (int, 1),
    "grid.tolerance": (float, None),
    "grid.alarm_lo": (float, None),
    "grid.alarm_hi": (float, None),
    "preprocess.sg_window": (int, 31),
    "preprocess.sg_polyorder": (int, 3),
    "preprocess.mahalanobis_alpha": (float, 0.01),
    "preprocess.covariance_ridge": (float, 1e-8),
    "train.learning_rate": (float, 1e-3),
    "train.batch_size": (int, 256),
    "train.max_epochs": (int, 200),
    "train.patience": (int, 10),
    "train.hidden": (_ints, HIDDEN),
    "train.validation_fraction": (float, 0.1),
    "retrain.learning_rate": (float, 3e-4),
    "retrain.batch_size": (int, 256),
    "retrain.max_epochs": (int, 1000),
    "retrain.patience": (int, 30),
    "retrain.min_frames": (int, 10000),
    "residual.alpha": (float, 0.01),
    "detector.window_minutes": (int, 1440),
    "detector.density_threshold": (float, 0.8),
    "detector.persistence_minutes": (int, 20160),
    "detector.sensor_thresholds": (_floats, ()),
    "detect.poll_seconds": (float, 60.0),
    "detect.idle_timeout": (float, 600.0),
}


def parse_config_text(text: str) -> dict:
    """Raw ``{key: value-string}``; malformed lines and unknown keys are errors."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"config line {lineno}: expected key=value, got {line!r}")
        if key not in SCHEMA:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        raw[key] = value.strip()
    return raw


def _convert(key, value):
    parser, _ = SCHEMA[key]
    if not isinstance(value, str):
        return value
    try:
        return parser(value)
    except ValueError:
        raise ConfigurationError(f"config key {key}: cannot parse {value!r}") from None


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def build(cls, text: str = "", overrides: dict | None = None) -> "RunConfig":
        merged = {k: default for k, (_, default) in SCHEMA.items()}
        for key, value in parse_config_text(text).items():
            merged[key] = _convert(key, value)
        for key, value in (overrides or {}).items():
            if key not in SCHEMA:
                raise ConfigurationError(f"unknown key {key!r}")
            if value is not None:
                merged[key] = _convert(key, value)
        cfg = cls(merged)
        # construct every section once so bad values fail at startup
        cfg.preprocess(), cfg.train(), cfg.retrain(), cfg.detector()
        if merged["grid.kind"] and merged["grid.kind"] not in KINDS:
            raise ConfigurationError(f"grid.kind must be one of {', '.join(KINDS)}")
        return cfg

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        text = ""
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.build(text, overrides)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def preprocess(self) -> PreprocessConfig:
        v = self.values
        return PreprocessConfig(v["preprocess.sg_window"], v["preprocess.sg_polyorder"],
                                v["preprocess.mahalanobis_alpha"], v["preprocess.covariance_ridge"])

    def _train(self, section) -> TrainConfig:
        v = self.values
        return TrainConfig(v[f"{section}.learning_rate"], v[f"{section}.batch_size"],
                           v[f"{section}.max_epochs"], v[f"{section}.patience"])

    def train(self) -> TrainConfig:
        return self._train("train")

    def retrain(self) -> TrainConfig:
        return self._train("retrain")

    def detector(self) -> DetectorConfig:
        v = self.values
        return DetectorConfig(v["detector.window_minutes"], v["detector.density_threshold"],
                              v["detector.persistence_minutes"], tuple(v["detector.sensor_thresholds"]))

    def sensor_kind(self, kind: str | None = None) -> SensorKind:
        kind = self.values["grid.kind"] or kind
        if not kind:
            raise ConfigurationError("sensor kind unknown: set grid.kind or provide a scenario manifest")
        v = self.values
        return SensorKind.default(kind, tolerance=v["grid.tolerance"], alarm_lo=v["grid.alarm_lo"],
                                  alarm_hi=v["grid.alarm_hi"])
