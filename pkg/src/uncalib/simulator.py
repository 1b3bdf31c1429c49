"""Synthetic sensor grids with a hidden set point, and drift injection.

Every sensor reads ``gain * s(t) + offset + noise`` where the set point
``s(t)`` is a daily sinusoid plus a bounded random walk (and, for pressure
grids, occasional level steps).  Scenario bundles pair the generated splits
with the drifts injected into them and the outcome a detector should reach.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError
from .telemetry import SensorGrid, SensorKind, TimeSeries, format_timestamp, parse_timestamp, write_csv

DAY = 1440
START = parse_timestamp("2021-01-01T00:00:00Z")
DRIFT_KINDS = ("linear", "exponential", "logarithmic", "step_offset")
EXP_RATE = 3.0


@dataclass(frozen=True)
class EnvironmentSpec:
    """Parameters of one simulated room.

    ``offsets``, ``gains`` and ``noise_std`` hold one entry per sensor
    (scalars are broadcast).  ``setpoint_steps`` is a sequence of
    ``(minute, level)`` pairs: from ``minute`` on, ``level`` is added to the
    set point until the next step.
    """

    grid: SensorGrid
    duration_minutes: int
    seed: int
    setpoint_base: float
    daily_amplitude: float = 0.0
    slow_drift_amplitude: float = 0.0
    offsets: tuple = 0.0
    gains: tuple = 1.0
    noise_std: tuple = 0.0
    setpoint_steps: tuple = ()
    start_minute: int = START

    def __post_init__(self):
        n = self.grid.size
        for name in ("offsets", "gains", "noise_std"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,))
            object.__setattr__(self, name, tuple(float(v) for v in arr))
        if self.duration_minutes < 1:
            raise ConfigurationError("duration_minutes must be at least 1")
        if min(self.noise_std) < 0:
            raise ConfigurationError("noise_std must be non-negative")
        if min(self.gains) < 0.8 or max(self.gains) > 1.2:
            raise ConfigurationError("gains must lie in [0.8, 1.2]")
        if self.slow_drift_amplitude < 0:
            raise ConfigurationError("slow_drift_amplitude must be non-negative")

    def _streams(self):
        walk, noise = np.random.SeedSequence(int(self.seed)).spawn(2)
        return np.random.default_rng(walk), np.random.default_rng(noise)


def bounded_walk(rng, length: int, amplitude: float) -> np.ndarray:
    """Gaussian random walk folded into ``[-amplitude, amplitude]``."""
    if amplitude == 0.0:
        return np.zeros(length)
    y = np.cumsum(rng.normal(0.0, amplitude / math.sqrt(2.0 * DAY), size=length))
    period = 4.0 * amplitude
    return amplitude - np.abs(np.mod(y + amplitude, period) - 2.0 * amplitude)


def latent_setpoint(spec: EnvironmentSpec) -> np.ndarray:
    t = np.arange(spec.duration_minutes)
    walk_rng, _ = spec._streams()
    s = spec.setpoint_base + spec.daily_amplitude * np.sin(2.0 * np.pi * t / DAY)
    s = s + bounded_walk(walk_rng, spec.duration_minutes, spec.slow_drift_amplitude)
    for (start, level), nxt in zip(spec.setpoint_steps, [*spec.setpoint_steps[1:], (spec.duration_minutes, 0.0)]):
        s[int(start):int(nxt[0])] += level
    return s


def generate_environment(spec: EnvironmentSpec) -> TimeSeries:
    s = latent_setpoint(spec)
    _, noise_rng = spec._streams()
    n = spec.grid.size
    noise = noise_rng.standard_normal((spec.duration_minutes, n)) * np.array(spec.noise_std)
    values = s[:, None] * np.array(spec.gains) + np.array(spec.offsets) + noise
    minutes = spec.start_minute + np.arange(spec.duration_minutes) * spec.grid.cadence_minutes
    return TimeSeries(spec.grid, minutes, values)


# -- drifts ---------------------------------------------------------------------------

def drift_profile(kind: str, u) -> np.ndarray:
    """Normalized deviation shape: 0 at ``u = 0``, 1 at ``u >= 1``."""
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    if kind == "linear":
        return u
    if kind == "exponential":
        return np.expm1(EXP_RATE * u) / math.expm1(EXP_RATE)
    if kind == "logarithmic":
        return np.log1p(9.0 * u) / math.log(10.0)
    if kind == "step_offset":
        return np.ones_like(u)
    raise ConfigurationError(f"unknown drift kind {kind!r}; expected one of {', '.join(DRIFT_KINDS)}")


@dataclass(frozen=True)
class DriftSpec:
    """Deviation added to ``target_sensor_ids`` from ``onset_minute`` on.

    ``onset_minute`` counts minutes from the first frame of the series the
    drift is injected into.  The deviation reaches ``magnitude`` after
    ``duration_minutes`` and stays there.
    """

    target_sensor_ids: tuple
    kind: str
    onset_minute: int
    magnitude: float
    duration_minutes: int = 1

    def __post_init__(self):
        object.__setattr__(self, "target_sensor_ids", tuple(self.target_sensor_ids))
        if self.kind not in DRIFT_KINDS:
            raise ConfigurationError(f"unknown drift kind {self.kind!r}; expected one of {', '.join(DRIFT_KINDS)}")
        if not self.target_sensor_ids:
            raise ConfigurationError("a drift needs at least one target sensor")
        if self.magnitude == 0:
            raise ConfigurationError("drift magnitude must be non-zero")
        if self.onset_minute < 0 or self.duration_minutes < 1:
            raise ConfigurationError("onset must be >= 0 and duration >= 1")


def drift_offsets(minutes: np.ndarray, drift: DriftSpec) -> np.ndarray:
    elapsed = np.asarray(minutes, dtype=np.int64) - minutes[0] - drift.onset_minute
    dev = drift.magnitude * drift_profile(drift.kind, elapsed / drift.duration_minutes)
    return np.where(elapsed >= 0, dev, 0.0)


def inject_drift(series: TimeSeries, drift: DriftSpec) -> TimeSeries:
    if len(series) == 0:
        raise InputError("cannot inject a drift into an empty series")
    span = int(series.minutes[-1] - series.minutes[0]) + series.grid.cadence_minutes
    if drift.onset_minute + drift.duration_minutes > span:
        raise ConfigurationError(
            f"drift ends at minute {drift.onset_minute + drift.duration_minutes}, series spans {span}"
        )
    missing = [s for s in drift.target_sensor_ids if s not in series.grid.sensor_ids]
    if missing:
        raise ConfigurationError(f"drift targets unknown sensors: {', '.join(missing)}")
    dev = drift_offsets(series.minutes, drift)
    values = series.values.copy()
    for sid in drift.target_sensor_ids:
        j = series.grid.sensor_ids.index(sid)
        values[:, j] += dev
    return series.with_values(values)


# -- scenarios -------------------------------------------------------------------------

SCENARIOS = (
    "detect_temperature", "detect_humidity", "detect_pressure",
    "recalib_single", "offset_all", "add_sensors", "new_environment",
)


@dataclass
class ExperimentBundle:
    """Splits, injected drifts and expected outcomes of one scenario.

    ``drifts`` maps a split name to the drifts injected into it.
    ``expect`` holds manifest keys such as ``events`` (``drift`` or ``none``),
    ``max_deviation`` and ``false_positives``.
    """

    name: str
    seed: int
    kind: str
    splits: dict
    drifts: dict = field(default_factory=dict)
    expect: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def manifest(self) -> str:
        lines = [
            f"scenario={self.name}",
            f"seed={self.seed}",
            f"kind={self.kind}",
            "splits=" + ",".join(self.splits),
        ]
        for name, series in self.splits.items():
            lines.append(f"split.{name}.file={name}.csv")
            lines.append(f"split.{name}.frames={len(series)}")
            lines.append(f"split.{name}.sensors=" + ",".join(series.grid.sensor_ids))
            if len(series):
                lines.append(f"split.{name}.start={format_timestamp(series.minutes[0])}")
        k = 0
        for split, drifts in self.drifts.items():
            start = int(self.splits[split].minutes[0])
            for d in drifts:
                p = f"drift.{k}."
                lines += [
                    p + f"split={split}",
                    p + "targets=" + ",".join(d.target_sensor_ids),
                    p + f"kind={d.kind}",
                    p + f"onset_minute={d.onset_minute}",
                    p + f"onset={format_timestamp(start + d.onset_minute)}",
                    p + f"magnitude={d.magnitude!r}",
                    p + f"duration_minutes={d.duration_minutes}",
                ]
                k += 1
        lines.append(f"drifts={k}")
        lines += [f"expect.{key}={value}" for key, value in self.expect.items()]
        lines += [f"info.{key}={value}" for key, value in self.info.items()]
        return "\n".join(lines) + "\n"


def write_bundle(bundle: ExperimentBundle, out_dir) -> list:
    """Write ``<split>.csv`` files and ``manifest.txt``; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, series in bundle.splits.items():
        path = os.path.join(out_dir, f"{name}.csv")
        with open(path, "wb") as fh:
            fh.write(write_csv(series))
        paths.append(path)
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(bundle.manifest())
    paths.append(path)
    return paths


def sensor_ids(prefix: str, n: int) -> tuple:
    return tuple(f"{prefix}{i + 1:02d}" for i in range(n))


@dataclass(frozen=True)
class _Room:
    kind: str
    n: int
    base: float
    daily: float
    slow: float
    offset_std: float
    gain_spread: float
    noise: float
    drift: float
    steps: tuple = ()


_ROOMS = {
    "temperature": _Room("temperature", 17, 21.0, 0.8, 0.6, 0.3, 0.03, 0.05, 0.5),
    "humidity": _Room("humidity", 17, 45.0, 3.0, 3.0, 1.8, 0.03, 0.3, 3.0),
    "pressure": _Room("pressure", 24, 15.0, 0.5, 0.5, 1.0, 0.1, 0.15, 1.5, steps=(-3.0, 0.0, 3.0)),
}
_PREFIX = {"temperature": "T", "humidity": "H", "pressure": "P"}


def _room_spec(room: _Room, rng, duration: int, seed: int, n=None, base=None, noise=None) -> EnvironmentSpec:
    n = room.n if n is None else n
    grid = SensorGrid(sensor_ids(_PREFIX[room.kind], n), SensorKind.default(room.kind))
    offsets = rng.normal(0.0, room.offset_std, n)
    gains = rng.uniform(1.0 - room.gain_spread, 1.0 + room.gain_spread, n)
    steps = ()
    if room.steps:
        # every level appears early so the training span covers the full range
        levels = list(rng.permutation(room.steps))
        t, steps = 0, []
        while t < duration:
            level = levels.pop(0) if levels else float(rng.choice(room.steps))
            steps.append((t, float(level)))
            t += int(rng.integers(2 * DAY, 6 * DAY))
        steps = tuple(steps)
    return EnvironmentSpec(
        grid, duration, seed, room.base if base is None else base, room.daily, room.slow,
        tuple(offsets), tuple(gains), room.noise if noise is None else noise, steps,
    )


def _cut(series: TimeSeries, names, lengths) -> dict:
    out, a = {}, 0
    for name, length in zip(names, lengths):
        out[name] = series[a:a + length]
        a += length
    return out


def _days(d: float, scale: float) -> int:
    return max(1, int(round(d * DAY * scale)))


def make_experiment(name: str, seed: int, scale: float = 1.0) -> ExperimentBundle:
    """Build one named scenario.

    ``scale`` shrinks every duration (splits, drift onset and ramp) for quick
    runs; detector windows must be scaled by the caller to match.
    """
    if name not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {name!r}; valid scenarios: {', '.join(SCENARIOS)}")
    if not scale > 0:
        raise ConfigurationError("scale must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), SCENARIOS.index(name)]))
    env_seed = int(rng.integers(2**32))

    if name.startswith("detect_"):
        room = _ROOMS[name.split("_", 1)[1]]
        lengths = [_days(90, scale), _days(15, scale), _days(30, scale)]
        spec = _room_spec(room, rng, sum(lengths), env_seed)
        splits = _cut(generate_environment(spec), ("train", "val", "test"), lengths)
        target = spec.grid.sensor_ids[int(rng.integers(spec.grid.size))]
        drift = DriftSpec((target,), "linear", _days(3, scale), room.drift, _days(20, scale))
        splits["test"] = inject_drift(splits["test"], drift)
        return ExperimentBundle(name, seed, room.kind, splits, {"test": [drift]},
                                {"events": "drift", "max_deviation": room.drift, "false_positives": 0,
                                 "direction": "high"})

    room = _ROOMS["temperature"]
    if name == "offset_all":
        lengths = [_days(60, scale), _days(10, scale), _days(30, scale)]
        spec = _room_spec(room, rng, sum(lengths), env_seed)
        splits = _cut(generate_environment(spec), ("train", "val", "test"), lengths)
        s_train = latent_setpoint(spec)[:lengths[0]]
        magnitude = 0.5 * float(np.std(s_train))
        drift = DriftSpec(spec.grid.sensor_ids, "step_offset", _days(3, scale), magnitude, 1)
        splits["test"] = inject_drift(splits["test"], drift)
        return ExperimentBundle(name, seed, room.kind, splits, {"test": [drift]},
                                {"events": "none", "false_positives": 0},
                                {"train_setpoint_std": float(np.std(s_train))})

    if name == "recalib_single":
        lengths = [_days(24, scale), _days(4, scale), _days(4, scale), _days(7, scale), _days(1.4, scale),
                   _days(4, scale)]
        names = ("train", "val", "holdout", "retrain", "retrain_val", "test")
        spec = _room_spec(room, rng, sum(lengths), env_seed)
        series = generate_environment(spec)
        target = spec.grid.sensor_ids[int(rng.integers(spec.grid.size))]
        onset = sum(lengths[:3])
        drift = DriftSpec((target,), "step_offset", onset, 3.0, 1)
        series = inject_drift(series, drift)
        splits = _cut(series, names, lengths)
        shifted = {}
        for split in names[3:]:
            shifted[split] = [DriftSpec((target,), "step_offset", 0, 3.0, 1)]
        return ExperimentBundle(name, seed, room.kind, splits, shifted,
                                {"retrain_target": target, "mae_within_p95": True},
                                {"offset_sensor": target})

    if name == "add_sensors":
        lengths = [_days(50, scale), _days(8, scale), _days(12, scale), _days(2, scale), _days(30, scale)]
        names = ("train", "val", "retrain", "retrain_val", "test")
        spec = _room_spec(room, rng, sum(lengths), env_seed)
        splits = _cut(generate_environment(spec), names, lengths)
        old = spec.grid.sensor_ids[:13]
        for split in ("train", "val"):
            splits[split] = splits[split].select(old)
        target = spec.grid.sensor_ids[13 + int(rng.integers(4))]
        drift = DriftSpec((target,), "linear", _days(3, scale), room.drift, _days(20, scale))
        splits["test"] = inject_drift(splits["test"], drift)
        return ExperimentBundle(name, seed, room.kind, splits, {"test": [drift]},
                                {"events": "drift", "max_deviation": room.drift, "false_positives": 0,
                                 "direction": "high"},
                                {"model_a_sensors": 13, "model_b_sensors": 17})

    # new_environment: model A from room A, retrained on 80000 frames of room B
    la = [_days(50, scale), _days(8, scale)]
    lb = [max(1, int(round(80000 * scale))), _days(8, scale), _days(30, scale)]
    spec_a = _room_spec(room, rng, sum(la), env_seed)
    spec_b = _room_spec(room, rng, sum(lb), env_seed + 1, base=19.0, noise=0.06)
    spec_b = dataclasses.replace(spec_b, start_minute=START + sum(la))
    splits = _cut(generate_environment(spec_a), ("train", "val"), la)
    b = generate_environment(spec_b)
    splits.update(_cut(b, ("retrain", "retrain_val", "test"), lb))
    target = spec_b.grid.sensor_ids[int(rng.integers(spec_b.grid.size))]
    drift = DriftSpec((target,), "linear", _days(3, scale), room.drift, _days(20, scale))
    splits["test"] = inject_drift(splits["test"], drift)
    return ExperimentBundle(name, seed, room.kind, splits, {"test": [drift]},
                            {"events": "drift", "max_deviation": room.drift, "false_positives": 0,
                             "direction": "high"},
                            {"environment_b_base": 19.0})
