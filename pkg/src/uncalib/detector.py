"""Residual confidence intervals and the rolling rejection-density alarm."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _st

from . import _backend
from .errors import ConfigurationError, FitError, InputError, ModelFormatError, OrderingError
from .telemetry import format_timestamp

SIGMA_FLOOR = 1e-12
MIN_RESIDUALS = 100
KS_LEVEL = 0.05

WITHIN, REJECT_HIGH, REJECT_LOW = "within", "reject_high", "reject_low"
_CODE = {WITHIN: 0, REJECT_HIGH: 1, REJECT_LOW: -1}
_NAME = {v: k for k, v in _CODE.items()}


def normal_quantile(p: float) -> float:
    return float(_st.norm.ppf(p))


# -- residual model --------------------------------------------------------------

@dataclass
class ResidualModel:
    """Per-sensor Normal fit of training residuals plus the acceptance band.

    ``ci_lo``/``ci_hi`` are the parametric bounds ``mu -/+ z sigma`` unless the
    KS test rejected normality for that sensor, in which case the empirical
    ``alpha/2`` and ``1 - alpha/2`` quantiles are used instead.
    """

    mu: np.ndarray
    sigma: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    alpha: float = 0.01
    ks_statistic: np.ndarray = None
    ks_pvalue: np.ndarray = None
    gof_passed: np.ndarray = None
    sensor_ids: tuple = ()

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        n = len(self.mu)
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=float), SIGMA_FLOOR)
        self.ci_lo = np.asarray(self.ci_lo, dtype=float)
        self.ci_hi = np.asarray(self.ci_hi, dtype=float)
        self.ks_statistic = np.zeros(n) if self.ks_statistic is None else np.asarray(self.ks_statistic, dtype=float)
        self.ks_pvalue = np.ones(n) if self.ks_pvalue is None else np.asarray(self.ks_pvalue, dtype=float)
        self.gof_passed = np.ones(n, bool) if self.gof_passed is None else np.asarray(self.gof_passed, dtype=bool)
        self.sensor_ids = tuple(self.sensor_ids)
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie strictly between 0 and 1")
        for name in ("sigma", "ci_lo", "ci_hi", "ks_statistic", "ks_pvalue", "gof_passed"):
            if len(getattr(self, name)) != n:
                raise ConfigurationError(f"{name} has the wrong length")
        if self.sensor_ids and len(self.sensor_ids) != n:
            raise ConfigurationError("sensor_ids length does not match")
        if not np.all(self.ci_lo < self.ci_hi):
            raise ConfigurationError("every confidence interval needs ci_lo < ci_hi")

    @property
    def size(self) -> int:
        return len(self.mu)

    def to_text(self) -> str:
        lines = [
            "uncalib-residuals",
            "format_version=1",
            f"alpha={self.alpha!r}",
            "sensor_id,mu,sigma,ci_lo,ci_hi,ks_statistic,ks_pvalue,gof_passed",
        ]
        ids = self.sensor_ids or tuple(f"s{j}" for j in range(self.size))
        for j, sid in enumerate(ids):
            vals = (self.mu[j], self.sigma[j], self.ci_lo[j], self.ci_hi[j], self.ks_statistic[j], self.ks_pvalue[j])
            lines.append(",".join([sid, *(repr(float(v)) for v in vals), "1" if self.gof_passed[j] else "0"]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ResidualModel":
        lines = [ln for ln in text.split("\n") if ln]
        if len(lines) < 4 or lines[0] != "uncalib-residuals":
            raise ModelFormatError("not a residual model file", field="magic")
        if lines[1] != "format_version=1":
            raise ModelFormatError(f"unsupported residual file version: {lines[1]}", field="format_version")
        try:
            alpha = float(lines[2].partition("=")[2])
            rows = [ln.split(",") for ln in lines[4:]]
            ids = tuple(r[0] for r in rows)
            cols = np.array([[float(v) for v in r[1:7]] for r in rows]).reshape(-1, 6)
            passed = np.array([r[7] == "1" for r in rows], dtype=bool)
        except (ValueError, IndexError):
            raise ModelFormatError("corrupt residual table", field="residuals") from None
        return cls(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], alpha, cols[:, 4], cols[:, 5], passed, ids)


def _columns(errors):
    if isinstance(errors, np.ndarray) and errors.ndim == 2:
        return [errors[:, j] for j in range(errors.shape[1])]
    return [np.asarray(e, dtype=float) for e in errors]


def fit_residual_model(errors, alpha: float = 0.01, sensor_ids=()) -> ResidualModel:
    """Fit mean, std (N-1) and the acceptance band for every sensor.

    ``errors`` is a ``(T, n)`` array (``nan`` entries skipped) or a list of
    per-sensor sequences.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError("alpha must lie strictly between 0 and 1")
    z = normal_quantile(1.0 - alpha / 2.0)
    out = {k: [] for k in ("mu", "sigma", "lo", "hi", "stat", "p", "ok")}
    for j, col in enumerate(_columns(errors)):
        x = col[np.isfinite(col)]
        if len(x) < MIN_RESIDUALS:
            raise FitError(f"sensor {j} has {len(x)} residuals, need at least {MIN_RESIDUALS}")
        mu = float(x.mean())
        sigma = max(float(x.std(ddof=1)), SIGMA_FLOOR)
        ks = _st.kstest(x, "norm", args=(mu, sigma))
        ok = bool(ks.pvalue >= KS_LEVEL)
        lo, hi = mu - z * sigma, mu + z * sigma
        if not ok:
            qlo, qhi = np.quantile(x, [alpha / 2.0, 1.0 - alpha / 2.0])
            if qlo < qhi:
                lo, hi = float(qlo), float(qhi)
        for k, v in zip(out, (mu, sigma, lo, hi, float(ks.statistic), float(ks.pvalue), ok)):
            out[k].append(v)
    return ResidualModel(out["mu"], out["sigma"], out["lo"], out["hi"], alpha,
                         out["stat"], out["p"], out["ok"], sensor_ids)


def classify_residual(error: float, model: ResidualModel, sensor: int) -> str:
    """Bounds are inclusive: an error equal to a bound is ``within``."""
    e = float(error)
    if not math.isfinite(e):
        raise InputError(f"residual must be finite, got {error!r}")
    if e > model.ci_hi[sensor]:
        return REJECT_HIGH
    if e < model.ci_lo[sensor]:
        return REJECT_LOW
    return WITHIN


def classify(errors: np.ndarray, model: ResidualModel) -> np.ndarray:
    """Vectorized classification as int8 codes (+1 high, -1 low, 0 within).

    Missing residuals (``nan``) are coded 0: a dropped reading is not a rejection.
    """
    e = np.atleast_2d(np.asarray(errors, dtype=float))
    if e.shape[1] != model.size:
        raise InputError(f"residuals have {e.shape[1]} columns, model has {model.size}")
    codes = np.zeros(e.shape, dtype=np.int8)
    with np.errstate(invalid="ignore"):
        codes[e > model.ci_hi] = 1
        codes[e < model.ci_lo] = -1
    return codes


# -- trailing-window estimates -----------------------------------------------------

def estimate_deviation(errors) -> float:
    """Mean absolute error over the window, ignoring missing entries."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise InputError("window is empty")
    e = np.abs(e[np.isfinite(e)])
    return float(e.mean()) if e.size else float("nan")


def estimate_time_to_tolerance(errors, tolerance: float, cadence: int = 1):
    """Minutes until the fitted |error| trend crosses ``tolerance``, or ``None``.

    A least-squares line is fitted to |error| against time.  The current level
    is the line's value at the newest sample; ``None`` is returned when the
    slope is not positive or the current level already reaches the tolerance.
    """
    e = np.abs(np.asarray(errors, dtype=float))
    if e.size < 2:
        raise InputError("window needs at least two samples")
    t = np.arange(e.size, dtype=float) * cadence
    ok = np.isfinite(e)
    if ok.sum() < 2:
        return None
    tx, ex = t[ok], e[ok]
    tc = tx - tx.mean()
    denom = float(np.dot(tc, tc))
    if denom == 0.0:
        return None
    slope = float(np.dot(tc, ex - ex.mean())) / denom
    current = float(ex.mean()) + slope * (t[-1] - tx.mean())
    if slope <= 0.0 or current >= tolerance:
        return None
    return int(math.ceil((tolerance - current) / slope))


# -- alarm state ---------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorConfig:
    window_minutes: int = 1440
    density_threshold: float = 0.8
    persistence_minutes: int = 20160
    sensor_thresholds: tuple = ()

    def __post_init__(self):
        if self.window_minutes < 1:
            raise ConfigurationError("window_minutes must be at least 1")
        if self.persistence_minutes < self.window_minutes:
            raise ConfigurationError("persistence_minutes must be at least window_minutes")
        for t in (self.density_threshold, *self.sensor_thresholds):
            if not 0.0 < t <= 1.0:
                raise ConfigurationError(f"density thresholds must lie in (0, 1], got {t}")

    def thresholds(self, n: int) -> np.ndarray:
        if not self.sensor_thresholds:
            return np.full(n, float(self.density_threshold))
        if len(self.sensor_thresholds) != n:
            raise ConfigurationError(f"{len(self.sensor_thresholds)} per-sensor thresholds for {n} sensors")
        return np.array(self.sensor_thresholds, dtype=float)


@dataclass(frozen=True)
class UncalibrationEvent:
    sensor_id: str
    onset: int
    confirmed_at: int
    direction: str
    estimated_deviation: float
    time_to_tolerance_minutes: int | None
    density_at_confirmation: float

    def to_record(self) -> dict:
        return {
            "type": "event",
            "sensor_id": self.sensor_id,
            "onset": format_timestamp(self.onset),
            "confirmed_at": format_timestamp(self.confirmed_at),
            "direction": self.direction,
            "estimated_deviation": self.estimated_deviation,
            "time_to_tolerance_minutes": self.time_to_tolerance_minutes,
            "density_at_confirmation": self.density_at_confirmation,
        }


@dataclass
class DetectorState:
    """Rolling rejection windows and persistence counters for one grid."""

    sensor_ids: tuple
    config: DetectorConfig = DetectorConfig()
    tolerance: float = 0.5
    cadence: int = 1
    ring_high: np.ndarray = field(default=None, repr=False)
    ring_low: np.ndarray = field(default=None, repr=False)
    ring_err: np.ndarray = field(default=None, repr=False)
    count_high: np.ndarray = None
    count_low: np.ndarray = None
    counter: np.ndarray = None
    run_onset: np.ndarray = None
    emitted: np.ndarray = None
    pos: int = 0
    filled: int = 0
    last_minute: int | None = None
    open_events: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sensor_ids = tuple(self.sensor_ids)
        n, w = len(self.sensor_ids), self.capacity
        if self.cadence < 1 or self.config.window_minutes % self.cadence:
            raise ConfigurationError("window_minutes must be a multiple of the cadence")
        defaults = {
            "ring_high": lambda: np.zeros((n, w), np.uint8),
            "ring_low": lambda: np.zeros((n, w), np.uint8),
            "ring_err": lambda: np.full((n, w), np.nan),
            "count_high": lambda: np.zeros(n, np.int64),
            "count_low": lambda: np.zeros(n, np.int64),
            "counter": lambda: np.zeros(n, np.int64),
            "run_onset": lambda: np.zeros(n, np.int64),
            "emitted": lambda: np.zeros(n, np.uint8),
        }
        for name, make in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, make())
        self.thresholds = self.config.thresholds(n)

    @property
    def capacity(self) -> int:
        return self.config.window_minutes // self.cadence

    @property
    def size(self) -> int:
        return len(self.sensor_ids)

    @property
    def warmed_up(self) -> bool:
        return self.filled >= self.capacity

    def densities(self):
        """``(upper, lower)`` rejection densities, ``count / window``."""
        return self.count_high / float(self.capacity), self.count_low / float(self.capacity)

    def trailing_errors(self, sensor: int) -> np.ndarray:
        """Residuals in the window, oldest first (``nan`` where missing)."""
        row = self.ring_err[sensor]
        return np.concatenate([row[self.pos:], row[:self.pos]])

    def copy(self) -> "DetectorState":
        return DetectorState(
            self.sensor_ids, self.config, self.tolerance, self.cadence,
            self.ring_high.copy(), self.ring_low.copy(), self.ring_err.copy(),
            self.count_high.copy(), self.count_low.copy(), self.counter.copy(),
            self.run_onset.copy(), self.emitted.copy(), self.pos, self.filled,
            self.last_minute, dict(self.open_events),
        )

    # -- stream processing --------------------------------------------------

    def advance(self, minutes, codes, errors, trace: bool = False):
        """Consume frames in time order; returns the events confirmed on the way.

        Gaps between timestamps are filled with ``within`` / missing samples
        (at most one window's worth, after which the window is all empty
        anyway).  With ``trace=True`` returns ``(events, dense_minutes,
        upper_density, lower_density)``.
        """
        minutes = np.asarray(minutes, dtype=np.int64).reshape(-1)
        codes = np.asarray(codes, dtype=np.int8).reshape(len(minutes), -1)
        errors = np.asarray(errors, dtype=float).reshape(len(minutes), -1)
        if codes.shape[1] != self.size or errors.shape[1] != self.size:
            raise InputError(f"frames have {codes.shape[1]} sensors, detector has {self.size}")
        if len(minutes) == 0:
            return ([], minutes, np.empty((0, self.size)), np.empty((0, self.size))) if trace else []
        if np.any(np.diff(minutes) <= 0) or (self.last_minute is not None and minutes[0] <= self.last_minute):
            raise OrderingError("timestamps must be strictly increasing")
        if np.any((minutes % self.cadence) != 0):
            raise InputError("timestamps must fall on the cadence grid")
        dense_minutes, codes, errors = self._densify(minutes, codes, errors)
        th = tl = None
        if trace:
            th = np.empty((len(dense_minutes), self.size))
            tl = np.empty((len(dense_minutes), self.size))
        events = []
        t = 0
        while t < len(dense_minutes):
            t, self.pos, self.filled, fired = _backend.scan(
                codes, errors, dense_minutes, self.ring_high, self.ring_low, self.ring_err,
                self.count_high, self.count_low, self.counter, self.run_onset, self.emitted,
                self.thresholds, int(self.config.persistence_minutes), self.pos, self.filled, t,
                th, tl,
            )
            for j in fired:
                ev = self._event(j, int(dense_minutes[t - 1]))
                self.open_events[j] = ev
                events.append(ev)
        for j in [j for j in self.open_events if not self.emitted[j]]:
            del self.open_events[j]
        self.last_minute = int(dense_minutes[-1])
        if trace:
            return events, dense_minutes, th, tl
        return events

    def _densify(self, minutes, codes, errors):
        step = self.cadence
        prev = minutes[0] - step if self.last_minute is None else self.last_minute
        before = np.concatenate([[prev], minutes[:-1]])
        # a gap longer than the window is filled only up to one full window:
        # after that the window is empty and every further filler is a no-op
        fill = np.minimum((minutes - before) // step - 1, self.capacity)
        index = np.cumsum(fill + 1) - 1
        total = int(index[-1]) + 1
        if total == len(minutes):
            return np.ascontiguousarray(minutes), np.ascontiguousarray(codes), np.ascontiguousarray(errors)
        owner = np.searchsorted(index, np.arange(total))
        k = np.arange(total) - (index[owner] - fill[owner]) + 1
        dense_minutes = before[owner] + k * step
        dense_minutes[index] = minutes
        dense_codes = np.zeros((total, self.size), np.int8)
        dense_err = np.full((total, self.size), np.nan)
        dense_codes[index] = codes
        dense_err[index] = errors
        return dense_minutes, dense_codes, dense_err

    def _event(self, j: int, minute: int) -> UncalibrationEvent:
        dh, dl = self.densities()
        high = dh[j] >= dl[j]
        window = self.trailing_errors(j)
        return UncalibrationEvent(
            sensor_id=self.sensor_ids[j],
            onset=int(self.run_onset[j]),
            confirmed_at=minute,
            direction="high" if high else "low",
            estimated_deviation=estimate_deviation(window),
            time_to_tolerance_minutes=(estimate_time_to_tolerance(window, self.tolerance, self.cadence)
                                       if len(window) > 1 else None),
            density_at_confirmation=float(dh[j] if high else dl[j]),
        )

    # -- checkpoints ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "sensor_ids": list(self.sensor_ids),
            "window_minutes": self.config.window_minutes,
            "density_threshold": self.config.density_threshold,
            "persistence_minutes": self.config.persistence_minutes,
            "sensor_thresholds": list(self.config.sensor_thresholds),
            "tolerance": self.tolerance,
            "cadence": self.cadence,
            "pos": self.pos,
            "filled": self.filled,
            "last_minute": self.last_minute,
            "ring_high": ["".join("1" if b else "0" for b in row) for row in self.ring_high],
            "ring_low": ["".join("1" if b else "0" for b in row) for row in self.ring_low],
            "ring_err": [[None if math.isnan(v) else v for v in row] for row in self.ring_err.tolist()],
            "count_high": self.count_high.tolist(),
            "count_low": self.count_low.tolist(),
            "counter": self.counter.tolist(),
            "run_onset": self.run_onset.tolist(),
            "emitted": self.emitted.tolist(),
            "open_events": {str(j): ev.to_record() | {"onset_minute": ev.onset, "confirmed_minute": ev.confirmed_at}
                            for j, ev in self.open_events.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorState":
        if d.get("format_version") != 1:
            raise ModelFormatError(f"unsupported detector state version {d.get('format_version')!r}",
                                   field="format_version")
        try:
            cfg = DetectorConfig(d["window_minutes"], d["density_threshold"], d["persistence_minutes"],
                                 tuple(d["sensor_thresholds"]))

            def bits(rows):
                return np.array([[c == "1" for c in row] for row in rows], dtype=np.uint8).reshape(len(rows), -1)

            open_events = {}
            for j, rec in d["open_events"].items():
                open_events[int(j)] = UncalibrationEvent(
                    rec["sensor_id"], rec["onset_minute"], rec["confirmed_minute"], rec["direction"],
                    rec["estimated_deviation"], rec["time_to_tolerance_minutes"], rec["density_at_confirmation"],
                )
            state = cls(
                tuple(d["sensor_ids"]), cfg, d["tolerance"], d["cadence"],
                np.ascontiguousarray(bits(d["ring_high"])), np.ascontiguousarray(bits(d["ring_low"])),
                np.array([[np.nan if v is None else v for v in row] for row in d["ring_err"]],
                         dtype=float).reshape(len(d["sensor_ids"]), -1),
                np.array(d["count_high"], np.int64), np.array(d["count_low"], np.int64),
                np.array(d["counter"], np.int64), np.array(d["run_onset"], np.int64),
                np.array(d["emitted"], np.uint8), int(d["pos"]), int(d["filled"]),
                d["last_minute"], open_events,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"corrupt detector state: {exc}", field="state") from None
        if state.ring_high.shape != (state.size, state.capacity):
            raise ModelFormatError("ring buffer shape does not match window", field="ring_high")
        return state

    def equals(self, other: "DetectorState") -> bool:
        return json.dumps(self.to_dict(), sort_keys=True) == json.dumps(other.to_dict(), sort_keys=True)


def update_state(state: DetectorState, timestamp: int, classifications, errors):
    """Functional one-minute update: returns ``(new_state, events)``.

    ``classifications`` may be labels (``"within"`` ...) or int codes.
    """
    codes = np.array([_CODE[c] if isinstance(c, str) else int(c) for c in classifications], dtype=np.int8)
    new = state.copy()
    events = new.advance([timestamp], codes[None, :], np.asarray(errors, dtype=float)[None, :])
    return new, events


def status_record(state: DetectorState, minute: int, **extra) -> dict:
    dh, dl = state.densities()
    rec = {
        "type": "status",
        "timestamp": format_timestamp(minute),
        "warmed_up": state.warmed_up,
        "density_high": {sid: float(v) for sid, v in zip(state.sensor_ids, dh)},
        "density_low": {sid: float(v) for sid, v in zip(state.sensor_ids, dl)},
        "open_events": sorted(state.sensor_ids[j] for j in state.open_events),
    }
    rec.update(extra)
    return rec


def dumps_record(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"), allow_nan=False)
