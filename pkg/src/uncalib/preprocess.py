"""Cleaning pipeline: alarm thresholds, joint Mahalanobis outliers, Savitzky-Golay
smoothing, then the cross-sensor mean used as the network input.

Row-wise arithmetic here (matrix-vector products, means, convolutions) is
written with a fixed accumulation order so a frame gets the same bits whether
it is processed alone or inside a large batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import stats as _st

from . import _backend
from .errors import ConfigurationError, FitError, ModelFormatError, NumericError
from .telemetry import ReadingFrame, SensorGrid, TimeSeries


@dataclass(frozen=True)
class PreprocessConfig:
    sg_window: int = 31
    sg_polyorder: int = 3
    mahalanobis_alpha: float = 0.01
    covariance_ridge: float = 1e-8

    def __post_init__(self):
        if self.sg_window < 1 or self.sg_window % 2 == 0:
            raise ConfigurationError(f"sg_window must be an odd positive integer, got {self.sg_window}")
        if not 0 <= self.sg_polyorder < self.sg_window:
            raise ConfigurationError("sg_polyorder must satisfy 0 <= polyorder < window")
        if not 0.0 < self.mahalanobis_alpha < 1.0:
            raise ConfigurationError("mahalanobis_alpha must lie strictly between 0 and 1")
        if self.covariance_ridge < 0:
            raise ConfigurationError("covariance_ridge must be non-negative")


@dataclass(frozen=True)
class GridStatistics:
    mean: np.ndarray
    covariance: np.ndarray
    chi2_threshold: float
    whitener: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        cov = np.array(self.covariance, dtype=float)
        if cov.shape != (len(mean), len(mean)):
            raise ConfigurationError("covariance shape does not match mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        if self.whitener is None:
            # L^-1 with cov = L L^T, so d^2 = |L^-1 (x - mu)|^2
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise NumericError(
                    f"covariance is not positive definite (smallest eigenvalue {np.linalg.eigvalsh(cov).min():.3e})"
                ) from None
            inv = np.linalg.solve(chol, np.eye(len(mean)))
            object.__setattr__(self, "whitener", inv)

    @property
    def dim(self) -> int:
        return len(self.mean)


def _row(values) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(values).reshape(-1).tolist())


def save_preprocess(stats: GridStatistics, cfg: PreprocessConfig) -> str:
    """Frozen training statistics and filter settings as key=value text."""
    lines = [
        "uncalib-preprocess",
        "format_version=1",
        f"sg_window={cfg.sg_window}",
        f"sg_polyorder={cfg.sg_polyorder}",
        f"mahalanobis_alpha={cfg.mahalanobis_alpha!r}",
        f"covariance_ridge={cfg.covariance_ridge!r}",
        f"chi2_threshold={stats.chi2_threshold!r}",
        "mean=" + _row(stats.mean),
    ]
    lines += [f"covariance.{i}=" + _row(row) for i, row in enumerate(stats.covariance)]
    return "\n".join(lines) + "\n"


def load_preprocess(text: str):
    """Inverse of :func:`save_preprocess`; returns ``(stats, cfg)``."""
    lines = text.split("\n")
    if not lines or lines[0] != "uncalib-preprocess":
        raise ModelFormatError("not a preprocessing file", field="magic")
    kv = dict(line.split("=", 1) for line in lines[1:] if "=" in line)
    if kv.get("format_version") != "1":
        raise ModelFormatError(f"unsupported preprocessing version {kv.get('format_version')!r}",
                               field="format_version")
    try:
        cfg = PreprocessConfig(int(kv["sg_window"]), int(kv["sg_polyorder"]), float(kv["mahalanobis_alpha"]),
                               float(kv["covariance_ridge"]))
        mean = np.array([float(v) for v in kv["mean"].split(",")])
        cov = np.array([[float(v) for v in kv[f"covariance.{i}"].split(",")] for i in range(len(mean))])
        stats = GridStatistics(mean, cov, float(kv["chi2_threshold"]))
    except KeyError as exc:
        raise ModelFormatError(f"missing field {exc.args[0]}", field=exc.args[0]) from None
    except ValueError as exc:
        raise ModelFormatError(f"corrupt preprocessing file: {exc}", field="covariance") from None
    return stats, cfg


def chi2_quantile(p: float, dof: int) -> float:
    return float(_st.chi2.ppf(p, dof))


# -- threshold stage -----------------------------------------------------------

def threshold_filter(frame: ReadingFrame, grid: SensorGrid) -> ReadingFrame:
    """Mask slots outside the inclusive alarm band ``[alarm_lo, alarm_hi]``."""
    if len(frame) != grid.size:
        raise ConfigurationError(f"frame has {len(frame)} slots, grid has {grid.size}")
    k = grid.kind
    with np.errstate(invalid="ignore"):
        inside = (frame.values >= k.alarm_lo) & (frame.values <= k.alarm_hi)
    return frame.with_mask(inside)


def threshold_mask(values: np.ndarray, mask: np.ndarray, grid: SensorGrid) -> np.ndarray:
    k = grid.kind
    with np.errstate(invalid="ignore"):
        return mask & (values >= k.alarm_lo) & (values <= k.alarm_hi)


def threshold_series(series: TimeSeries) -> TimeSeries:
    return series.with_mask(threshold_mask(series.values, series.mask, series.grid))


# -- Mahalanobis stage ---------------------------------------------------------

def fit_grid_statistics(training: TimeSeries, cfg: PreprocessConfig = PreprocessConfig()) -> GridStatistics:
    full = training.mask.all(axis=1)
    x = training.values[full]
    d = training.grid.size
    if len(x) < d + 1:
        raise FitError(f"need at least {d + 1} fully unmasked frames, have {len(x)}")
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1)) + cfg.covariance_ridge * np.eye(d)
    cov = 0.5 * (cov + cov.T)
    smallest = float(np.linalg.eigvalsh(cov).min())
    if not smallest > 0:
        raise NumericError(f"covariance is not positive definite after ridge (smallest eigenvalue {smallest:.3e})")
    return GridStatistics(mean, cov, chi2_quantile(1.0 - cfg.mahalanobis_alpha, d))


def _rowwise_matvec(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``x @ m.T`` with each output accumulated in column order."""
    out = np.zeros((x.shape[0], m.shape[0]))
    for k in range(m.shape[0]):
        acc = out[:, k]
        for j in range(m.shape[1]):
            if m[k, j] != 0.0:
                acc += m[k, j] * x[:, j]
    return out


def mahalanobis_sq(values: np.ndarray, stats: GridStatistics) -> np.ndarray:
    """Squared Mahalanobis distance per row; rows with ``nan`` give ``nan``."""
    values = np.atleast_2d(values)
    y = _rowwise_matvec(values - stats.mean, stats.whitener)
    out = np.zeros(len(values))
    for k in range(y.shape[1]):
        out += y[:, k] * y[:, k]
    return out


def mahalanobis_filter(frame: ReadingFrame, stats: GridStatistics):
    """Return ``(frame, d2)``; the whole frame is masked when ``d2`` exceeds the threshold.

    Partially masked frames are not tested and come back unchanged with
    ``d2 = None``.
    """
    if not frame.mask.all():
        return frame, None
    d2 = float(mahalanobis_sq(frame.values[None, :], stats)[0])
    if d2 > stats.chi2_threshold:
        return frame.with_mask(np.zeros(len(frame), dtype=bool)), d2
    return frame, d2


# -- Savitzky-Golay stage ------------------------------------------------------

def _check_sg(window: int, polyorder: int):
    if window < 1 or window % 2 == 0:
        raise ConfigurationError(f"window must be an odd positive integer, got {window}")
    if not 0 <= polyorder < window:
        raise ConfigurationError(f"polyorder must satisfy 0 <= polyorder < window, got {polyorder}")


def _fit_matrix(length: int, degree: int) -> np.ndarray:
    """Hat matrix H (length x length) of the degree-``degree`` least-squares fit."""
    t = np.arange(length, dtype=float) - (length - 1) / 2.0
    vander = np.vander(t, degree + 1, increasing=True)
    return vander @ np.linalg.pinv(vander)


@lru_cache(maxsize=None)
def _coefficients(window: int, polyorder: int) -> np.ndarray:
    c = _fit_matrix(window, polyorder)[window // 2].copy()
    c = 0.5 * (c + c[::-1])
    c.flags.writeable = False
    return c


def savgol_coefficients(window: int, polyorder: int) -> np.ndarray:
    """Central-point weights of the least-squares polynomial fit over ``window`` points."""
    _check_sg(window, polyorder)
    return _coefficients(window, polyorder).copy()


@lru_cache(maxsize=None)
def _short_run_matrix(length: int, polyorder: int) -> np.ndarray:
    m = _fit_matrix(length, min(polyorder, length - 1))
    m.flags.writeable = False
    return m


def _apply_rows(mat: np.ndarray, seg: np.ndarray) -> np.ndarray:
    out = np.zeros(mat.shape[0])
    for k in range(mat.shape[1]):
        out += mat[:, k] * seg[k]
    return out


def savgol_smooth(seq, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Smooth one contiguous, fully present sequence.

    Interior points use the centered weights.  Within half a window of either
    end the value comes from the polynomial fitted to the first (last) full
    window, so polynomials up to ``sg_polyorder`` pass through unchanged.
    Sequences shorter than the window are fitted as a whole.
    """
    x = np.ascontiguousarray(seq, dtype=float)
    n = len(x)
    w, p = cfg.sg_window, cfg.sg_polyorder
    if n == 0:
        return x.copy()
    if n < w:
        return _apply_rows(_short_run_matrix(n, p), x)
    h = w // 2
    out = np.empty(n)
    out[h:n - h] = _backend.sg_centered(x, _coefficients(w, p))
    if h:
        hat = _short_run_matrix(w, p)
        out[:h] = _apply_rows(hat[:h], x[:w])
        out[n - h:] = _apply_rows(hat[w - h:], x[n - w:])
    return out


def contiguous_runs(present: np.ndarray, breaks=()) -> list:
    """``(start, stop)`` pairs of maximal present runs, also cut before each index in ``breaks``."""
    present = np.asarray(present, dtype=bool)
    n = len(present)
    if n == 0:
        return []
    cut = np.zeros(n, dtype=bool)
    cut[np.asarray(breaks, dtype=int)] = True
    start_flags = present & (np.concatenate([[True], ~present[:-1]]) | cut)
    starts = np.nonzero(start_flags)[0]
    end_flags = present & (np.concatenate([~present[1:], [True]]) | np.concatenate([cut[1:], [False]]))
    stops = np.nonzero(end_flags)[0] + 1
    return list(zip(starts.tolist(), stops.tolist()))


def smooth_columns(values: np.ndarray, mask: np.ndarray, breaks=(), cfg: PreprocessConfig = PreprocessConfig()):
    """Apply :func:`savgol_smooth` to every present run of every column."""
    out = np.full(values.shape, np.nan)
    for j in range(values.shape[1]):
        col = values[:, j]
        for a, b in contiguous_runs(mask[:, j], breaks):
            out[a:b, j] = savgol_smooth(col[a:b], cfg)
    return out


# -- set point -----------------------------------------------------------------

def estimate_set_point(frame: ReadingFrame):
    """Mean over present slots, or ``None`` when every slot is masked."""
    sp = set_points(frame.values[None, :], frame.mask[None, :])[0]
    return None if np.isnan(sp) else float(sp)


def set_points(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    total = np.zeros(values.shape[0])
    count = np.zeros(values.shape[0])
    for j in range(values.shape[1]):
        m = mask[:, j]
        total += np.where(m, values[:, j], 0.0)
        count += m
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


# -- full pipeline -------------------------------------------------------------

class PipelineOutput(NamedTuple):
    clean: TimeSeries
    setpoints: np.ndarray
    distance_sq: np.ndarray
    outlier: np.ndarray


def run_pipeline(series: TimeSeries, stats: GridStatistics, cfg: PreprocessConfig = PreprocessConfig(),
                 drop_outliers: bool = True) -> PipelineOutput:
    """Threshold filter, Mahalanobis filter, per-sensor smoothing, set points.

    ``distance_sq`` is ``nan`` for frames that were not tested (partially
    masked).  With ``drop_outliers=False`` outlier frames are only reported in
    ``outlier`` and stay in the output; the streaming detector runs this way.
    """
    if stats.dim != series.grid.size:
        raise ConfigurationError(f"statistics fitted for {stats.dim} sensors, series has {series.grid.size}")
    mask = threshold_mask(series.values, series.mask, series.grid)
    full = mask.all(axis=1)
    d2 = np.full(len(series), np.nan)
    if full.any():
        d2[full] = mahalanobis_sq(series.values[full], stats)
    outlier = full & (d2 > stats.chi2_threshold)
    if drop_outliers:
        mask = mask & ~outlier[:, None]
    smoothed = smooth_columns(series.values, mask, series.gaps(), cfg)
    clean = TimeSeries(series.grid, series.minutes, smoothed, mask)
    return PipelineOutput(clean, set_points(smoothed, mask), d2, outlier)
