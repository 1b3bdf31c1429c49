"""End-to-end glue: fit a detector system from data and run it over a stream.

A *system* bundles the frozen preprocessing statistics, the regressor and
the residual model.  :class:`StreamEngine` turns arbitrarily chunked frames
into alert and status records; the output depends only on the frames, not on
how they were chunked, so replaying a file and tailing it give the same
records.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import detector as det
from . import mlp
from . import preprocess as pp
from .errors import ConfigurationError, InputError, ModelFormatError
from .telemetry import SensorGrid, TimeSeries

DAY = 1440
CHECKPOINT_EVERY = 1440
MODEL_FILE = "model.txt"
RESIDUAL_FILE = "residuals.txt"
PREPROCESS_FILE = "preprocess.txt"
REPORT_FILE = "report.txt"


@dataclass
class DetectorSystem:
    model: mlp.MlpModel
    stats: pp.GridStatistics
    residuals: det.ResidualModel
    preprocess: pp.PreprocessConfig = pp.PreprocessConfig()
    history: list = field(default_factory=list)

    @property
    def sensor_ids(self) -> tuple:
        return self.model.sensor_ids

    def check_grid(self, grid: SensorGrid):
        if tuple(grid.sensor_ids) != tuple(self.sensor_ids):
            raise ConfigurationError(
                f"model serves sensors {','.join(self.sensor_ids)} but the data has {','.join(grid.sensor_ids)}"
            )

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, MODEL_FILE), "wb") as fh:
            fh.write(mlp.save_model(self.model))
        with open(os.path.join(out_dir, RESIDUAL_FILE), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.residuals.to_text())
        with open(os.path.join(out_dir, PREPROCESS_FILE), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(pp.save_preprocess(self.stats, self.preprocess))

    @classmethod
    def load(cls, model_dir) -> "DetectorSystem":
        paths = {name: os.path.join(model_dir, name) for name in (MODEL_FILE, RESIDUAL_FILE, PREPROCESS_FILE)}
        for name, path in paths.items():
            if not os.path.isfile(path):
                raise InputError(f"missing {name} in {model_dir}")
        with open(paths[MODEL_FILE], "rb") as fh:
            model = mlp.load_model(fh.read())
        with open(paths[RESIDUAL_FILE], encoding="utf-8") as fh:
            residuals = det.ResidualModel.from_text(fh.read())
        with open(paths[PREPROCESS_FILE], encoding="utf-8") as fh:
            stats, cfg = pp.load_preprocess(fh.read())
        if residuals.size != model.n_outputs or stats.dim != model.n_outputs:
            raise ModelFormatError("model, residual and preprocessing files disagree on the grid size",
                                   field="layer_dims")
        return cls(model, stats, residuals, cfg)


# -- training -----------------------------------------------------------------------

def clean(series: TimeSeries, stats: pp.GridStatistics, cfg: pp.PreprocessConfig, drop_outliers=True):
    return pp.run_pipeline(series, stats, cfg, drop_outliers=drop_outliers)


def residuals_of(model: mlp.MlpModel, out: pp.PipelineOutput) -> np.ndarray:
    """Smoothed reading minus prediction; ``nan`` where either is missing."""
    pred = mlp.predict_aligned(model, out.setpoints, out.clean.minutes)
    return np.where(out.clean.mask, out.clean.values - pred, np.nan)


def fit_system(train: TimeSeries, val: TimeSeries, seed: int = 0,
               preprocess: pp.PreprocessConfig = pp.PreprocessConfig(),
               train_cfg: mlp.TrainConfig = mlp.TrainConfig(), alpha: float = 0.01,
               hidden=mlp.HIDDEN) -> DetectorSystem:
    """Preprocessing statistics, regressor and residual model from one training span."""
    if len(train) == 0 or len(val) == 0:
        raise InputError("training and validation data must be non-empty")
    if train.grid.sensor_ids != val.grid.sensor_ids:
        raise ConfigurationError("training and validation grids differ")
    stats = pp.fit_grid_statistics(pp.threshold_series(train), preprocess)
    tr = clean(train, stats, preprocess)
    va = clean(val, stats, preprocess)
    model = mlp.init_model(train.grid.size, seed, hidden, train.grid.sensor_ids)
    model, history = mlp.train(model, (tr.setpoints, tr.clean.values, tr.clean.mask),
                               (va.setpoints, va.clean.values, va.clean.mask), train_cfg)
    residuals = det.fit_residual_model(residuals_of(model, tr), alpha, train.grid.sensor_ids)
    return DetectorSystem(model, stats, residuals, preprocess, history)


def retrain_system(system: DetectorSystem, train: TimeSeries, val: TimeSeries,
                   train_cfg: mlp.TrainConfig = mlp.TrainConfig(), alpha=None) -> DetectorSystem:
    """Last-layer retraining plus refreshed residual bands.

    The joint outlier statistics are refitted on ``train``: after a
    recalibration or a move the old covariance would reject every frame of
    the new condition.
    """
    old = system.sensor_ids
    new = train.grid.sensor_ids
    if len(new) < len(old):
        raise ConfigurationError(f"cannot retrain a {len(old)}-sensor model on {len(new)} sensors")
    if tuple(new[:len(old)]) != tuple(old):
        raise ConfigurationError("the model's sensors must come first, in the same order, in the new grid")
    stats = pp.fit_grid_statistics(pp.threshold_series(train), system.preprocess)
    tr = clean(train, stats, system.preprocess)
    va = clean(val, stats, system.preprocess)
    model = mlp.retrain_last_layer(system.model, (tr.setpoints, tr.clean.values, tr.clean.mask),
                                   (va.setpoints, va.clean.values, va.clean.mask), train_cfg, new)
    alpha = system.residuals.alpha if alpha is None else alpha
    residuals = det.fit_residual_model(residuals_of(model, tr), alpha, new)
    return DetectorSystem(model, stats, residuals, system.preprocess)


def sensor_mae(system: DetectorSystem, series: TimeSeries) -> np.ndarray:
    out = clean(series, system.stats, system.preprocess, drop_outliers=False)
    with np.errstate(invalid="ignore"):
        return np.nanmean(np.abs(residuals_of(system.model, out)), axis=0)


def training_report(system: DetectorSystem, kind: str = "") -> str:
    r = system.residuals
    lines = [
        f"grid: {kind} {len(system.sensor_ids)} sensors",
        f"trained_epochs: {system.model.trained_epochs}",
    ]
    if system.history:
        last = system.history[-1]
        best = min(system.history, key=lambda h: h["val_mse"])
        lines.append(f"epochs run: {last['epoch']}, best val_mse {best['val_mse']:.6g} at epoch {best['epoch']}")
    lines.append(f"alpha: {r.alpha}")
    lines.append("sensor        mu            sigma         ci_lo         ci_hi         KS stat   KS p      verdict")
    for j, sid in enumerate(system.sensor_ids):
        verdict = "normal" if r.gof_passed[j] else "non-normal (empirical band)"
        lines.append(
            f"{sid:<13} {r.mu[j]:<+13.6f} {r.sigma[j]:<13.6f} {r.ci_lo[j]:<+13.6f} {r.ci_hi[j]:<+13.6f} "
            f"{r.ks_statistic[j]:<9.4f} {r.ks_pvalue[j]:<9.3g} {verdict}"
        )
    return "\n".join(lines) + "\n"


# -- streaming detection ------------------------------------------------------------------

class StreamEngine:
    """Incremental preprocessing, prediction and alarm update.

    A frame is finalized once ``sg_window - 1`` later frames have arrived (or
    on :meth:`flush`); that much look-ahead and look-back fixes its smoothed
    value.  Outlier frames are reported but not dropped, so the smoothed
    readings the detector sees are never blanked by the joint outlier test.
    """

    def __init__(self, system: DetectorSystem, grid: SensorGrid, config: det.DetectorConfig = det.DetectorConfig(),
                 state: det.DetectorState | None = None, trace: bool = False):
        system.check_grid(grid)
        self.traces = [] if trace else None
        self.system = system
        self.grid = grid
        self.span = system.preprocess.sg_window - 1
        self.state = state or det.DetectorState(grid.sensor_ids, config, grid.kind.tolerance, grid.cadence_minutes)
        self.minutes = np.empty(0, np.int64)
        self.values = np.empty((0, grid.size))
        self.mask = np.empty((0, grid.size), bool)
        self.done = 0  # buffer index of the first frame not yet finalized
        self.frames_seen = 0
        self.frames_final = 0
        self.status_day = None
        self.day_frames = 0
        self.day_outliers = 0
        self.last_checkpoint = 0

    @property
    def last_ingested(self):
        return int(self.minutes[-1]) if len(self.minutes) else self.state.last_minute

    def push(self, minutes, values, mask=None) -> list:
        """Add frames (strictly after everything seen so far); returns new records."""
        minutes = np.asarray(minutes, dtype=np.int64).reshape(-1)
        if len(minutes) == 0:
            return []
        values = np.asarray(values, dtype=float).reshape(len(minutes), self.grid.size)
        mask = np.isfinite(values) if mask is None else np.asarray(mask, dtype=bool).reshape(values.shape)
        last = self.last_ingested
        if last is not None and minutes[0] <= last:
            raise InputError("frames must arrive in strictly increasing time order")
        self.minutes = np.concatenate([self.minutes, minutes])
        self.values = np.concatenate([self.values, np.where(mask, values, np.nan)])
        self.mask = np.concatenate([self.mask, mask])
        self.frames_seen += len(minutes)
        return self._advance(len(self.minutes) - self.span)

    def flush(self) -> list:
        """Finalize every buffered frame and close the current status day."""
        records = self._advance(len(self.minutes))
        if self.status_day is not None:
            records.append(self._status())
        return records

    def _advance(self, upto: int) -> list:
        if upto <= self.done:
            return []
        lo = max(0, self.done - self.span)
        view = TimeSeries(self.grid, self.minutes[lo:], self.values[lo:], self.mask[lo:])
        out = clean(view, self.system.stats, self.system.preprocess, drop_outliers=False)
        a, b = self.done - lo, upto - lo
        sp = out.setpoints[a:b]
        minutes = self.minutes[self.done:upto]
        pred = mlp.predict_aligned(self.system.model, sp, minutes)
        err = np.where(out.clean.mask[a:b], out.clean.values[a:b] - pred, np.nan)
        codes = det.classify(err, self.system.residuals)
        records = self._detect(minutes, codes, err, out.outlier[a:b])
        self.frames_final += upto - self.done
        self.done = upto
        keep = max(0, self.done - self.span)
        if keep:
            self.minutes = self.minutes[keep:]
            self.values = self.values[keep:]
            self.mask = self.mask[keep:]
            self.done -= keep
        return records

    def _detect(self, minutes, codes, err, outlier) -> list:
        records = []
        days = minutes // DAY
        cuts = np.nonzero(np.diff(days))[0] + 1
        for a, b in zip([0, *cuts], [*cuts, len(minutes)]):
            day = int(days[a])
            if self.status_day is not None and day != self.status_day:
                records.append(self._status())
            self.status_day = day
            if self.traces is None:
                events = self.state.advance(minutes[a:b], codes[a:b], err[a:b])
            else:
                events, *trace = self.state.advance(minutes[a:b], codes[a:b], err[a:b], trace=True)
                self.traces.append(trace)
            records.extend(ev.to_record() for ev in events)
            self.day_frames += int(b - a)
            self.day_outliers += int(outlier[a:b].sum())
            if minutes[b - 1] % DAY == DAY - 1:
                records.append(self._status())
        return records

    def _status(self) -> dict:
        rec = det.status_record(self.state, self.state.last_minute, frames=int(self.day_frames),
                                outlier_frames=int(self.day_outliers))
        self.status_day = None
        self.day_frames = 0
        self.day_outliers = 0
        return rec

    # -- checkpoints --------------------------------------------------------

    def checkpoint_due(self) -> bool:
        return self.frames_final - self.last_checkpoint >= CHECKPOINT_EVERY

    def checkpoint(self) -> dict:
        self.last_checkpoint = self.frames_final
        return {
            "format_version": 1,
            "detector": self.state.to_dict(),
            "buffer_minutes": self.minutes.tolist(),
            "buffer_values": [[None if not m else v for v, m in zip(row, mrow)]
                              for row, mrow in zip(self.values.tolist(), self.mask.tolist())],
            "done": self.done,
            "frames_seen": self.frames_seen,
            "frames_final": self.frames_final,
            "status_day": self.status_day,
            "day_frames": self.day_frames,
            "day_outliers": self.day_outliers,
        }

    @classmethod
    def resume(cls, system: DetectorSystem, grid: SensorGrid, data: dict) -> "StreamEngine":
        if data.get("format_version") != 1:
            raise ModelFormatError(f"unsupported checkpoint version {data.get('format_version')!r}",
                                   field="format_version")
        state = det.DetectorState.from_dict(data["detector"])
        if state.sensor_ids != tuple(grid.sensor_ids):
            raise ConfigurationError("checkpoint was written for a different grid")
        eng = cls(system, grid, state.config, state)
        rows = data["buffer_values"]
        eng.minutes = np.array(data["buffer_minutes"], np.int64)
        eng.mask = np.array([[v is not None for v in row] for row in rows], bool).reshape(-1, grid.size)
        eng.values = np.array([[np.nan if v is None else v for v in row] for row in rows],
                              float).reshape(-1, grid.size)
        for key in ("done", "frames_seen", "frames_final", "status_day", "day_frames", "day_outliers"):
            setattr(eng, key, data[key])
        eng.last_checkpoint = eng.frames_final
        return eng


def detect_series(system: DetectorSystem, series: TimeSeries, config: det.DetectorConfig = det.DetectorConfig(),
                  trace: bool = False):
    """Replay a whole series; returns the records (and density traces if asked).

    With ``trace=True`` returns ``(records, minutes, upper, lower)`` where the
    density arrays cover every finalized minute.
    """
    engine = StreamEngine(system, series.grid, config, trace=trace)
    records = engine.push(series.minutes, series.values, series.mask) + engine.flush()
    if not trace:
        return records
    n = series.grid.size
    parts = engine.traces or [(np.empty(0, np.int64), np.empty((0, n)), np.empty((0, n)))]
    return (records, *(np.concatenate([p[k] for p in parts]) for k in range(3)))


def write_records(records, fh):
    for rec in records:
        fh.write(det.dumps_record(rec) + "\n")


def read_records(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or rec.get("type") not in ("event", "status"):
                raise InputError(f"line {lineno}: record without a valid 'type'")
            out.append(rec)
    return out
