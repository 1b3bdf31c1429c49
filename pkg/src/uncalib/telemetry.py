"""Sensor grid types, minute timestamps and the wide CSV format.

Timestamps are carried as integer minutes since the Unix epoch (UTC).  A
:class:`TimeSeries` stores its frames column-wise as numpy arrays; masked
slots hold ``nan`` and are never read.
"""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, OrderingError, SchemaError

_TS_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})Z$")
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)

KINDS = ("temperature", "humidity", "pressure")


@dataclass(frozen=True)
class SensorKind:
    kind: str
    unit: str
    tolerance: float
    alarm_lo: float
    alarm_hi: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown sensor kind {self.kind!r}")
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be positive")
        if not self.alarm_lo < self.alarm_hi:
            raise ConfigurationError("alarm_lo must be below alarm_hi")

    @classmethod
    def default(cls, kind: str, **overrides) -> "SensorKind":
        params = dict(DEFAULT_KINDS[kind].__dict__)
        params.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**params)


DEFAULT_KINDS = {
    "temperature": SensorKind("temperature", "°C", 0.5, 15.0, 30.0),
    "humidity": SensorKind("humidity", "%RH", 3.0, 20.0, 70.0),
    "pressure": SensorKind("pressure", "Pa", 0.5, -50.0, 50.0),
}


@dataclass(frozen=True)
class SensorGrid:
    """Ordered set of same-kind sensors served by one model.

    The order of ``sensor_ids`` defines the output indexing of the network
    and must not change for the life of a model.
    """

    sensor_ids: tuple
    kind: SensorKind
    cadence_minutes: int = 1

    def __post_init__(self):
        ids = tuple(str(s) for s in self.sensor_ids)
        object.__setattr__(self, "sensor_ids", ids)
        if not ids:
            raise ConfigurationError("a grid needs at least one sensor")
        if len(set(ids)) != len(ids):
            raise ConfigurationError("sensor ids must be unique")
        if int(self.cadence_minutes) < 1:
            raise ConfigurationError("cadence_minutes must be a positive integer")

    @property
    def size(self) -> int:
        return len(self.sensor_ids)

    @property
    def sensors(self) -> list:
        return [(sid, self.kind) for sid in self.sensor_ids]

    def subgrid(self, sensor_ids: Sequence[str]) -> "SensorGrid":
        return SensorGrid(tuple(sensor_ids), self.kind, self.cadence_minutes)


# -- timestamps --------------------------------------------------------------

def parse_timestamp(text: str) -> int:
    """Parse ``YYYY-MM-DDTHH:MM:SSZ`` into epoch minutes; seconds must be 0."""
    m = _TS_RE.match(text)
    if m is None:
        raise ValueError(f"bad timestamp {text!r}")
    year, month, day, hour, minute, second = map(int, m.groups())
    if second != 0:
        raise ValueError(f"sub-minute timestamp {text!r}")
    dt = datetime(year, month, day, hour, minute, tzinfo=timezone.utc)
    return int((dt - _EPOCH).total_seconds()) // 60


def format_timestamp(minute: int) -> str:
    return np.datetime_as_string(np.datetime64(int(minute), "m"), unit="s") + "Z"


def format_timestamps(minutes: np.ndarray) -> list:
    strings = np.datetime_as_string(np.asarray(minutes, dtype="int64").astype("datetime64[m]"), unit="s")
    return [s + "Z" for s in strings.tolist()]


# -- frames and series -------------------------------------------------------

@dataclass(frozen=True)
class ReadingFrame:
    timestamp: int
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 1 or values.shape != mask.shape:
            raise ConfigurationError("values and mask must be 1-D with equal length")
        values = np.where(mask, values, np.nan)
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "timestamp", int(self.timestamp))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    def __len__(self):
        return len(self.values)

    def with_mask(self, mask) -> "ReadingFrame":
        return ReadingFrame(self.timestamp, self.values, np.asarray(mask, dtype=bool) & self.mask)


class TimeSeries:
    """Time-ordered frames of one grid, stored as arrays.

    Parameters
    ----------
    grid : SensorGrid
    minutes : array of int, shape (T,)
        Strictly increasing epoch minutes.
    values : array of float, shape (T, n)
    mask : array of bool, shape (T, n), optional
        ``True`` where a value is present.  Defaults to ``isfinite(values)``.
    """

    def __init__(self, grid: SensorGrid, minutes, values, mask=None):
        minutes = np.array(minutes, dtype=np.int64).reshape(-1)
        values = np.array(values, dtype=float).reshape(len(minutes), -1) if len(minutes) else np.empty((0, grid.size))
        if values.shape[1] != grid.size:
            raise SchemaError(
                f"frames carry {values.shape[1]} values but the grid has {grid.size} sensors"
            )
        if mask is None:
            mask = np.isfinite(values)
        else:
            mask = np.array(mask, dtype=bool).reshape(values.shape)
        if len(minutes) > 1:
            bad = np.nonzero(np.diff(minutes) <= 0)[0]
            if len(bad):
                raise OrderingError(f"timestamps not strictly increasing at frame {bad[0] + 1}", row=int(bad[0]) + 1)
        values = np.where(mask, values, np.nan)
        for a in (minutes, values, mask):
            a.flags.writeable = False
        self.grid = grid
        self.minutes = minutes
        self.values = values
        self.mask = mask

    def __len__(self):
        return len(self.minutes)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return TimeSeries(self.grid, self.minutes[item], self.values[item], self.mask[item])
        return ReadingFrame(self.minutes[item], self.values[item], self.mask[item])

    def __iter__(self) -> Iterator[ReadingFrame]:
        for i in range(len(self)):
            yield self[i]

    @property
    def frames(self) -> list:
        return list(self)

    @classmethod
    def from_frames(cls, grid: SensorGrid, frames: Iterable[ReadingFrame]) -> "TimeSeries":
        frames = list(frames)
        for f in frames:
            if len(f) != grid.size:
                raise SchemaError(f"frame at {format_timestamp(f.timestamp)} has {len(f)} slots, grid has {grid.size}")
        if not frames:
            return cls(grid, [], np.empty((0, grid.size)))
        return cls(
            grid,
            [f.timestamp for f in frames],
            np.stack([f.values for f in frames]),
            np.stack([f.mask for f in frames]),
        )

    def with_mask(self, mask) -> "TimeSeries":
        return TimeSeries(self.grid, self.minutes, self.values, self.mask & np.asarray(mask, dtype=bool))

    def with_values(self, values, mask=None) -> "TimeSeries":
        return TimeSeries(self.grid, self.minutes, values, self.mask if mask is None else mask)

    def select(self, sensor_ids: Sequence[str]) -> "TimeSeries":
        idx = [self.grid.sensor_ids.index(s) for s in sensor_ids]
        return TimeSeries(self.grid.subgrid(sensor_ids), self.minutes, self.values[:, idx], self.mask[:, idx])

    def gaps(self) -> np.ndarray:
        """Indices ``i`` where frame ``i`` does not directly follow frame ``i-1``."""
        step = self.grid.cadence_minutes
        return np.nonzero(np.diff(self.minutes) != step)[0] + 1

    def equals(self, other: "TimeSeries") -> bool:
        return (
            self.grid == other.grid
            and np.array_equal(self.minutes, other.minutes)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    def __repr__(self):
        span = ""
        if len(self):
            span = f", {format_timestamp(self.minutes[0])}..{format_timestamp(self.minutes[-1])}"
        return f"TimeSeries({self.grid.kind.kind}, {self.grid.size} sensors, {len(self)} frames{span})"


def concat(parts: Sequence[TimeSeries]) -> TimeSeries:
    grid = parts[0].grid
    return TimeSeries(
        grid,
        np.concatenate([p.minutes for p in parts]),
        np.concatenate([p.values for p in parts]),
        np.concatenate([p.mask for p in parts]),
    )


# -- CSV ---------------------------------------------------------------------

def parse_csv(data, grid: SensorGrid) -> TimeSeries:
    """Read the wide CSV format: ``timestamp,<id1>,<id2>,...``.

    ``data`` may be bytes, str or a binary/text stream.  Empty cells become
    masked slots.
    """
    if hasattr(data, "read"):
        data = data.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    reader = csv.reader(io.StringIO(data, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty input: missing header row", column=0) from None
    expected = ["timestamp", *grid.sensor_ids]
    if header != expected:
        for col, (got, want) in enumerate(zip(header + [None] * len(expected), expected)):
            if got != want:
                raise SchemaError(f"column {col + 1}: expected {want!r}, found {got!r}", column=col + 1)
        raise SchemaError(f"column {len(expected) + 1}: unexpected extra column {header[len(expected)]!r}",
                          column=len(expected) + 1)

    minutes, values, mask = parse_rows(reader, grid, first_row=1)
    return TimeSeries(grid, minutes, values, mask)


def parse_rows(rows, grid: SensorGrid, first_row: int = 1, prev_minute=None):
    """Parse already-split CSV body rows into ``(minutes, values, mask)`` arrays.

    Rows are numbered from 1 for the first data row (the header is not
    counted); ``first_row`` is the number of the first element and
    ``prev_minute`` the timestamp of the row before it, if any.
    """
    n = grid.size
    minutes = []
    out = []
    masks = []
    prev = prev_minute
    for rownum, row in enumerate(rows, start=first_row):
        if len(row) != n + 1:
            raise FormatError(f"row {rownum}: expected {n + 1} cells, found {len(row)}", row=rownum)
        try:
            minute = parse_timestamp(row[0])
        except ValueError as exc:
            raise FormatError(f"row {rownum}, column 1: {exc}", row=rownum, column=1) from None
        if prev is not None and minute <= prev:
            raise OrderingError(f"row {rownum}: timestamp {row[0]} does not follow the previous row", row=rownum)
        prev = minute
        vals = [math.nan] * n
        present = [False] * n
        for j, cell in enumerate(row[1:]):
            if cell == "":
                continue
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise FormatError(f"row {rownum}, column {j + 2}: cannot parse {cell!r}", row=rownum, column=j + 2)
            vals[j] = v
            present[j] = True
        minutes.append(minute)
        out.append(vals)
        masks.append(present)
    values = np.array(out, dtype=float).reshape(len(out), n)
    mask = np.array(masks, dtype=bool).reshape(len(out), n)
    return np.array(minutes, dtype=np.int64), values, mask


def write_csv(series: TimeSeries) -> bytes:
    """Render a series in the wide CSV format; floats use shortest round-trip repr."""
    out = ["timestamp," + ",".join(series.grid.sensor_ids)]
    stamps = format_timestamps(series.minutes)
    values = series.values.tolist()
    mask = series.mask.tolist()
    for ts, vals, present in zip(stamps, values, mask):
        cells = [repr(v) if p else "" for v, p in zip(vals, present)]
        out.append(ts + "," + ",".join(cells))
    return ("\n".join(out) + "\n").encode("utf-8")


def read_csv_file(path, grid: SensorGrid) -> TimeSeries:
    with open(path, "rb") as fh:
        return parse_csv(fh.read(), grid)


def read_header(path) -> list:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        line = fh.readline()
    if not line.strip():
        raise SchemaError(f"{path}: empty file, missing header", column=0)
    cols = next(csv.reader([line]))
    if not cols or cols[0] != "timestamp":
        raise SchemaError(f"{path}: first column must be 'timestamp'", column=1)
    return cols[1:]


# -- splitting ---------------------------------------------------------------

def split_dataset(series: TimeSeries, fractions: Sequence[float]) -> list:
    """Cut a series into contiguous chronological segments.

    Segment ``k`` has ``floor(fractions[k] * N)`` frames; the last segment
    takes whatever remains.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(not f > 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be positive and sum to 1, got {fractions}")
    n = len(series)
    bounds = [0]
    for f in fractions[:-1]:
        bounds.append(min(n, bounds[-1] + int(math.floor(f * n))))
    bounds.append(n)
    return [series[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
