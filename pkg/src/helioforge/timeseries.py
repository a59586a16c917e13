"""Uniformly sampled series with per-sample quality flags, plus CSV I/O."""

from __future__ import annotations

import csv
import datetime as dt
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

SECONDS_PER_DAY = 86400


class Flag(enum.IntEnum):
    VALID = 0
    MISSING = 1
    OUTLIER = 2
    INTERPOLATED = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "Flag":
        return cls[text.strip().upper()]


# Flags whose numeric value may be consumed downstream.
USABLE = (Flag.VALID, Flag.INTERPOLATED)


def to_datetime64(value) -> np.datetime64:
    """Coerce str/datetime/datetime64 to a UTC ``datetime64[s]``."""
    if isinstance(value, np.datetime64):
        return value.astype("datetime64[s]")
    if isinstance(value, str):
        text = value.strip()
        if text.endswith("Z"):
            text = text[:-1]
        elif text.endswith("+00:00"):
            text = text[:-6]
        return np.datetime64(text, "s")
    # datetime.datetime; aware values are converted to UTC first
    if getattr(value, "tzinfo", None) is not None:
        value = value.astimezone(dt.timezone.utc).replace(tzinfo=None)
    return np.datetime64(value, "s")


def format_timestamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "s")) + "Z"


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Scalar series on the implicit grid ``start_time + i * step``.

    ``values`` keeps whatever number was recorded even for flagged samples;
    use :meth:`usable` to get NaN wherever the flag forbids consumption.
    """

    start_time: np.datetime64
    step: int
    values: np.ndarray
    flags: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if int(self.step) <= 0:
            raise ValueError("step must be positive")
        values = np.array(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError("values must be one-dimensional")
        if self.flags is None:
            flags = np.where(np.isnan(values), Flag.MISSING, Flag.VALID).astype(np.int8)
        else:
            flags = np.array(self.flags, dtype=np.int8)
        if flags.shape != values.shape:
            raise ValueError("values and flags must have equal length")
        # a NaN can never be consumed, whatever its flag says
        flags = np.where(np.isnan(values) & np.isin(flags, USABLE), Flag.MISSING, flags).astype(np.int8)
        values.setflags(write=False)
        flags.setflags(write=False)
        object.__setattr__(self, "start_time", to_datetime64(self.start_time))
        object.__setattr__(self, "step", int(self.step))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "flags", flags)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def usable_mask(self) -> np.ndarray:
        return np.isin(self.flags, USABLE)

    def usable(self) -> np.ndarray:
        """Values with NaN at every sample that is missing or an outlier."""
        return np.where(self.usable_mask, self.values, np.nan)

    def time_at(self, index: int) -> np.datetime64:
        return self.start_time + np.timedelta64(int(index) * self.step, "s")

    def times(self) -> np.ndarray:
        return self.start_time + np.arange(len(self)) * np.timedelta64(self.step, "s")

    def index_of(self, ts) -> int:
        """Grid index of ``ts``; raises if it is not on the grid."""
        delta = int((to_datetime64(ts) - self.start_time) / np.timedelta64(1, "s"))
        index, rem = divmod(delta, self.step)
        if rem:
            raise ValueError(f"{ts} is not on the series grid")
        return index

    @property
    def end_time(self) -> np.datetime64:
        """Timestamp one step past the last sample."""
        return self.time_at(len(self))

    @property
    def samples_per_day(self) -> int:
        if SECONDS_PER_DAY % self.step:
            raise ValueError("step does not divide a day")
        return SECONDS_PER_DAY // self.step

    def instant_of_day(self) -> np.ndarray:
        """Zero-based time-of-day index of every sample."""
        seconds = (self.times() - self.times().astype("datetime64[D]")) / np.timedelta64(1, "s")
        return (seconds // self.step).astype(int)

    def replace(self, values=None, flags=None) -> "TimeSeries":
        return TimeSeries(
            self.start_time,
            self.step,
            self.values if values is None else values,
            self.flags if flags is None else flags,
        )

    def slice(self, start: int, stop: int) -> "TimeSeries":
        start = max(0, start)
        return TimeSeries(self.time_at(start), self.step, self.values[start:stop], self.flags[start:stop])

    def same_grid(self, other: "TimeSeries") -> bool:
        return self.start_time == other.start_time and self.step == other.step and len(self) == len(other)


@dataclass(frozen=True)
class DatasetSplit:
    """Three consecutive index ranges ``[start, stop)`` on a series grid."""

    calibration: tuple[int, int]
    ensemble_calibration: tuple[int, int]
    validation: tuple[int, int]

    def __post_init__(self):
        ranges = (self.calibration, self.ensemble_calibration, self.validation)
        for lo, hi in ranges:
            if lo < 0 or hi <= lo:
                raise ValueError(f"empty or negative range ({lo}, {hi})")
        for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
            if lo < hi:
                raise ValueError("ranges must be disjoint and ordered")

    @classmethod
    def by_days(cls, calibration: int, ensemble: int, validation: int, samples_per_day: int = 96) -> "DatasetSplit":
        a = calibration * samples_per_day
        b = a + ensemble * samples_per_day
        c = b + validation * samples_per_day
        return cls((0, a), (a, b), (b, c))


def read_csv(path, snap: float = 1.0, step: int | None = None) -> TimeSeries:
    """Read ``timestamp,value[,flag]`` rows onto a uniform grid.

    Timestamps within ``snap`` seconds of a grid point are moved onto it;
    anything further off is rejected. Grid points with no row become missing.
    When ``step`` is not given it is the most common spacing in the file.
    """
    times, values, flags = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"timestamp", "value"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header timestamp,value")
        has_flag = "flag" in reader.fieldnames
        for row in reader:
            times.append(to_datetime64(row["timestamp"]))
            text = (row["value"] or "").strip()
            values.append(float(text) if text and text.lower() != "nan" else np.nan)
            flags.append(Flag.parse(row["flag"]) if has_flag and row["flag"] else None)
    return series_from_records(times, values, flags, snap=snap, step=step, source=str(path))


def series_from_records(times, values, flags=None, snap: float = 1.0, step: int | None = None, source="input") -> TimeSeries:
    if not len(times):
        raise ValueError(f"{source}: empty input")
    t = np.array([to_datetime64(x) for x in times], dtype="datetime64[s]")
    order = np.argsort(t, kind="stable")
    t = t[order]
    seconds = (t - t[0]) / np.timedelta64(1, "s")
    if step is None:
        diffs = np.diff(seconds)
        diffs = diffs[diffs > snap]
        if not len(diffs):
            raise ValueError(f"{source}: cannot infer sampling step")
        uniq, counts = np.unique(np.round(diffs).astype(int), return_counts=True)
        step = int(uniq[np.argmax(counts)])
    index = np.round(seconds / step).astype(int)
    off = np.abs(seconds - index * step)
    if np.any(off > snap):
        bad = t[np.argmax(off > snap)]
        raise ValueError(f"{source}: irregular timestamp {bad} (snap tolerance {snap}s)")
    if np.any(np.diff(index) == 0):
        raise ValueError(f"{source}: duplicate timestamps")
    n = int(index[-1]) + 1
    out_v = np.full(n, np.nan)
    out_f = np.full(n, Flag.MISSING, dtype=np.int8)
    vals = np.asarray(values, dtype=float)[order]
    out_v[index] = vals
    if flags is None:
        flags = [None] * len(vals)
    fl = [flags[i] for i in order]
    out_f[index] = [
        (Flag.MISSING if np.isnan(v) else Flag.VALID) if f is None else f for f, v in zip(fl, vals)
    ]
    return TimeSeries(t[0], step, out_v, out_f)


def write_csv(series: TimeSeries, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "value", "flag"])
        for ts, v, f in zip(series.times(), series.values, series.flags):
            writer.writerow([format_timestamp(ts), "" if np.isnan(v) else repr(float(v)), Flag(f).label])


def concat(parts: Iterable[TimeSeries]) -> TimeSeries:
    """Join series that continue each other on the same grid."""
    parts = list(parts)
    first = parts[0]
    for prev, nxt in zip(parts, parts[1:]):
        if nxt.step != first.step or nxt.start_time != prev.end_time:
            raise ValueError("series are not contiguous")
    return TimeSeries(
        first.start_time,
        first.step,
        np.concatenate([p.values for p in parts]),
        np.concatenate([p.flags for p in parts]),
    )


@dataclass(frozen=True, eq=False)
class ForecastMatrix:
    """Per-origin prediction vectors for one predictor.

    Row ``r`` holds predictions for ``origins[r] + (h - 1) * step`` for
    ``h = 1..horizon``: the origin is the first predicted instant, and only
    data strictly before it may have been used. NaN marks a missing entry.
    """

    origins: np.ndarray
    values: np.ndarray
    step: int = 900
    predictor_id: str = ""

    def __post_init__(self):
        origins = np.array([to_datetime64(o) for o in np.atleast_1d(self.origins)], dtype="datetime64[s]")
        values = np.array(self.values, dtype=float)
        if values.ndim == 1 and len(origins) == 1:
            values = values[None, :]
        if values.ndim != 2 or values.shape[0] != len(origins):
            raise ValueError("values must have one row per origin")
        values.setflags(write=False)
        origins.setflags(write=False)
        object.__setattr__(self, "origins", origins)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "step", int(self.step))

    @property
    def horizon(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return len(self.origins)

    @classmethod
    def on_grid(cls, grid: TimeSeries, origin_index, values, predictor_id: str = "") -> "ForecastMatrix":
        origin_index = np.asarray(origin_index, dtype=np.int64)
        origins = grid.start_time + origin_index * np.timedelta64(grid.step, "s")
        return cls(origins, values, grid.step, predictor_id)

    def origin_index(self, grid: TimeSeries) -> np.ndarray:
        """Grid indices of the origins; every origin must lie on the grid."""
        if grid.step != self.step:
            raise ValueError("lead step differs from grid step")
        delta = (self.origins - grid.start_time) / np.timedelta64(1, "s")
        idx, rem = np.divmod(delta.astype(np.int64), grid.step)
        if np.any(rem):
            raise ValueError("origins are off the grid")
        return idx

    def target_index(self, grid: TimeSeries) -> np.ndarray:
        """``(n_origins, horizon)`` grid indices of the predicted instants."""
        return self.origin_index(grid)[:, None] + np.arange(self.horizon)[None, :]

    def select(self, rows) -> "ForecastMatrix":
        return ForecastMatrix(self.origins[rows], self.values[rows], self.step, self.predictor_id)

    def with_values(self, values, predictor_id: str | None = None) -> "ForecastMatrix":
        return ForecastMatrix(self.origins, values, self.step, self.predictor_id if predictor_id is None else predictor_id)

    def compatible(self, other: "ForecastMatrix") -> bool:
        return (
            self.step == other.step
            and self.values.shape == other.values.shape
            and bool(np.all(self.origins == other.origins))
        )


def read_forecast_csv(path, predictor_id: str = "") -> ForecastMatrix:
    """Read ``origin,lead,value`` rows (lead counted from 1, step inferred)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            text = (row["value"] or "").strip()
            rows.append((to_datetime64(row["origin"]), int(row["lead"]), float(text) if text else np.nan, row.get("step")))
    if not rows:
        raise ValueError(f"{path}: empty input")
    origins = sorted({r[0] for r in rows})
    horizon = max(r[1] for r in rows)
    step = int(rows[0][3]) if rows[0][3] else 900
    pos = {o: i for i, o in enumerate(origins)}
    values = np.full((len(origins), horizon), np.nan)
    for o, lead, v, _ in rows:
        values[pos[o], lead - 1] = v
    return ForecastMatrix(np.array(origins), values, step, predictor_id)


def write_forecast_csv(fm: ForecastMatrix, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["origin", "lead", "step", "value"])
        for o, row in zip(fm.origins, fm.values):
            for lead, v in enumerate(row, 1):
                writer.writerow([format_timestamp(o), lead, fm.step, "" if np.isnan(v) else repr(float(v))])
