"""Outlier detection, short-gap filling and resampling onto a common grid."""

from __future__ import annotations

import logging

import numpy as np

from .timeseries import SECONDS_PER_DAY, Flag, TimeSeries

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 2
DEFAULT_THRESHOLD = 3.0
DEFAULT_MAX_GAP = 3
GRID_STEP = 900


def detect_outliers_neighbor(series: TimeSeries, window: int = DEFAULT_WINDOW, threshold: float = DEFAULT_THRESHOLD) -> TimeSeries:
    """Flag samples far from the mean of their neighbours.

    A valid sample ``x_i`` is an outlier when
    ``|x_i - m_i| > threshold * max(1, |m_i|)``, where ``m_i`` averages the
    usable samples among the ``window`` positions on each side. Values are
    never modified.
    """
    n = len(series)
    if n == 0:
        raise ValueError("empty input")
    if window < 1:
        raise ValueError("window must be >= 1")
    if n < 2 * window + 1:
        raise ValueError("window exceeds series")
    x = series.usable()
    total = np.zeros(n)
    count = np.zeros(n)
    for k in range(1, window + 1):
        # right neighbour of i is x[i+k], left neighbour is x[i-k]
        for target, shifted in ((slice(0, n - k), x[k:]), (slice(k, n), x[:-k])):
            ok = ~np.isnan(shifted)
            total[target] += np.where(ok, shifted, 0.0)
            count[target] += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count
    test = (series.flags == Flag.VALID) & (count > 0)
    dev = np.abs(series.values - mean)
    hit = test & (dev > threshold * np.maximum(1.0, np.abs(mean)))
    flags = np.where(hit, Flag.OUTLIER, series.flags)
    return series.replace(flags=flags)


def cross_match_outliers(
    gp: TimeSeries,
    sr: TimeSeries,
    gp_high: float | None = None,
    sr_low: float = 5.0,
    gp_low: float | None = None,
    sr_high: float = 200.0,
) -> TimeSeries:
    """Flag GP samples inconsistent with SR on the same grid.

    Flags (GP high and SR near zero) or (GP near zero and SR high). The GP
    thresholds default to 20% and 2% of the GP peak.
    """
    if not gp.same_grid(sr):
        raise ValueError("unaligned series")
    g = gp.usable()
    s = sr.usable()
    if gp_high is None or gp_low is None:
        peak = np.nanmax(g) if np.any(~np.isnan(g)) else 0.0
        gp_high = 0.2 * peak if gp_high is None else gp_high
        gp_low = 0.02 * peak if gp_low is None else gp_low
    with np.errstate(invalid="ignore"):
        bad = ((g >= gp_high) & (s <= sr_low)) | ((g <= gp_low) & (s >= sr_high))
    bad &= gp.flags == Flag.VALID
    return gp.replace(flags=np.where(bad, Flag.OUTLIER, gp.flags))


def _runs(mask: np.ndarray):
    """Yield ``(start, stop)`` of maximal True runs."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return zip(edges[::2], edges[1::2])


def fill_gaps(series: TimeSeries, max_gap: int = DEFAULT_MAX_GAP) -> TimeSeries:
    """Replace short interior runs of missing/outlier samples.

    Each run of at most ``max_gap`` samples with a usable sample on both
    sides becomes the mean of those two samples, flagged interpolated.
    """
    if max_gap < 1:
        raise ValueError("max_gap must be >= 1")
    usable = series.usable_mask
    values = series.values.copy()
    flags = series.flags.copy()
    n = len(series)
    for start, stop in _runs(~usable):
        if stop - start > max_gap or start == 0 or stop == n:
            continue
        values[start:stop] = 0.5 * (values[start - 1] + values[stop])
        flags[start:stop] = Flag.INTERPOLATED
    return series.replace(values=values, flags=flags)


def _epoch_seconds(ts: np.datetime64) -> int:
    return int(ts.astype("datetime64[s]").astype(np.int64))


def resample(series: TimeSeries, target_step: int) -> TimeSeries:
    """Move a series onto a grid with spacing ``target_step`` seconds.

    Coarsening averages the usable samples whose timestamps fall in each
    target window (windows are aligned to multiples of ``target_step`` since
    the epoch); a window without usable samples is missing. Refining repeats
    each value (zero-order hold) and copies its flag.
    """
    step = series.step
    target_step = int(target_step)
    if target_step <= 0:
        raise ValueError("target_step must be positive")
    if target_step == step:
        return series.replace()
    if target_step < step:
        if step % target_step:
            raise ValueError("incompatible steps")
        k = step // target_step
        return TimeSeries(series.start_time, target_step, np.repeat(series.values, k), np.repeat(series.flags, k))
    start = _epoch_seconds(series.start_time)
    times = start + step * np.arange(len(series))
    first = (start // target_step) * target_step
    window = (times - first) // target_step
    n_out = int(window[-1]) + 1 if len(series) else 0
    x = series.usable()
    ok = ~np.isnan(x)
    sums = np.bincount(window[ok], weights=x[ok], minlength=n_out)
    counts = np.bincount(window[ok], minlength=n_out)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    flags = np.where(counts > 0, Flag.VALID, Flag.MISSING)
    return TimeSeries(np.datetime64(first, "s"), target_step, values, flags)


def align(series: TimeSeries, start, length: int) -> TimeSeries:
    """Re-window ``series`` to ``length`` samples from ``start`` (padding with missing)."""
    offset = series.index_of(start)
    values = np.full(length, np.nan)
    flags = np.full(length, Flag.MISSING, dtype=np.int8)
    lo = max(0, offset)
    hi = min(len(series), offset + length)
    if hi > lo:
        values[lo - offset:hi - offset] = series.values[lo:hi]
        flags[lo - offset:hi - offset] = series.flags[lo:hi]
    return TimeSeries(start, series.step, values, flags)


def common_window(*series: TimeSeries) -> tuple[np.datetime64, int]:
    """Start and length of the span covered by every series (same step assumed)."""
    start = max(s.start_time for s in series)
    end = min(s.end_time for s in series)
    step = series[0].step
    length = max(0, int((end - start) / np.timedelta64(step, "s")))
    return start, length


def clean_pair(
    gp: TimeSeries,
    sr: TimeSeries,
    window: int = DEFAULT_WINDOW,
    threshold: float = DEFAULT_THRESHOLD,
    max_gap: int = DEFAULT_MAX_GAP,
    target_step: int = GRID_STEP,
    neighbor_first: bool = True,
    cross_match: dict | None = None,
) -> tuple[TimeSeries, TimeSeries]:
    """Full cleaning chain for a GP/SR pair; returns both on the target grid.

    GP is screened against its neighbours at its native rate, brought to the
    SR rate and cross-matched against SR, then both are gap-filled and moved
    to ``target_step``.
    """
    cross_match = cross_match or {}

    def neighbor(s):
        return detect_outliers_neighbor(s, window, threshold) if len(s) >= 2 * window + 1 else s

    def cross(g):
        g_at_sr = resample(g, sr.step) if g.step != sr.step else g
        start, length = common_window(g_at_sr, sr)
        return cross_match_outliers(align(g_at_sr, start, length), align(sr, start, length), **cross_match)

    if neighbor_first:
        gp_sr = cross(neighbor(gp))
    else:
        gp_sr = neighbor(cross(gp))
    sr_al = align(sr, gp_sr.start_time, len(gp_sr))
    gp_out = resample(fill_gaps(gp_sr, max_gap), target_step)
    sr_out = resample(fill_gaps(sr_al, max_gap), target_step)
    log.info("cleaning flagged %d GP outliers", int(np.sum(gp_sr.flags == Flag.OUTLIER)))
    return gp_out, sr_out


def clean_series(
    series: TimeSeries,
    window: int = DEFAULT_WINDOW,
    threshold: float = DEFAULT_THRESHOLD,
    max_gap: int = DEFAULT_MAX_GAP,
    target_step: int = GRID_STEP,
    detect: bool = True,
) -> TimeSeries:
    """Neighbour screening, gap filling and resampling for one series."""
    if detect and len(series) >= 2 * window + 1:
        series = detect_outliers_neighbor(series, window, threshold)
    return resample(fill_gaps(series, max_gap), target_step)


def daylight_mask(series: TimeSeries) -> np.ndarray:
    """Per sample: True unless its time-of-day is zero on every recorded day."""
    per_day = SECONDS_PER_DAY // series.step
    inst = series.instant_of_day()
    x = series.usable()
    lit = np.zeros(per_day, dtype=bool)
    ok = ~np.isnan(x)
    np.logical_or.at(lit, inst[ok], x[ok] != 0)
    return lit[inst]


__all__ = [
    "align",
    "clean_pair",
    "clean_series",
    "common_window",
    "cross_match_outliers",
    "daylight_mask",
    "detect_outliers_neighbor",
    "fill_gaps",
    "resample",
]
