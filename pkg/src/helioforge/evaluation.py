"""Normalised RMSE, rolling-origin backtests and ACF/PACF diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .timeseries import DatasetSplit, ForecastMatrix, TimeSeries

SHORT_HORIZON = 12
MEDIUM_HORIZON = 96

Predictor = Callable[[TimeSeries, int], np.ndarray]


def rmse_normalized(predicted, measured, M: float) -> float:
    """Root-mean-square error in percent of the peak ``M``."""
    p = np.asarray(predicted, dtype=float)
    m = np.asarray(measured, dtype=float)
    if p.shape != m.shape:
        raise ValueError("predicted and measured must have equal length")
    if p.size == 0:
        raise ValueError("empty input")
    if not M > 0:
        raise ValueError("M must be positive")
    return float(100.0 * np.sqrt(np.mean((p - m) ** 2)) / M)


def peak(series: TimeSeries) -> float:
    """Normalisation constant: the largest usable value in the record."""
    x = series.usable()
    if not np.any(~np.isnan(x)):
        raise ValueError("no usable samples")
    return float(np.nanmax(x))


@dataclass
class EvaluationReport:
    predictor_id: str
    horizon: int
    rmse: float
    per_origin_rmse: np.ndarray
    horizon_profile: np.ndarray
    M: float
    origins: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_origins(self) -> int:
        return len(self.per_origin_rmse)


def _score(pred: np.ndarray, truth: np.ndarray, M: float, predictor_id: str, origins, horizon: int) -> EvaluationReport:
    """Per-origin RMSE over available cells; the profile pools every origin per lead."""
    err2 = (pred - truth) ** 2
    ok = ~np.isnan(err2)
    counts = ok.sum(axis=1)
    has = counts > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        per_origin = 100.0 / M * np.sqrt(np.where(ok, err2, 0.0).sum(axis=1) / counts)
        lead_counts = ok.sum(axis=0)
        profile = 100.0 / M * np.sqrt(np.where(ok, err2, 0.0).sum(axis=0) / lead_counts)
    per_origin = per_origin[has]
    rmse = float(per_origin.mean()) if len(per_origin) else float("nan")
    return EvaluationReport(predictor_id, horizon, rmse, per_origin, profile, float(M), np.asarray(origins)[has])


def validation_origins(split: DatasetSplit, horizon: int, stride: int = 1) -> np.ndarray:
    """Origins whose whole horizon lies inside the validation range."""
    lo, hi = split.validation
    return np.arange(lo, hi - horizon + 1, stride, dtype=np.int64)


def rolling_backtest(
    predictor: Predictor,
    measured: TimeSeries,
    split: DatasetSplit,
    horizon: int = MEDIUM_HORIZON,
    stride: int = 1,
    M: float | None = None,
    daylight_only: bool = False,
    predictor_id: str = "",
) -> EvaluationReport:
    """Score ``predictor(history, horizon)`` from every validation origin.

    The predictor only ever receives a fresh copy of the samples before the
    origin, so it cannot see the values it is asked to predict.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    M = peak(measured) if M is None else M
    origins = validation_origins(split, horizon, stride)
    truth_all = measured.usable()
    preds = np.empty((len(origins), horizon))
    truth = np.empty((len(origins), horizon))
    for r, o in enumerate(origins):
        history = measured.slice(0, int(o))
        out = np.asarray(predictor(history, horizon), dtype=float)
        if out.shape != (horizon,):
            raise ValueError(f"predictor returned shape {out.shape}, expected ({horizon},)")
        preds[r] = out
        truth[r] = truth_all[o:o + horizon]
    if daylight_only:
        preds[np.all(truth == 0, axis=1)] = np.nan
    return _score(preds, truth, M, predictor_id, origins, horizon)


def evaluate_matrix(
    fm: ForecastMatrix,
    measured: TimeSeries,
    horizon: int = MEDIUM_HORIZON,
    M: float | None = None,
    origins: np.ndarray | None = None,
    daylight_only: bool = False,
) -> EvaluationReport:
    """Score precomputed forecasts on their first ``horizon`` leads."""
    if horizon > fm.horizon:
        raise ValueError("horizon exceeds the forecast length")
    M = peak(measured) if M is None else M
    idx = fm.origin_index(measured)
    rows = np.arange(len(fm)) if origins is None else np.flatnonzero(np.isin(idx, origins))
    targets = idx[rows, None] + np.arange(horizon)[None, :]
    meas = measured.usable()
    truth = np.full(targets.shape, np.nan)
    inside = targets < len(meas)
    truth[inside] = meas[targets[inside]]
    preds = fm.values[rows, :horizon].copy()
    if daylight_only:
        preds[np.all(truth == 0, axis=1)] = np.nan
    return _score(preds, truth, M, fm.predictor_id, idx[rows], horizon)


@dataclass
class TableRow:
    predictor_id: str
    method: str
    rmse_short: float
    rmse_medium: float


def compare_predictors(
    matrices: Sequence[tuple[ForecastMatrix, str]],
    measured: TimeSeries,
    split: DatasetSplit,
    M: float | None = None,
    stride: int = 1,
    daylight_only: bool = False,
) -> tuple[list[TableRow], dict[str, EvaluationReport]]:
    """Short- and medium-term scores for each ``(forecasts, method)``.

    Both horizons use the same origins (those with a full day inside the
    validation range), so the columns are comparable.
    """
    M = peak(measured) if M is None else M
    origins = validation_origins(split, MEDIUM_HORIZON, stride)
    rows, profiles = [], {}
    for fm, method in matrices:
        short = evaluate_matrix(fm, measured, SHORT_HORIZON, M, origins, daylight_only)
        medium = evaluate_matrix(fm, measured, MEDIUM_HORIZON, M, origins, daylight_only)
        rows.append(TableRow(fm.predictor_id, method, short.rmse, medium.rmse))
        profiles[fm.predictor_id] = medium
    return rows, profiles


def write_table(rows: Sequence[TableRow], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["predictor_id", "method", "rmse_s", "rmse_m"])
        for r in rows:
            w.writerow([r.predictor_id, r.method, f"{r.rmse_short:.3f}", f"{r.rmse_medium:.3f}"])


def write_profiles(reports: dict[str, EvaluationReport], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    ids = list(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lead_step", *ids])
        horizon = max(len(r.horizon_profile) for r in reports.values())
        for h in range(horizon):
            w.writerow([h + 1, *(f"{reports[i].horizon_profile[h]:.4f}" if h < len(reports[i].horizon_profile) else "" for i in ids)])


def sample_acf(series: TimeSeries | np.ndarray, max_lag: int) -> np.ndarray:
    """Sample autocorrelation for lags ``0..max_lag`` (missing samples skipped pairwise)."""
    x = series.usable() if isinstance(series, TimeSeries) else np.asarray(series, dtype=float)
    ok = ~np.isnan(x)
    n = int(ok.sum())
    if n < 2:
        raise ValueError("insufficient data")
    xc = np.where(ok, x - x[ok].mean(), 0.0)
    gamma0 = float(xc @ xc) / n
    if gamma0 <= 0:
        raise ValueError("zero variance")
    acov = np.array([xc[: len(xc) - k] @ xc[k:] for k in range(max_lag + 1)]) / n
    return acov / gamma0


def durbin_levinson(rho: np.ndarray) -> np.ndarray:
    """PACF for lags ``1..len(rho)-1`` from autocorrelations ``rho[0..]``."""
    max_lag = len(rho) - 1
    pacf = np.zeros(max_lag)
    phi = np.zeros(0)
    v = 1.0
    for k in range(1, max_lag + 1):
        num = rho[k] - phi @ rho[k - 1:0:-1] if k > 1 else rho[1]
        a = num / v
        phi = np.concatenate([phi - a * phi[::-1], [a]])
        v *= 1.0 - a * a
        pacf[k - 1] = a
        if v <= 0:
            break
    return pacf


@dataclass
class Correlogram:
    acf: np.ndarray  # lags 1..max_lag
    pacf: np.ndarray  # lags 1..max_lag
    band: float
    n: int

    def significant(self, which: str = "pacf") -> np.ndarray:
        """1-based lags outside the 95% band."""
        values = self.pacf if which == "pacf" else self.acf
        return np.flatnonzero(np.abs(values) > self.band) + 1


def acf_pacf(series: TimeSeries | np.ndarray, max_lag: int) -> Correlogram:
    """ACF, PACF (Durbin-Levinson) and the +-1.96/sqrt(n) band."""
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    rho = sample_acf(series, max_lag)
    x = series.usable() if isinstance(series, TimeSeries) else np.asarray(series, dtype=float)
    n = int((~np.isnan(x)).sum())
    return Correlogram(rho[1:], durbin_levinson(rho), 1.96 / np.sqrt(n), n)
