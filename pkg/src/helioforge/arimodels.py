"""Seasonally differenced autoregressive models (ARI / ARIX) and persistence.

The target is differenced once at the seasonal lag (96 samples = 24 h at
15-minute resolution); an AR regression on the differenced series, with
optional lagged differenced exogenous input, is fitted by least squares.
Multi-step forecasts iterate the one-step model and integrate back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import flatfile
from .timeseries import Flag, ForecastMatrix, TimeSeries

SEASONAL_LAG = 96
LONG_LAGS = (1, 2, 3, 4, 94, 95, 96, 97)
SHORT_LAGS = (1, 2, 3, 4)
EXO_LAGS = tuple(range(1, 13)) + (94, 95, 96, 97)


@dataclass(frozen=True)
class LagSpec:
    ar_lags: tuple[int, ...]
    exo_lags: tuple[int, ...] = ()
    seasonal_lag: int = SEASONAL_LAG

    def __post_init__(self):
        ar = tuple(int(k) for k in self.ar_lags)
        exo = tuple(int(k) for k in self.exo_lags)
        for name, lags, lowest in (("ar_lags", ar, 1), ("exo_lags", exo, 0)):
            if any(b <= a for a, b in zip(lags, lags[1:])):
                raise ValueError(f"{name} must be strictly increasing")
            if lags and lags[0] < lowest:
                raise ValueError(f"{name} must be >= {lowest}")
        if int(self.seasonal_lag) < 1:
            raise ValueError("seasonal_lag must be >= 1")
        object.__setattr__(self, "ar_lags", ar)
        object.__setattr__(self, "exo_lags", exo)
        object.__setattr__(self, "seasonal_lag", int(self.seasonal_lag))

    @property
    def max_lag(self) -> int:
        return max(self.ar_lags + self.exo_lags + (0,))

    @property
    def history_needed(self) -> int:
        """Samples before the origin needed for one forecast."""
        return self.seasonal_lag + self.max_lag


PRESETS = {
    "ari-long": LagSpec(LONG_LAGS),
    "ari-short": LagSpec(SHORT_LAGS),
    "arix": LagSpec(LONG_LAGS, EXO_LAGS),
}


@dataclass(frozen=True, eq=False)
class ModelParams:
    spec: LagSpec
    ar_coeffs: np.ndarray
    exo_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fit_residual_rms: float = float("nan")
    n_rows: int = 0

    def __post_init__(self):
        ar = np.array(self.ar_coeffs, dtype=float).ravel()
        exo = np.array(self.exo_coeffs, dtype=float).ravel()
        if len(ar) != len(self.spec.ar_lags) or len(exo) != len(self.spec.exo_lags):
            raise ValueError("coefficient counts must match lag counts")
        object.__setattr__(self, "ar_coeffs", ar)
        object.__setattr__(self, "exo_coeffs", exo)

    @property
    def has_exo(self) -> bool:
        return bool(self.spec.exo_lags)

    @classmethod
    def zeros(cls, spec: LagSpec) -> "ModelParams":
        return cls(spec, np.zeros(len(spec.ar_lags)), np.zeros(len(spec.exo_lags)))

    def to_text(self) -> str:
        return flatfile.dumps(
            [
                ("kind", "ari" if not self.has_exo else "arix"),
                ("seasonal_lag", self.spec.seasonal_lag),
                ("ar_lags", ", ".join(map(str, self.spec.ar_lags))),
                ("ar_coeffs", flatfile.format_floats(self.ar_coeffs)),
                ("exo_lags", ", ".join(map(str, self.spec.exo_lags))),
                ("exo_coeffs", flatfile.format_floats(self.exo_coeffs)),
                ("fit_residual_rms", flatfile.format_float(self.fit_residual_rms)),
                ("n_rows", self.n_rows),
            ]
        )

    @classmethod
    def from_text(cls, text: str) -> "ModelParams":
        d = dict(flatfile.loads(text))
        spec = LagSpec(
            tuple(flatfile.parse_ints(d["ar_lags"])),
            tuple(flatfile.parse_ints(d.get("exo_lags", ""))),
            int(d["seasonal_lag"]),
        )
        return cls(
            spec,
            flatfile.parse_floats(d["ar_coeffs"]),
            flatfile.parse_floats(d.get("exo_coeffs", "")),
            float(d.get("fit_residual_rms", "nan")),
            int(d.get("n_rows", 0)),
        )

    def save(self, path) -> None:
        flatfile.atomic_write(path, self.to_text())

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_text(Path(path).read_text())


def load_spec(text: str) -> LagSpec:
    """A preset name, or a flat document with ``ar_lags`` / ``exo_lags`` / ``seasonal_lag``."""
    if text in PRESETS:
        return PRESETS[text]
    d = flatfile.load_dict(text)
    return LagSpec(
        tuple(flatfile.parse_ints(d["ar_lags"])),
        tuple(flatfile.parse_ints(d.get("exo_lags", ""))),
        int(d.get("seasonal_lag", SEASONAL_LAG)),
    )


def _diff(x: np.ndarray, lag: int) -> np.ndarray:
    out = np.full(len(x), np.nan)
    out[lag:] = x[lag:] - x[:-lag]
    return out


def seasonal_diff(series: TimeSeries, lag: int = SEASONAL_LAG) -> TimeSeries:
    """``out[i] = x[i] - x[i - lag]``; the first ``lag`` samples are missing."""
    if lag < 1:
        raise ValueError("lag must be >= 1")
    if len(series) <= lag:
        raise ValueError("insufficient history")
    d = _diff(series.usable(), lag)
    return TimeSeries(series.start_time, series.step, d, np.where(np.isnan(d), Flag.MISSING, Flag.VALID))


def seasonal_integrate(diff: TimeSeries, history: TimeSeries, lag: int = SEASONAL_LAG) -> TimeSeries:
    """Invert :func:`seasonal_diff` given the ``lag`` samples preceding ``diff``."""
    if len(history) < lag:
        raise ValueError("insufficient history")
    if history.step != diff.step or history.end_time != diff.start_time:
        raise ValueError("history must end where diff starts")
    buf = np.concatenate([history.usable()[-lag:], np.full(len(diff), np.nan)])
    d = diff.usable()
    for i in range(len(diff)):
        buf[lag + i] = d[i] + buf[i]
    out = buf[lag:]
    return TimeSeries(diff.start_time, diff.step, out, np.where(np.isnan(out), Flag.MISSING, Flag.VALID))


def _design(z: np.ndarray, xd: np.ndarray | None, spec: LagSpec, start: int):
    """Regression rows for targets ``z[start:]``."""
    t = np.arange(start, len(z))
    cols = [z[t - k] for k in spec.ar_lags]
    if spec.exo_lags:
        cols += [xd[t - j] for j in spec.exo_lags]
    X = np.column_stack(cols) if cols else np.zeros((len(t), 0))
    return X, z[t]


def fit_ar(series: TimeSeries, spec: LagSpec, exo: TimeSeries | None = None, min_rows_per_coeff: int = 10) -> ModelParams:
    """Least-squares fit of the differenced AR(X) regression, no intercept.

    Rows with any missing target or regressor are dropped.
    """
    s = spec.seasonal_lag
    if len(series) <= s:
        raise ValueError("insufficient data")
    z = _diff(series.usable(), s)
    xd = None
    if spec.exo_lags:
        if exo is None:
            raise ValueError("exogenous input required")
        if not exo.same_grid(series):
            raise ValueError("exogenous series must share the target grid")
        xd = _diff(exo.usable(), s)
    X, y = _design(z, xd, spec, s + spec.max_lag)
    keep = ~np.isnan(y) & ~np.isnan(X).any(axis=1)
    X, y = X[keep], y[keep]
    n_coef = X.shape[1]
    if len(y) < min_rows_per_coeff * max(n_coef, 1):
        raise ValueError(f"insufficient data: {len(y)} rows for {n_coef} coefficients")
    rank = np.linalg.matrix_rank(X)
    if rank < n_coef:
        cond = np.linalg.cond(X) if len(y) else np.inf
        raise ValueError(f"degenerate regression: rank {rank} < {n_coef} (condition number {cond:.3g})")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    na = len(spec.ar_lags)
    return ModelParams(spec, coef[:na], coef[na:], float(np.sqrt(np.mean(resid**2))), int(len(y)))


def residual_ss(model: ModelParams, series: TimeSeries, exo: TimeSeries | None = None) -> float:
    """In-sample residual sum of squares on the rows :func:`fit_ar` uses."""
    spec = model.spec
    z = _diff(series.usable(), spec.seasonal_lag)
    xd = _diff(exo.usable(), spec.seasonal_lag) if spec.exo_lags else None
    X, y = _design(z, xd, spec, spec.seasonal_lag + spec.max_lag)
    keep = ~np.isnan(y) & ~np.isnan(X).any(axis=1)
    r = y[keep] - X[keep] @ np.concatenate([model.ar_coeffs, model.exo_coeffs])
    return float(r @ r)


def _windows(x: np.ndarray, origins: np.ndarray, before: int) -> np.ndarray:
    """Rows ``x[o - before : o]`` for each origin, NaN where the index is negative."""
    idx = origins[:, None] + np.arange(-before, 0)[None, :]
    out = np.full(idx.shape, np.nan)
    ok = (idx >= 0) & (idx < len(x))
    out[ok] = x[idx[ok]]
    return out


def forecast_matrix(
    model: ModelParams,
    series: TimeSeries,
    origins,
    horizon: int = 96,
    exo: TimeSeries | None = None,
    exo_future: np.ndarray | None = None,
    predictor_id: str = "",
) -> ForecastMatrix:
    """Forecasts from many origins at once.

    For origin ``o`` only ``series[:o]`` (and ``exo[:o]``) is read. Future
    exogenous values come from ``exo_future`` (one row of ``horizon`` values
    per origin). Missing differenced lags in the history count as zero, i.e.
    fall back to seasonal persistence for that term; a missing value one
    season back leaves that forecast entry missing.
    """
    spec = model.spec
    origins = np.atleast_1d(np.asarray(origins, dtype=np.int64))
    s = spec.seasonal_lag
    L = spec.history_needed
    if np.any(origins > len(series)) or np.any(origins < 0):
        raise ValueError("origin outside the series")
    Y = np.concatenate([_windows(series.usable(), origins, L), np.full((len(origins), horizon), np.nan)], axis=1)
    Z = np.full_like(Y, np.nan)
    Z[:, s:L] = Y[:, s:L] - Y[:, :L - s]
    XD = None
    if spec.exo_lags:
        if exo is None or exo_future is None:
            raise ValueError("exogenous input required")
        exo_future = np.atleast_2d(np.asarray(exo_future, dtype=float))
        if exo_future.shape != (len(origins), horizon):
            raise ValueError("exo_future must have one row of `horizon` values per origin")
        if exo.start_time != series.start_time or exo.step != series.step:
            raise ValueError("exogenous series must share the target grid")
        X = np.concatenate([_windows(exo.usable(), origins, L), exo_future], axis=1)
        XD = np.full_like(X, np.nan)
        XD[:, s:] = X[:, s:] - X[:, :-s]
        XD = np.nan_to_num(XD)
    Zf = np.nan_to_num(Z)
    for h in range(horizon):
        t = L + h
        z_hat = np.zeros(len(origins))
        for k, a in zip(spec.ar_lags, model.ar_coeffs):
            z_hat += a * Zf[:, t - k]
        if XD is not None:
            for j, b in zip(spec.exo_lags, model.exo_coeffs):
                z_hat += b * XD[:, t - j]
        Zf[:, t] = z_hat
        Y[:, t] = z_hat + Y[:, t - s]
    out = np.maximum(Y[:, L:], 0.0)
    out[np.isnan(Y[:, L:])] = np.nan
    return ForecastMatrix.on_grid(series, origins, out, predictor_id)


def predict_recursive(
    model: ModelParams,
    history: TimeSeries,
    exo_future=None,
    horizon: int = 96,
    exo_history: TimeSeries | None = None,
) -> np.ndarray:
    """Forecast ``horizon`` steps past the end of ``history`` (clipped at zero)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if len(history) < model.spec.history_needed:
        raise ValueError("insufficient history")
    if model.has_exo:
        if exo_future is None or exo_history is None:
            raise ValueError("exogenous input required")
        exo_future = np.asarray(exo_future, dtype=float)[:horizon]
        if len(exo_future) < horizon:
            raise ValueError("exogenous input required over the whole horizon")
        if len(exo_history) < len(history):
            raise ValueError("insufficient exogenous history")
        exo_history = exo_history.slice(len(exo_history) - len(history), len(exo_history))
        exo_future = exo_future[None, :]
    fm = forecast_matrix(model, history, [len(history)], horizon, exo_history, exo_future)
    return fm.values[0].copy()


def persistence_matrix(series: TimeSeries, origins, horizon: int = 96, seasonal_lag: int = SEASONAL_LAG, predictor_id: str = "persistence") -> ForecastMatrix:
    """Repeat the value one season earlier; reads only ``series[:o]``."""
    origins = np.atleast_1d(np.asarray(origins, dtype=np.int64))
    buf = np.concatenate([_windows(series.usable(), origins, seasonal_lag), np.full((len(origins), horizon), np.nan)], axis=1)
    for h in range(horizon):
        buf[:, seasonal_lag + h] = buf[:, h]
    out = buf[:, seasonal_lag:]
    return ForecastMatrix.on_grid(series, origins, np.where(np.isnan(out), np.nan, np.maximum(out, 0.0)), predictor_id)


def persistence_predict(history: TimeSeries, seasonal_lag: int = SEASONAL_LAG, horizon: int = 96) -> np.ndarray:
    """Previous-season replay: step ``h`` repeats the sample ``seasonal_lag`` earlier."""
    if len(history) < seasonal_lag:
        raise ValueError("insufficient history")
    return persistence_matrix(history, [len(history)], horizon, seasonal_lag).values[0].copy()
