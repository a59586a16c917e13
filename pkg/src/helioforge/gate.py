"""Gaussian-kernel SVM that decides, per instant, whether the weather service
beats the ARI model ("Good") or not ("Bad").

Training solves the soft-margin dual with SMO using second-order working
set selection (Fan, Chen & Lin, JMLR 2005), on a precomputed kernel matrix.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import flatfile
from .timeseries import ForecastMatrix, TimeSeries

log = logging.getLogger(__name__)

GOOD = "Good"
BAD = "Bad"
INSTANTS_PER_DAY = 96
C_GRID = (0.1, 1.0, 10.0, 100.0)
GAMMA_GRID = (0.01, 0.1, 1.0, 10.0)
TAU = 1e-12


@dataclass(frozen=True)
class GateSample:
    forecast_change: float
    instant: int
    label: str = BAD

    def __post_init__(self):
        if not 1 <= self.instant <= INSTANTS_PER_DAY:
            raise ValueError("instant must be within 1..96")
        if self.label not in (GOOD, BAD):
            raise ValueError(f"label must be {GOOD!r} or {BAD!r}")


def gate_features(forecast_change, instant) -> np.ndarray:
    """Raw feature rows: change, sin/cos of the time of day, and the instant itself."""
    fc = np.asarray(forecast_change, dtype=float).ravel()
    inst = np.asarray(instant, dtype=float).ravel()
    angle = 2 * np.pi * inst / INSTANTS_PER_DAY
    return np.column_stack([fc, np.sin(angle), np.cos(angle), inst])


def samples_to_arrays(samples: Sequence[GateSample]) -> tuple[np.ndarray, np.ndarray]:
    X = gate_features([s.forecast_change for s in samples], [s.instant for s in samples])
    y = np.array([1.0 if s.label == GOOD else -1.0 for s in samples])
    return X, y


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass(frozen=True, eq=False)
class GateModel:
    support_vectors: np.ndarray
    dual_coeffs: np.ndarray
    bias: float
    gamma: float
    C: float
    feature_means: np.ndarray
    feature_scales: np.ndarray
    sv_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(X) - self.feature_means) / self.feature_scales

    def decision_function(self, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
        Xs = self.standardize(X)
        out = np.empty(len(Xs))
        for lo in range(0, len(Xs), chunk):
            K = rbf_kernel(Xs[lo:lo + chunk], self.support_vectors, self.gamma)
            out[lo:lo + chunk] = K @ self.dual_coeffs + self.bias
        return out

    def predict_good(self, X: np.ndarray) -> np.ndarray:
        """Boolean per row; a decision value of exactly zero counts as Bad."""
        if len(X) == 0:
            return np.zeros(0, dtype=bool)
        # many rows repeat (same issue, same target); evaluate each once
        uniq, inverse = np.unique(np.atleast_2d(X), axis=0, return_inverse=True)
        return (self.decision_function(uniq) > 0)[np.ravel(inverse)]

    def lipschitz_bound(self) -> float:
        """Bound on |df/d(forecast_change)| in raw units."""
        # |d/dr exp(-g r^2)| <= sqrt(2 g / e)
        return float(np.abs(self.dual_coeffs).sum() * np.sqrt(2 * self.gamma / np.e) / self.feature_scales[0])

    def to_text(self) -> str:
        items = [
            ("gamma", flatfile.format_float(self.gamma)),
            ("C", flatfile.format_float(self.C)),
            ("bias", flatfile.format_float(self.bias)),
            ("feature_means", flatfile.format_floats(self.feature_means)),
            ("feature_scales", flatfile.format_floats(self.feature_scales)),
        ]
        for k, (sv, a) in enumerate(zip(self.support_vectors, self.dual_coeffs)):
            idx = int(self.sv_index[k]) if len(self.sv_index) else -1
            items.append(("sv", f"{flatfile.format_float(a)} | {idx} | {flatfile.format_floats(sv)}"))
        return flatfile.dumps(items)

    @classmethod
    def from_text(cls, text: str) -> "GateModel":
        pairs = flatfile.loads(text)
        d = {k: v for k, v in pairs if k != "sv"}
        coeffs, index, svs = [], [], []
        for key, value in pairs:
            if key == "sv":
                a, idx, vec = value.split("|")
                coeffs.append(float(a))
                index.append(int(idx))
                svs.append(flatfile.parse_floats(vec))
        means = flatfile.parse_floats(d["feature_means"])
        return cls(
            np.array(svs).reshape(len(svs), len(means)),
            np.array(coeffs),
            float(d["bias"]),
            float(d["gamma"]),
            float(d["C"]),
            means,
            flatfile.parse_floats(d["feature_scales"]),
            np.array(index, dtype=int) if index and min(index) >= 0 else np.zeros(0, dtype=int),
        )

    def save(self, path) -> None:
        flatfile.atomic_write(path, self.to_text())

    @classmethod
    def load(cls, path) -> "GateModel":
        return cls.from_text(Path(path).read_text())


class ConvergenceError(RuntimeError):
    pass


def smo(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3, max_iter: int | None = None):
    """Solve ``min 1/2 a'Qa - sum(a)``, ``0 <= a <= C``, ``y'a = 0``.

    Returns ``(alpha, rho, iterations)`` with decision ``sum y_i a_i K(x_i, x) - rho``.
    """
    n = len(y)
    max_iter = max_iter or max(100_000, 100 * n)
    alpha = np.zeros(n)
    G = -np.ones(n)
    diagK = np.diag(K).copy()
    pos = y > 0
    for it in range(max_iter):
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        score = -y * G
        up_scores = np.where(up, score, -np.inf)
        i = int(np.argmax(up_scores))
        m = up_scores[i]
        low_scores = np.where(low, score, np.inf)
        M = low_scores.min()
        if m - M < tol:
            break
        b = m - score
        cand = low & (b > 0)
        a = diagK[i] + diagK - 2.0 * K[i]
        a = np.where(a > 0, a, TAU)
        obj = np.where(cand, -(b * b) / a, np.inf)
        j = int(np.argmin(obj))
        yi, yj = y[i], y[j]
        ai_old, aj_old = alpha[i], alpha[j]
        quad = a[j]
        # two-variable update, clipped to the box (LIBSVM's case analysis)
        if yi != yj:
            delta = (-G[i] - G[j]) / quad
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            delta = (G[i] - G[j]) / quad
            total = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        dai, daj = ai - ai_old, aj - aj_old
        G += y * (K[i] * (yi * dai) + K[j] * (yj * daj))  # K is symmetric; rows are contiguous
    else:
        raise ConvergenceError(f"SMO did not reach tolerance {tol} within {max_iter} iterations (gap {m - M:.3g})")
    yG = y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(yG[free].mean())
    else:
        ub = np.where((~pos & (alpha >= C)) | (pos & (alpha <= 0)), yG, np.inf).min()
        lb = np.where((pos & (alpha >= C)) | (~pos & (alpha <= 0)), yG, -np.inf).max()
        rho = float((ub + lb) / 2) if np.isfinite(ub) and np.isfinite(lb) else float(yG.mean())
    return alpha, rho, it


def train_gate_arrays(X: np.ndarray, y: np.ndarray, C: float = 10.0, gamma: float = 1.0, tol: float = 1e-3) -> GateModel:
    """Train on raw feature rows ``X`` and labels ``y`` in {+1 (Good), -1 (Bad)}."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if C <= 0 or gamma <= 0:
        raise ValueError("C and gamma must be positive")
    if len(np.unique(y)) < 2:
        raise ValueError("degenerate labels: both classes are required")
    means = X.mean(axis=0)
    scales = X.std(axis=0)
    scales = np.where(scales > 0, scales, 1.0)
    Xs = (X - means) / scales
    K = rbf_kernel(Xs, Xs, gamma)
    alpha, rho, iters = smo(K, y, C, tol)
    sv = np.flatnonzero(alpha > 0)
    log.debug("SMO converged after %d iterations, %d support vectors", iters, len(sv))
    return GateModel(Xs[sv], (y * alpha)[sv], -rho, float(gamma), float(C), means, scales, sv)


def train_gate(samples: Sequence[GateSample], C: float = 10.0, gamma: float = 1.0, tol: float = 1e-3) -> GateModel:
    X, y = samples_to_arrays(samples)
    return train_gate_arrays(X, y, C, gamma, tol)


def classify(model: GateModel, forecast_change: float, instant: int) -> str:
    if not 1 <= instant <= INSTANTS_PER_DAY:
        raise ValueError("instant must be within 1..96")
    return GOOD if model.predict_good(gate_features(forecast_change, instant))[0] else BAD


def kkt_violations(model: GateModel, X: np.ndarray, y: np.ndarray, tol: float = 1e-2) -> np.ndarray:
    """Indices of training rows breaking the soft-margin KKT conditions.

    ``alpha = 0`` needs margin >= 1, ``0 < alpha < C`` needs margin == 1 and
    ``alpha = C`` needs margin <= 1, each within ``tol``.
    """
    alpha = np.zeros(len(y))
    alpha[model.sv_index] = np.abs(model.dual_coeffs)
    margin = y * model.decision_function(X)
    eps = 1e-9 * model.C
    at_zero = alpha <= eps
    at_c = alpha >= model.C - eps
    free = ~at_zero & ~at_c
    bad = (at_zero & (margin < 1 - tol)) | (free & (np.abs(margin - 1) > tol)) | (at_c & (margin > 1 + tol))
    bad |= alpha > model.C + eps
    return np.flatnonzero(bad)


def cross_validate(X: np.ndarray, y: np.ndarray, C: float, gamma: float, folds: int = 5) -> float:
    """Mean held-out accuracy over contiguous folds (rows are time-ordered)."""
    parts = np.array_split(np.arange(len(y)), folds)
    scores = []
    for hold in parts:
        train = np.setdiff1d(np.arange(len(y)), hold)
        if len(np.unique(y[train])) < 2:
            continue
        model = train_gate_arrays(X[train], y[train], C, gamma)
        scores.append(np.mean(np.where(model.predict_good(X[hold]), 1.0, -1.0) == y[hold]))
    return float(np.mean(scores)) if scores else 0.0


def select_hyperparameters(X: np.ndarray, y: np.ndarray, Cs=C_GRID, gammas=GAMMA_GRID, folds: int = 5) -> tuple[float, float, float]:
    """Grid search; returns ``(C, gamma, cv_accuracy)``. Ties keep the earlier pair."""
    best = (Cs[0], gammas[0], -1.0)
    for C, gamma in itertools.product(Cs, gammas):
        try:
            acc = cross_validate(X, y, C, gamma, folds)
        except ConvergenceError as exc:
            log.warning("C=%g gamma=%g skipped: %s", C, gamma, exc)
            continue
        log.info("gate CV C=%g gamma=%g accuracy=%.4f", C, gamma, acc)
        if acc > best[2]:
            best = (C, gamma, acc)
    return best


def subsample(X: np.ndarray, y: np.ndarray, max_samples: int | None, seed: int = 0):
    """Deterministic row subset keeping time order; no-op when small enough."""
    if max_samples is None or len(y) <= max_samples:
        return X, y
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(y), max_samples, replace=False))
    return X[keep], y[keep]


def day_ahead_rows(fm: ForecastMatrix, measured: TimeSeries) -> tuple[np.ndarray, np.ndarray]:
    """Rows whose origin is a day start, and their grid indices."""
    idx = fm.origin_index(measured)
    per_day = measured.samples_per_day
    first_instant = measured.instant_of_day()[0]
    rows = np.flatnonzero((idx + first_instant) % per_day == 0)
    return rows, idx[rows]


def forecast_change(service_values: np.ndarray, targets: np.ndarray, measured: np.ndarray, lag: int = INSTANTS_PER_DAY) -> np.ndarray:
    """Service forecast at each target minus the measurement one day earlier."""
    prev = targets - lag
    out = np.full(targets.shape, np.nan)
    ok = prev >= 0
    out[ok] = service_values[ok] - measured[prev[ok]]
    return out


def label_arrays(service_pred: ForecastMatrix, ari_pred: ForecastMatrix, measured: TimeSeries):
    """Vectorised labelling; returns ``(forecast_change, instant, good, target_index)``."""
    if not service_pred.compatible(ari_pred):
        raise ValueError("coverage mismatch: forecast matrices differ in origins or horizon")
    rows, origins = day_ahead_rows(service_pred, measured)
    if len(rows) == 0:
        raise ValueError("coverage mismatch: no day-start origins")
    H = service_pred.horizon
    targets = origins[:, None] + np.arange(H)[None, :]
    if targets.max() >= len(measured):
        raise ValueError("coverage mismatch: measurements end before the last target")
    meas = measured.usable()
    sv = service_pred.values[rows]
    av = ari_pred.values[rows]
    truth = meas[targets]
    change = forecast_change(sv, targets, meas)
    inst = (measured.instant_of_day()[targets] + 1)
    good = np.abs(sv - truth) < np.abs(av - truth)
    ok = ~np.isnan(truth) & ~np.isnan(sv) & ~np.isnan(av) & ~np.isnan(change)
    return change[ok], inst[ok], good[ok], targets[ok]


def label_training_data(service_pred: ForecastMatrix, ari_pred: ForecastMatrix, measured: TimeSeries) -> list[GateSample]:
    """One labelled sample per (day, instant) from the day-start origin.

    Good when the service's absolute error is strictly smaller than ARI's;
    ties are Bad.
    """
    change, inst, good, _ = label_arrays(service_pred, ari_pred, measured)
    return [GateSample(float(c), int(i), GOOD if g else BAD) for c, i, g in zip(change, inst, good)]


def feature_cube(service: ForecastMatrix, measured: TimeSeries) -> np.ndarray:
    """Raw gate features for every (origin, lead) cell of ``service``.

    The previous-day measurement for a target lies before the origin as long
    as the horizon is at most one day, so no future data is read.
    """
    targets = service.target_index(measured)
    per_day = measured.samples_per_day
    meas = measured.usable()
    prev = targets - per_day
    ok = (prev >= 0) & (prev < len(meas))
    before = np.full(targets.shape, np.nan)
    before[ok] = meas[prev[ok]]
    inst = (measured.instant_of_day()[0] + targets) % per_day + 1
    feats = gate_features(service.values - before, inst)
    return feats.reshape(*targets.shape, -1)
