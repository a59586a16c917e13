"""Least-squares linear combination of predictors.

Two layouts: ``basic`` fits one weight vector over every lead time, and
``time_order`` fits one vector per lead-time group
(1-4, 5-8, 9-12, 13-24, ..., 85-96 steps ahead). Weights are unconstrained
and there is no intercept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import flatfile
from .gate import GateModel
from .timeseries import ForecastMatrix, TimeSeries

log = logging.getLogger(__name__)

BASIC = "basic"
TIME_ORDER = "time_order"
HORIZON_GROUPS = (4, 8, 12, 24, 36, 48, 60, 72, 84, 96)
RENORM_EPS = 1e-9


def group_of_lead(leads, boundaries=HORIZON_GROUPS) -> np.ndarray:
    """Group index for 1-based lead times: the first boundary >= lead."""
    idx = np.searchsorted(np.asarray(boundaries), np.asarray(leads), side="left")
    return np.minimum(idx, len(boundaries) - 1)


@dataclass(frozen=True, eq=False)
class EnsembleWeights:
    framework: str
    weights: np.ndarray  # (n_groups, n_predictors)
    predictor_ids: tuple[str, ...] = ()
    horizon_groups: tuple[int, ...] = HORIZON_GROUPS
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.framework not in (BASIC, TIME_ORDER):
            raise ValueError(f"unknown framework {self.framework!r}")
        w = np.atleast_2d(np.array(self.weights, dtype=float))
        expected = 1 if self.framework == BASIC else len(self.horizon_groups)
        if w.shape[0] != expected:
            raise ValueError(f"{self.framework} needs {expected} weight vector(s), got {w.shape[0]}")
        if self.predictor_ids and len(self.predictor_ids) != w.shape[1]:
            raise ValueError("one predictor id per weight")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "predictor_ids", tuple(self.predictor_ids))
        object.__setattr__(self, "horizon_groups", tuple(int(b) for b in self.horizon_groups))

    @property
    def n_predictors(self) -> int:
        return self.weights.shape[1]

    def per_lead(self, horizon: int) -> np.ndarray:
        """``(horizon, n_predictors)`` weights applied at each lead time."""
        if self.framework == BASIC:
            return np.repeat(self.weights, horizon, axis=0)
        return self.weights[group_of_lead(np.arange(1, horizon + 1), self.horizon_groups)]

    def to_text(self) -> str:
        items = [
            ("framework", self.framework),
            ("predictors", ", ".join(self.predictor_ids)),
            ("horizon_groups", ", ".join(map(str, self.horizon_groups))),
        ]
        if self.framework == BASIC:
            items.append(("weights", flatfile.format_floats(self.weights[0])))
        else:
            for b, w in zip(self.horizon_groups, self.weights):
                items.append((f"weights.{b}", flatfile.format_floats(w)))
        return flatfile.dumps(items)

    @classmethod
    def from_text(cls, text: str) -> "EnsembleWeights":
        d = dict(flatfile.loads(text))
        groups = tuple(flatfile.parse_ints(d.get("horizon_groups", "")) or HORIZON_GROUPS)
        ids = tuple(x.strip() for x in d.get("predictors", "").split(",") if x.strip())
        if d["framework"] == BASIC:
            w = flatfile.parse_floats(d["weights"])[None, :]
        else:
            w = np.array([flatfile.parse_floats(d[f"weights.{b}"]) for b in groups])
        return cls(d["framework"], w, ids, groups)

    def save(self, path) -> None:
        flatfile.atomic_write(path, self.to_text())

    @classmethod
    def load(cls, path) -> "EnsembleWeights":
        return cls.from_text(Path(path).read_text())


def _stack(predictions: Sequence[ForecastMatrix]) -> np.ndarray:
    first = predictions[0]
    for fm in predictions[1:]:
        if not first.compatible(fm):
            raise ValueError("forecast matrices must share origins, horizon and step")
    return np.stack([fm.values for fm in predictions], axis=-1)  # (n_orig, H, n_pred)


def fitting_rows(
    predictions: Sequence[ForecastMatrix],
    measured: TimeSeries,
    exclude_night: bool = True,
    cell_mask: np.ndarray | None = None,
):
    """Regression rows for the weight fit.

    Returns ``(A, b, lead)``: predictor outputs, measurements and 1-based
    lead time of every usable (origin, lead) cell. Cells whose time of day
    is never lit in the fitting data are dropped when ``exclude_night``.
    """
    P = _stack(predictions)
    targets = predictions[0].target_index(measured)
    meas = measured.usable()
    inside = (targets >= 0) & (targets < len(measured))
    truth = np.full(targets.shape, np.nan)
    truth[inside] = meas[targets[inside]]
    ok = inside & ~np.isnan(truth) & ~np.isnan(P).any(axis=-1)
    if cell_mask is not None:
        ok &= cell_mask
    if exclude_night and ok.any():
        inst = measured.instant_of_day()[np.where(inside, targets, 0)]
        lit = np.zeros(measured.samples_per_day, dtype=bool)
        np.logical_or.at(lit, inst[ok], truth[ok] != 0)
        ok &= lit[inst]
    leads = np.broadcast_to(np.arange(1, P.shape[1] + 1)[None, :], ok.shape)
    return P[ok], truth[ok], leads[ok]


def _lstsq(A: np.ndarray, b: np.ndarray):
    coef, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
    cond = float(sv[0] / sv[-1]) if len(sv) and sv[-1] > 0 else float("inf")
    return coef, int(rank), cond


def fit_weights(
    predictions: Sequence[ForecastMatrix],
    measured: TimeSeries,
    framework: str = BASIC,
    exclude_night: bool = True,
    cell_mask: np.ndarray | None = None,
    horizon_groups=HORIZON_GROUPS,
) -> EnsembleWeights:
    """Minimise the squared distance between the combination and the measurements.

    Collinear predictors get the minimum-norm solution, with the rank and
    condition number recorded in ``diagnostics``. A time-order group with
    no usable rows reuses the pooled (basic) solution.
    """
    if framework not in (BASIC, TIME_ORDER):
        raise ValueError(f"unknown framework {framework!r}")
    A, b, lead = fitting_rows(predictions, measured, exclude_night, cell_mask)
    n_pred = len(predictions)
    if len(b) == 0:
        raise ValueError("no overlap between predictions and measurements")
    pooled, rank, cond = _lstsq(A, b)
    diagnostics = {"rows": len(b), "rank": rank, "condition": cond}
    if rank < n_pred:
        log.warning("collinear predictors: rank %d < %d, using minimum-norm weights (cond %.3g)", rank, n_pred, cond)
    if framework == BASIC:
        weights = pooled[None, :]
    else:
        groups = group_of_lead(lead, horizon_groups)
        weights = np.empty((len(horizon_groups), n_pred))
        empty = []
        for g in range(len(horizon_groups)):
            sel = groups == g
            if not sel.any():
                weights[g] = pooled
                empty.append(horizon_groups[g])
                continue
            weights[g], g_rank, _ = _lstsq(A[sel], b[sel])
            if g_rank < n_pred:
                log.warning("group <=%d: rank %d < %d, minimum-norm weights", horizon_groups[g], g_rank, n_pred)
        if empty:
            diagnostics["empty_groups"] = empty
    ids = tuple(fm.predictor_id for fm in predictions)
    return EnsembleWeights(framework, weights, ids if all(ids) else (), tuple(horizon_groups), diagnostics)


def training_objective(
    weights: EnsembleWeights | np.ndarray,
    predictions: Sequence[ForecastMatrix],
    measured: TimeSeries,
    exclude_night: bool = True,
    cell_mask: np.ndarray | None = None,
) -> float:
    """Sum of squared residuals of the unclipped combination on the fitting rows."""
    A, b, lead = fitting_rows(predictions, measured, exclude_night, cell_mask)
    if isinstance(weights, EnsembleWeights):
        W = weights.per_lead(predictions[0].horizon)[lead - 1]
    else:
        W = np.broadcast_to(np.asarray(weights, dtype=float), A.shape)
    r = b - np.einsum("ij,ij->i", A, W)
    return float(r @ r)


def combine(weights: EnsembleWeights, predictions: Sequence[ForecastMatrix], predictor_id: str = "ensemble", clip: bool = True) -> ForecastMatrix:
    """Weighted sum per origin and lead, clipped at zero.

    Where some predictors are missing, the available weights are rescaled by
    ``sum(all) / sum(available)``; if that denominator is <= 1e-9 the
    available predictors are averaged instead.
    """
    if len(predictions) != weights.n_predictors:
        raise ValueError(f"expected {weights.n_predictors} predictors, got {len(predictions)}")
    P = _stack(predictions)
    W = weights.per_lead(P.shape[1])[None, :, :]
    avail = ~np.isnan(P)
    Pz = np.where(avail, P, 0.0)
    out = (Pz * W).sum(-1)
    partial = ~avail.all(-1) & avail.any(-1)
    if partial.any():
        Wb = np.broadcast_to(W, P.shape)
        total = Wb.sum(-1)
        denom = (Wb * avail).sum(-1)
        n_av = avail.sum(-1)
        rescaled = out * total / np.where(denom > RENORM_EPS, denom, 1.0)
        averaged = Pz.sum(-1) / np.maximum(n_av, 1)
        out = np.where(partial, np.where(denom > RENORM_EPS, rescaled, averaged), out)
    out[~avail.any(-1)] = np.nan
    if clip:
        out = np.where(np.isnan(out), np.nan, np.maximum(out, 0.0))
    return predictions[0].with_values(out, predictor_id)


def gated_combine(
    gate: GateModel | None,
    es1: EnsembleWeights,
    es2: EnsembleWeights,
    predictions: Sequence[ForecastMatrix],
    features: np.ndarray,
    predictor_id: str = "gated",
) -> tuple[ForecastMatrix, np.ndarray]:
    """Route each (origin, lead) cell through ``es1`` (gate says Good) or ``es2``.

    ``features`` is ``(n_origins, horizon, n_features)`` raw gate input;
    cells with missing features go to ``es2``. Returns the combination and
    the Good mask.
    """
    if gate is None:
        raise ValueError("untrained gate")
    shape = predictions[0].values.shape
    flat = features.reshape(-1, features.shape[-1])
    finite = ~np.isnan(flat).any(axis=1)
    good = np.zeros(len(flat), dtype=bool)
    good[finite] = gate.predict_good(flat[finite])
    good = good.reshape(shape)
    a = combine(es1, predictions).values
    b = combine(es2, predictions).values
    return predictions[0].with_values(np.where(good, a, b), predictor_id), good


def gated_sr_predict(
    gate: GateModel | None,
    es1: EnsembleWeights,
    es2: EnsembleWeights,
    service: ForecastMatrix,
    ari: ForecastMatrix | Sequence[ForecastMatrix],
    features: np.ndarray,
    predictor_id: str = "SR-5",
) -> ForecastMatrix:
    """Gate-switched SR ensemble over the service forecast and ARI model(s)."""
    ari = [ari] if isinstance(ari, ForecastMatrix) else list(ari)
    return gated_combine(gate, es1, es2, [service, *ari], features, predictor_id)[0]
