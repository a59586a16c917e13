"""Offline fitting and batch forecasting of the SR and GP predictor family.

Predictor ids follow the comparison table: SR-1 persistence, SR-2 weather
service, SR-3 basic ensemble, SR-4 time-order ensemble, SR-5 gated
time-order ensemble; GP-1 persistence, GP-2 ARIX driven by the service SR,
GP-3 ARIX driven by the gated SR forecast, GP-4 ensemble.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arimodels, ensemble, evaluation, flatfile, gate
from .arimodels import ModelParams
from .ensemble import BASIC, TIME_ORDER, EnsembleWeights
from .gate import GateModel
from .timeseries import DatasetSplit, ForecastMatrix, TimeSeries

log = logging.getLogger(__name__)

HORIZON = 96

METHODS = {
    "SR-1": "Persistent predictor",
    "SR-2": "Forecast service",
    "SR-3": "Ensemble method (basic framework)",
    "SR-4": "Ensemble method (time-order framework)",
    "SR-5": "Ensemble method (time-order framework) with SVM",
    "GP-1": "Persistent predictor",
    "GP-2": "ARIX model using SR-2 as exogenous input",
    "GP-3": "ARIX model using gated SR as exogenous input",
    "GP-4": "Ensemble method",
}


def service_on_grid(issues: ForecastMatrix, grid: TimeSeries, origins, horizon: int = HORIZON, predictor_id: str = "SR-2") -> ForecastMatrix:
    """Service forecast seen from each grid origin.

    Uses the latest issue at or before the origin and holds each coarse value
    over its block (zero-order hold). Entries past the issue's reach, or with
    no issue yet, are missing.
    """
    origins = np.atleast_1d(np.asarray(origins, dtype=np.int64))
    step = np.timedelta64(grid.step, "s")
    t_origin = grid.start_time + origins * step
    row = np.searchsorted(issues.origins, t_origin, side="right") - 1
    values = np.full((len(origins), horizon), np.nan)
    have = row >= 0
    if have.any():
        r = row[have]
        lead_t = t_origin[have, None] + np.arange(horizon)[None, :] * step
        offset = (lead_t - issues.origins[r][:, None]) / np.timedelta64(1, "s")
        block = (offset // issues.step).astype(np.int64)
        inside = block < issues.horizon
        vals = np.full(block.shape, np.nan)
        rr = np.broadcast_to(r[:, None], block.shape)
        vals[inside] = issues.values[rr[inside], block[inside]]
        values[have] = vals
    return ForecastMatrix.on_grid(grid, origins, values, predictor_id)


@dataclass(frozen=True)
class PipelineConfig:
    horizon: int = HORIZON
    gate_C: float = 10.0
    gate_gamma: float = 1.0
    gate_grid_search: bool = False
    gate_max_samples: int = 2500
    gate_daylight_only: bool = True
    route_by: str = "gate"  # which cells feed ES1/ES2: the gate's own output or the true labels
    exclude_night: bool = True
    fit_stride: int = 1
    gp_exo: str = "SR-5"

    def __post_init__(self):
        if self.route_by not in ("label", "gate"):
            raise ValueError("route_by must be 'label' or 'gate'")


@dataclass(eq=False)
class Predictors:
    """Everything the online cycle needs; persisted as a directory of flat files."""

    sr_long: ModelParams
    sr_short: ModelParams
    gp_ari: ModelParams
    gp_arix: ModelParams
    sr_basic: EnsembleWeights
    sr_time: EnsembleWeights
    gate: GateModel
    es1: EnsembleWeights
    es2: EnsembleWeights
    gp_weights: EnsembleWeights
    meta: dict = field(default_factory=dict)

    FILES = {
        "sr_long": "sr_ari_long.params",
        "sr_short": "sr_ari_short.params",
        "gp_ari": "gp_ari.params",
        "gp_arix": "gp_arix.params",
        "sr_basic": "sr_basic.weights",
        "sr_time": "sr_time_order.weights",
        "gate": "gate.model",
        "es1": "es1.weights",
        "es2": "es2.weights",
        "gp_weights": "gp.weights",
    }

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for attr, name in self.FILES.items():
            getattr(self, attr).save(d / name)
        flatfile.atomic_write(d / "store.meta", flatfile.dumps({k: self.meta[k] for k in sorted(self.meta)}))

    @classmethod
    def load(cls, directory) -> "Predictors":
        d = Path(directory)
        loaders = {ModelParams: ModelParams.load, EnsembleWeights: EnsembleWeights.load, GateModel: GateModel.load}
        kinds = {
            "sr_long": ModelParams, "sr_short": ModelParams, "gp_ari": ModelParams, "gp_arix": ModelParams,
            "sr_basic": EnsembleWeights, "sr_time": EnsembleWeights, "gate": GateModel,
            "es1": EnsembleWeights, "es2": EnsembleWeights, "gp_weights": EnsembleWeights,
        }
        parts = {attr: loaders[kinds[attr]](d / name) for attr, name in cls.FILES.items()}
        meta = flatfile.load_dict(d / "store.meta") if (d / "store.meta").exists() else {}
        return cls(**parts, meta=meta)


def full_horizon_origins(lo: int, hi: int, horizon: int = HORIZON, stride: int = 1) -> np.ndarray:
    return np.arange(lo, hi - horizon + 1, stride, dtype=np.int64)


@dataclass(eq=False)
class Forecasts:
    """Forecast matrices of every component and composite predictor for a set of origins."""

    matrices: dict[str, ForecastMatrix]
    good: np.ndarray | None = None

    def __getitem__(self, key: str) -> ForecastMatrix:
        return self.matrices[key]

    def table(self, ids=tuple(METHODS)) -> list[tuple[ForecastMatrix, str]]:
        return [(self.matrices[i], METHODS[i]) for i in ids if i in self.matrices]


def sr_components(p: Predictors | dict, sr: TimeSeries, issues: ForecastMatrix, origins, horizon: int = HORIZON) -> dict[str, ForecastMatrix]:
    get = p.__getitem__ if isinstance(p, dict) else lambda k: getattr(p, k)
    return {
        "SR-1": arimodels.persistence_matrix(sr, origins, horizon, predictor_id="SR-1"),
        "SR-2": service_on_grid(issues, sr, origins, horizon, "SR-2"),
        "SR-ARI-long": arimodels.forecast_matrix(get("sr_long"), sr, origins, horizon, predictor_id="SR-ARI-long"),
        "SR-ARI-short": arimodels.forecast_matrix(get("sr_short"), sr, origins, horizon, predictor_id="SR-ARI-short"),
    }


SR_MEMBERS = ("SR-2", "SR-ARI-long", "SR-ARI-short")
GP_MEMBERS = ("GP-ARI", "GP-2", "GP-3")


def forecast_all(p: Predictors, sr: TimeSeries, gp: TimeSeries, issues: ForecastMatrix, origins, horizon: int = HORIZON, gp_exo: str = "SR-5") -> Forecasts:
    """All predictors from the given origins; reads only data before each origin."""
    m = sr_components(p, sr, issues, origins, horizon)
    members = [m[k] for k in SR_MEMBERS]
    m["SR-3"] = ensemble.combine(p.sr_basic, members, "SR-3")
    m["SR-4"] = ensemble.combine(p.sr_time, members, "SR-4")
    feats = gate.feature_cube(m["SR-2"], sr)
    m["SR-5"], good = ensemble.gated_combine(p.gate, p.es1, p.es2, members, feats, "SR-5")
    m.update(gp_forecasts(p, sr, gp, m, origins, horizon, gp_exo))
    return Forecasts(m, good)


def gp_forecasts(p, sr, gp, m, origins, horizon=HORIZON, gp_exo="SR-5", with_ensemble=True) -> dict[str, ForecastMatrix]:
    out = {
        "GP-1": arimodels.persistence_matrix(gp, origins, horizon, predictor_id="GP-1"),
        "GP-ARI": arimodels.forecast_matrix(p.gp_ari, gp, origins, horizon, predictor_id="GP-ARI"),
        "GP-2": arimodels.forecast_matrix(p.gp_arix, gp, origins, horizon, sr, m["SR-2"].values, "GP-2"),
        "GP-3": arimodels.forecast_matrix(p.gp_arix, gp, origins, horizon, sr, m[gp_exo].values, "GP-3"),
    }
    if with_ensemble:
        out["GP-4"] = ensemble.combine(p.gp_weights, [out[k] for k in GP_MEMBERS], "GP-4")
    return out


def fit(sr: TimeSeries, gp: TimeSeries, issues: ForecastMatrix, split: DatasetSplit, config: PipelineConfig = PipelineConfig()) -> Predictors:
    """Calibrate models on period 1, then ensembles and the gate on period 2."""
    if not sr.same_grid(gp):
        raise ValueError("SR and GP must share one grid")
    H = config.horizon
    c_lo, c_hi = split.calibration
    sr_cal, gp_cal = sr.slice(c_lo, c_hi), gp.slice(c_lo, c_hi)
    models = {
        "sr_long": arimodels.fit_ar(sr_cal, arimodels.PRESETS["ari-long"]),
        "sr_short": arimodels.fit_ar(sr_cal, arimodels.PRESETS["ari-short"]),
        "gp_ari": arimodels.fit_ar(gp_cal, arimodels.PRESETS["ari-long"]),
        "gp_arix": arimodels.fit_ar(gp_cal, arimodels.PRESETS["arix"], sr_cal),
    }
    e_lo, e_hi = split.ensemble_calibration
    # the measured record is cut at the end of period 2 so nothing later leaks in
    sr_e, gp_e = sr.slice(0, e_hi), gp.slice(0, e_hi)
    origins = full_horizon_origins(e_lo, e_hi, H, config.fit_stride)
    m = sr_components(models, sr_e, issues, origins, H)
    members = [m[k] for k in SR_MEMBERS]
    sr_basic = ensemble.fit_weights(members, sr_e, BASIC, config.exclude_night)
    sr_time = ensemble.fit_weights(members, sr_e, TIME_ORDER, config.exclude_night)

    gate_model, es1, es2, good = fit_gate_and_ensembles(sr_e, m, members, config)
    m["SR-5"] = members[0].with_values(
        np.where(good, ensemble.combine(es1, members).values, ensemble.combine(es2, members).values), "SR-5"
    )
    m["SR-3"] = ensemble.combine(sr_basic, members, "SR-3")
    m["SR-4"] = ensemble.combine(sr_time, members, "SR-4")
    p = Predictors(models["sr_long"], models["sr_short"], models["gp_ari"], models["gp_arix"], sr_basic, sr_time, gate_model, es1, es2,
                   gp_weights=None)
    g = gp_forecasts(p, sr_e, gp_e, m, origins, H, config.gp_exo, with_ensemble=False)
    p.gp_weights = ensemble.fit_weights([g[k] for k in GP_MEMBERS], gp_e, BASIC, config.exclude_night)
    p.meta = {
        "sr_peak": flatfile.format_float(evaluation.peak(sr)),
        "gp_peak": flatfile.format_float(evaluation.peak(gp)),
        "horizon": H,
        "gp_exo": config.gp_exo,
        "gate_C": flatfile.format_float(gate_model.C),
        "gate_gamma": flatfile.format_float(gate_model.gamma),
    }
    return p


def fit_gate_and_ensembles(sr_e, m, members, config: PipelineConfig):
    """Label period-2 day-ahead cells, train the gate and the two routed ensembles."""
    # labels come from the day-start rows: service vs the long ARI model
    change, inst, good_lbl, targets = gate.label_arrays(m["SR-2"], m["SR-ARI-long"], sr_e)
    X = gate.gate_features(change, inst)
    y = np.where(good_lbl, 1.0, -1.0)
    if config.gate_daylight_only:
        lit = sr_e.usable()[targets] > 0
        X, y = X[lit], y[lit]
    Xs, ys = gate.subsample(X, y, config.gate_max_samples)
    C, gamma = config.gate_C, config.gate_gamma
    if config.gate_grid_search:
        C, gamma, acc = gate.select_hyperparameters(Xs, ys)
        log.info("gate hyperparameters C=%g gamma=%g (CV accuracy %.3f)", C, gamma, acc)
    model = gate.train_gate_arrays(Xs, ys, C, gamma)

    feats = gate.feature_cube(m["SR-2"], sr_e)
    flat = feats.reshape(-1, feats.shape[-1])
    finite = ~np.isnan(flat).any(axis=1)
    gated = np.zeros(len(flat), dtype=bool)
    gated[finite] = model.predict_good(flat[finite])
    gated = gated.reshape(feats.shape[:2])
    if config.route_by == "gate":
        route = gated
    else:
        label_at = np.zeros(len(sr_e), dtype=bool)
        label_at[targets] = good_lbl
        tgt = members[0].target_index(sr_e)
        route = label_at[np.minimum(tgt, len(sr_e) - 1)]
    es1 = ensemble.fit_weights(members, sr_e, TIME_ORDER, config.exclude_night, cell_mask=route)
    es2 = ensemble.fit_weights(members, sr_e, TIME_ORDER, config.exclude_night, cell_mask=~route)
    return model, es1, es2, gated
