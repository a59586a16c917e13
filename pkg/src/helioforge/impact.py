"""Impact of day-ahead GP error on a PV + battery microgrid.

The day-ahead commitment is emulated by adding white Gaussian noise to the
true production profile at a chosen SNR. A greedy battery policy then tries
to hold the point-of-common-coupling (PCC) power on the commitment; whatever
it cannot absorb is imbalance, charged at a penalty rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import flatfile
from .timeseries import TimeSeries

RMSE_TARGETS = (0.0, 5.19, 10.08, 14.85, 19.65)
SCENARIO_NAMES = ("P", "1", "2", "3", "4")
STEPS_PER_DAY = 96
_SNR_BRACKET = (-40.0, 120.0)


@dataclass(frozen=True)
class EssState:
    energy: float  # kWh
    power_limit: float = 100.0  # kW
    e_min: float = 150.0
    e_max: float = 500.0
    efficiency: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError("efficiency must be in (0, 1]")
        if self.power_limit < 0 or self.e_min > self.e_max:
            raise ValueError("invalid ESS limits")
        if not self.e_min <= self.energy <= self.e_max:
            raise ValueError(f"initial energy {self.energy} outside [{self.e_min}, {self.e_max}]")

    @classmethod
    def mid(cls, **kw) -> "EssState":
        lo, hi = kw.get("e_min", 150.0), kw.get("e_max", 500.0)
        return cls(energy=0.5 * (lo + hi), **kw)


@dataclass(frozen=True, eq=False)
class ImpactScenario:
    actual_gp: np.ndarray  # kW per step
    dayahead_gp: np.ndarray
    tariff: float = 0.05  # per kWh delivered
    penalty_rate: float = 0.10  # per kWh of imbalance
    step_hours: float = 0.25
    load: float = 0.0  # flat load, kW

    def __post_init__(self):
        a = self.actual_gp.usable() if isinstance(self.actual_gp, TimeSeries) else self.actual_gp
        a = np.asarray(a, dtype=float)
        d = np.asarray(self.dayahead_gp, dtype=float)
        if a.shape != d.shape or a.ndim != 1:
            raise ValueError("actual and day-ahead profiles must be aligned vectors")
        if np.isnan(a).any() or np.isnan(d).any():
            raise ValueError("profiles must be complete")
        object.__setattr__(self, "actual_gp", a)
        object.__setattr__(self, "dayahead_gp", d)


@dataclass
class Trace:
    pcc: np.ndarray
    ess_power: np.ndarray  # + charging, - discharging (kW at the battery terminals)
    ess_energy: np.ndarray  # energy at the end of each step
    imbalance: np.ndarray  # delivered minus committed, kW
    initial_energy: float

    def __len__(self) -> int:
        return len(self.pcc)

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "pcc", "ess_power", "ess_energy", "imbalance"])
            for i in range(len(self)):
                w.writerow([i + 1, *(flatfile.format_float(float(v[i])) for v in (self.pcc, self.ess_power, self.ess_energy, self.imbalance))])


def emulate_prediction(actual, snr_db: float, seed: int, clip: bool = True, producing_only: bool = True) -> np.ndarray:
    """``actual`` plus white noise of power ``P_signal / 10**(snr_db/10)``.

    ``snr_db = inf`` means no noise. The result is clipped at zero unless
    ``clip`` is False. With ``producing_only`` the noise is confined to steps
    where the plant produces: a day-ahead PV forecast is zero at night, and
    clipped night noise would otherwise bias the commitment upwards.
    """
    a = np.asarray(actual, dtype=float)
    if np.any(a < 0) or np.isnan(a).any():
        raise ValueError("actual must be nonnegative")
    power = float(np.mean(a * a)) if a.size else 0.0
    if power == 0.0:
        raise ValueError("zero signal power")
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise ValueError("snr_db must be finite or +inf")
    if snr_db == math.inf:
        return a.copy()
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    noise = sigma * np.random.default_rng(seed).standard_normal(a.size)
    if producing_only:
        noise = np.where(a > 0, noise, 0.0)
    out = a + noise
    return np.maximum(out, 0.0) if clip else out


def normalized_rmse(predicted, actual) -> float:
    a = np.asarray(actual, dtype=float)
    return float(100.0 / a.max() * np.sqrt(np.mean((np.asarray(predicted) - a) ** 2)))


def snr_for_rmse(actual, target_rmse: float, seed: int, tol: float = 1e-6) -> float:
    """SNR (dB) whose clipped emulation hits ``target_rmse`` percent for this seed.

    The clipped error grows monotonically with the noise scale, so plain
    bisection on the SNR converges.
    """
    if target_rmse < 0:
        raise ValueError("target RMSE must be nonnegative")
    if target_rmse == 0:
        return math.inf
    lo, hi = _SNR_BRACKET  # low SNR -> large error
    f = lambda snr: normalized_rmse(emulate_prediction(actual, snr, seed), actual) - target_rmse
    if f(lo) < 0 or f(hi) > 0:
        raise ValueError(f"target RMSE {target_rmse} outside the reachable range")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def track_reference(scenario: ImpactScenario, ess0: EssState) -> Trace:
    """Greedy tracking of the committed PCC power with the battery.

    Surplus (actual above commitment) charges the battery and shortfall
    discharges it, each limited by the power rating and the energy headroom.
    """
    dt = scenario.step_hours
    eta = ess0.efficiency
    reference = scenario.dayahead_gp - scenario.load
    available = scenario.actual_gp - scenario.load
    n = len(reference)
    pcc, power, energy, imb = (np.empty(n) for _ in range(4))
    e = ess0.energy
    for t in range(n):
        gap = available[t] - reference[t]
        if gap > 0:
            p = min(gap, ess0.power_limit, (ess0.e_max - e) / (eta * dt))
            e = e + eta * p * dt
        else:
            p = -min(-gap, ess0.power_limit, (e - ess0.e_min) * eta / dt)
            e = e + p / eta * dt
        e = min(max(e, ess0.e_min), ess0.e_max)
        power[t] = p
        energy[t] = e
        pcc[t] = available[t] - p
        imb[t] = pcc[t] - reference[t]
    return Trace(pcc, power, energy, imb, ess0.energy)


def benefit_accounting(trace: Trace, scenario: ImpactScenario) -> dict[str, float]:
    dt = scenario.step_hours
    trading = float(np.sum(trace.pcc) * dt * scenario.tariff)
    charge = float(np.sum(np.abs(trace.imbalance)) * dt * scenario.penalty_rate)
    return {"trading": trading, "charge": charge, "benefit": trading - charge}


def check_limits(trace: Trace, ess: EssState, atol: float = 1e-9) -> int:
    """Number of steps breaking the energy or power limits."""
    bad = (trace.ess_energy < ess.e_min - atol) | (trace.ess_energy > ess.e_max + atol)
    bad |= np.abs(trace.ess_power) > ess.power_limit + atol
    return int(bad.sum())


@dataclass(frozen=True)
class ImpactConfig:
    rmse_targets: tuple[float, ...] = RMSE_TARGETS
    seeds: int = 20
    tariff: float = 0.05
    penalty_rate: float = 0.10
    load_kw: float = 0.0
    power_limit: float = 100.0
    e_min: float = 150.0
    e_max: float = 500.0
    initial_energy: float | None = None  # default: mid-range
    efficiency: float = 1.0
    pv_capacity: float = 1000.0
    day_seed: int = 0
    day_regime: str = "clear"

    def ess(self) -> EssState:
        e0 = 0.5 * (self.e_min + self.e_max) if self.initial_energy is None else self.initial_energy
        return EssState(e0, self.power_limit, self.e_min, self.e_max, self.efficiency)

    @classmethod
    def from_text(cls, text: str) -> "ImpactConfig":
        d = dict(flatfile.loads(text))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown impact settings: {', '.join(sorted(unknown))}")
        kw = {}
        for k, v in d.items():
            if k == "rmse_targets":
                kw[k] = tuple(float(x) for x in flatfile.parse_floats(v))
            elif k in ("seeds", "day_seed"):
                kw[k] = int(v)
            elif k == "day_regime":
                kw[k] = v
            elif k == "initial_energy" and v.lower() in ("", "mid", "none"):
                kw[k] = None
            else:
                kw[k] = float(v)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ImpactConfig":
        return cls.from_text(Path(path).read_text())


def default_pv_day(config: ImpactConfig = ImpactConfig()) -> np.ndarray:
    """One synthetic day of plant output (kW) to commit against."""
    from .synth import SynthConfig, generate

    data = generate(SynthConfig(days=1, seed=config.day_seed, initial_regime=config.day_regime, pv_capacity=config.pv_capacity))
    return np.asarray(data.gp.values, dtype=float)


@dataclass
class ScenarioResult:
    name: str
    rmse_target: float
    rmse_achieved: float
    trading: float
    charge: float
    benefit: float
    limit_violations: int = 0
    per_seed: list = field(default_factory=list)


def run_study(actual=None, config: ImpactConfig = ImpactConfig(), trace_dir=None) -> list[ScenarioResult]:
    """Mean trading / charge / benefit per RMSE target over ``config.seeds`` seeds.

    With ``trace_dir`` the first seed's trace of every scenario is written
    there as CSV.
    """
    actual = default_pv_day(config) if actual is None else np.asarray(actual, dtype=float)
    ess = config.ess()
    results = []
    for k, target in enumerate(config.rmse_targets):
        name = f"SMPC-{SCENARIO_NAMES[k]}" if k < len(SCENARIO_NAMES) else f"SMPC-{k}"
        rows, rmses, violations = [], [], 0
        for seed in range(config.seeds):
            snr = snr_for_rmse(actual, target, seed)
            pred = emulate_prediction(actual, snr, seed)
            sc = ImpactScenario(actual, pred, config.tariff, config.penalty_rate, load=config.load_kw)
            trace = track_reference(sc, ess)
            violations += check_limits(trace, ess)
            rows.append(benefit_accounting(trace, sc))
            rmses.append(normalized_rmse(pred, actual))
            if trace_dir is not None and seed == 0:
                trace.write_csv(Path(trace_dir) / f"trace_{name}.csv")
        mean = {key: float(np.mean([r[key] for r in rows])) for key in ("trading", "charge", "benefit")}
        results.append(ScenarioResult(name, target, float(np.mean(rmses)), mean["trading"], mean["charge"], mean["benefit"], violations, rows))
    return results


def write_summary(results: Sequence[ScenarioResult], path) -> None:
    """One row per scenario."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "rmse_target", "rmse_achieved", "trading", "charge", "benefit"])
        for r in results:
            w.writerow([r.name, f"{r.rmse_target:.2f}", f"{r.rmse_achieved:.2f}", f"{r.trading:.1f}", f"{r.charge:.1f}", f"{r.benefit:.1f}"])
