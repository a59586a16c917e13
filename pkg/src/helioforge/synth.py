"""Synthetic SR / GP / weather-service datasets with known ground truth.

Days follow a first-order Markov chain over three weather regimes. Stable
stretches favour the time-series models (yesterday looks like today);
regime switches are where the service, which "knows" the coming day's
regime, is better. That makes the Good/Bad gate learnable by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .timeseries import SECONDS_PER_DAY, ForecastMatrix, TimeSeries, write_csv, write_forecast_csv

REGIMES = ("clear", "mixed", "cloudy")


@dataclass(frozen=True)
class RegimeModel:
    attenuation: tuple[float, float]  # uniform range of the daily mean transmittance
    variability: float  # std of the smooth within-day factor
    service_error: float  # std of the service's attenuation error on such days


DEFAULT_REGIMES = {
    "clear": RegimeModel((0.88, 1.0), 0.02, 0.12),
    "mixed": RegimeModel((0.5, 0.75), 0.12, 0.25),
    "cloudy": RegimeModel((0.12, 0.35), 0.08, 0.15),
}


@dataclass(frozen=True)
class SynthConfig:
    days: int = 120
    clear_sky_peak: float = 1000.0
    regime_persistence: float = 0.6
    regimes: dict = field(default_factory=lambda: dict(DEFAULT_REGIMES))
    service_skill: float = 0.2
    pv_capacity: float = 1000.0
    seed: int = 7
    start: str = "2017-03-01T00:00:00"
    step: int = 900
    sunrise_hour: float = 6.0
    daylength_hours: float = 12.0
    smoothness: float = 0.95  # AR(1) coefficient of the within-day factor per 15 min
    gp_noise: float = 0.01  # fraction of capacity
    initial_regime: str = "clear"
    service_every_hours: int = 6
    service_step_hours: int = 3
    service_horizon_hours: int = 48

    def __post_init__(self):
        if not 0.0 <= self.regime_persistence <= 1.0:
            raise ValueError("regime_persistence must be a probability")
        if not 0.0 <= self.service_skill <= 1.0:
            raise ValueError("service_skill must be within [0, 1]")
        if self.clear_sky_peak <= 0 or self.pv_capacity <= 0:
            raise ValueError("peaks must be positive")
        if self.days < 1:
            raise ValueError("days must be >= 1")
        if self.initial_regime not in self.regimes:
            raise ValueError(f"unknown regime {self.initial_regime!r}")


@dataclass(frozen=True, eq=False)
class SynthData:
    sr: TimeSeries
    gp: TimeSeries
    service_forecast: ForecastMatrix  # issues at coarse resolution
    regimes: tuple[str, ...]
    attenuation: np.ndarray
    clear_sky: np.ndarray

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        write_csv(self.sr, out / "sr.csv")
        write_csv(self.gp, out / "gp.csv")
        write_forecast_csv(self.service_forecast, out / "service.csv")


def clear_sky_profile(config: SynthConfig) -> np.ndarray:
    """Half-sine irradiance for one day, evaluated at each sample's midpoint."""
    per_day = SECONDS_PER_DAY // config.step
    mid_h = (np.arange(per_day) + 0.5) * config.step / 3600.0
    phase = (mid_h - config.sunrise_hour) / config.daylength_hours
    up = (phase > 0) & (phase < 1)
    return np.where(up, config.clear_sky_peak * np.sin(np.pi * np.clip(phase, 0, 1)), 0.0)


def _regime_chain(config: SynthConfig, rng: np.random.Generator) -> list[str]:
    names = list(config.regimes)
    chain = [config.initial_regime]
    for _ in range(config.days - 1):
        prev = chain[-1]
        if rng.random() < config.regime_persistence:
            chain.append(prev)
        else:
            others = [r for r in names if r != prev]
            chain.append(others[rng.integers(len(others))])
    return chain


def _smooth_factor(n: int, std: float, phi: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) path with mean 1 and the given marginal std."""
    e = rng.standard_normal(n) * std * np.sqrt(1 - phi * phi)
    out = np.empty(n)
    prev = rng.standard_normal() * std
    for i in range(n):
        prev = phi * prev + e[i]
        out[i] = prev
    return np.clip(1.0 + out, 0.0, 2.0)


def generate(config: SynthConfig = SynthConfig()) -> SynthData:
    rng = np.random.default_rng(config.seed)
    per_day = SECONDS_PER_DAY // config.step
    clear = clear_sky_profile(config)
    chain = _regime_chain(config, rng)
    atten = np.array([rng.uniform(*config.regimes[r].attenuation) for r in chain])
    variability = np.repeat([config.regimes[r].variability for r in chain], per_day)
    n = config.days * per_day
    factor = _smooth_factor(n, 1.0, config.smoothness, rng) - 1.0
    within = np.clip(1.0 + factor * variability, 0.0, None)
    sr = np.tile(clear, config.days) * np.repeat(atten, per_day) * within
    sr = np.minimum(sr, 1.2 * config.clear_sky_peak)

    lit = sr > 0
    gp = np.minimum(config.pv_capacity, 1.05 * config.pv_capacity * sr / config.clear_sky_peak)
    gp = gp + rng.standard_normal(n) * config.gp_noise * config.pv_capacity
    gp = np.where(lit, np.clip(gp, 0.0, config.pv_capacity), 0.0)

    start = np.datetime64(config.start, "s")
    sr_ts = TimeSeries(start, config.step, sr)
    gp_ts = TimeSeries(start, config.step, gp)
    service = _service_issues(config, sr, clear, atten, chain, rng)
    return SynthData(sr_ts, gp_ts, service, tuple(chain), atten, clear)


def _service_issues(config, sr, clear, atten, chain, rng) -> ForecastMatrix:
    """Coarse forecasts: skill-weighted blend of the truth and a regime-aware guess."""
    per_day = SECONDS_PER_DAY // config.step
    block = config.service_step_hours * 3600 // config.step
    every = config.service_every_hours * 3600 // config.step
    n_blocks = config.service_horizon_hours // config.service_step_hours
    n = len(sr)
    pad = n_blocks * block
    sr_pad = np.concatenate([sr, np.full(pad, np.nan)])
    clear_all = np.tile(clear, config.days + pad // per_day + 1)
    atten_all = np.concatenate([atten, np.full(pad // per_day + 1, np.nan)])
    err_std = np.array([config.regimes[r].service_error for r in chain] + [0.0] * (pad // per_day + 1))
    issues = np.arange(0, n, every)
    values = np.full((len(issues), n_blocks), np.nan)
    skill = config.service_skill
    for r, o in enumerate(issues):
        for k in range(n_blocks):
            lo = o + k * block
            truth = sr_pad[lo:lo + block].mean()
            if np.isnan(truth):
                continue
            days = np.arange(lo, lo + block) // per_day
            guess_atten = np.clip(atten_all[days] + rng.standard_normal() * err_std[days], 0.0, 1.2)
            guess = float(np.mean(clear_all[lo:lo + block] * guess_atten))
            values[r, k] = skill * truth + (1.0 - skill) * guess
    origins = np.datetime64(config.start, "s") + issues * np.timedelta64(config.step, "s")
    return ForecastMatrix(origins, values, config.service_step_hours * 3600, "service")
