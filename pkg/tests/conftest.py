import numpy as np
import pytest

from helioforge import pipeline, synth
from helioforge.timeseries import DatasetSplit, TimeSeries

START = np.datetime64("2017-03-01T00:00:00", "s")


def make_series(values, step=900, start=START, flags=None) -> TimeSeries:
    return TimeSeries(start, step, np.asarray(values, dtype=float), flags)


@pytest.fixture(scope="session")
def small_data():
    """40 synthetic days: 20 calibration, 15 ensemble, 5 validation."""
    data = synth.generate(synth.SynthConfig(days=40, seed=1))
    split = DatasetSplit.by_days(20, 15, 5)
    return data, split


@pytest.fixture(scope="session")
def small_predictors(small_data):
    data, split = small_data
    return pipeline.fit(data.sr, data.gp, data.service_forecast, split)
