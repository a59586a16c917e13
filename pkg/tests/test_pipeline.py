import numpy as np
import pytest

from helioforge import pipeline
from helioforge.timeseries import ForecastMatrix, TimeSeries


def test_service_on_grid_zero_order_hold():
    grid = TimeSeries(np.datetime64("2017-03-01T00:00:00"), 900, np.zeros(200))
    issues = ForecastMatrix(
        np.array(["2017-03-01T00:00:00", "2017-03-01T06:00:00"], dtype="datetime64[s]"),
        np.array([[1.0, 2.0, 3.0], [10.0, 20.0, 30.0]]),
        3 * 3600,
    )
    fm = pipeline.service_on_grid(issues, grid, [4, 24, 25], horizon=40)
    # origin 01:00 uses the 00:00 issue: blocks of 12 steps, first block partly elapsed
    assert list(fm.values[0, :8]) == [1.0] * 8 and fm.values[0, 8] == 2.0
    assert np.isnan(fm.values[0, 32])  # beyond 9 h of reach
    assert fm.values[1, 0] == 10.0 and fm.values[2, 11] == 20.0


def test_no_issue_yet_is_missing():
    grid = TimeSeries(np.datetime64("2017-03-01T00:00:00"), 900, np.zeros(50))
    issues = ForecastMatrix(np.array(["2017-03-01T03:00:00"], dtype="datetime64[s]"), np.ones((1, 4)), 3 * 3600)
    assert np.isnan(pipeline.service_on_grid(issues, grid, [2], 10).values).all()


def test_store_round_trip(tmp_path, small_data, small_predictors):
    data, split = small_data
    small_predictors.save(tmp_path)
    assert {p.name for p in tmp_path.iterdir()} >= set(pipeline.Predictors.FILES.values())
    loaded = pipeline.Predictors.load(tmp_path)
    origins = pipeline.full_horizon_origins(*split.validation, stride=24)
    a = pipeline.forecast_all(small_predictors, data.sr, data.gp, data.service_forecast, origins)
    b = pipeline.forecast_all(loaded, data.sr, data.gp, data.service_forecast, origins)
    for k in pipeline.METHODS:
        assert np.allclose(a[k].values, b[k].values, equal_nan=True, atol=1e-9), k


def test_forecast_all_has_no_lookahead(small_data, small_predictors):
    data, split = small_data
    o = split.validation[0] + 40
    f = pipeline.forecast_all(small_predictors, data.sr, data.gp, data.service_forecast, [o])
    sr_v, gp_v = data.sr.values.copy(), data.gp.values.copy()
    sr_v[o:] = 1e6
    gp_v[o:] = -1e6
    g = pipeline.forecast_all(small_predictors, data.sr.replace(sr_v), data.gp.replace(gp_v), data.service_forecast, [o])
    for k in pipeline.METHODS:
        assert np.array_equal(f[k].values, g[k].values, equal_nan=True), k


def test_every_method_present_and_finite(small_data, small_predictors):
    data, split = small_data
    origins = pipeline.full_horizon_origins(*split.validation, stride=48)
    f = pipeline.forecast_all(small_predictors, data.sr, data.gp, data.service_forecast, origins)
    assert [fm for fm, _ in f.table()] and len(f.table()) == len(pipeline.METHODS)
    for k in pipeline.METHODS:
        assert f[k].values.shape == (len(origins), 96) and np.isfinite(f[k].values).all(), k
    assert f.good.shape == (len(origins), 96)


def test_fit_rejects_mismatched_grids(small_data):
    data, split = small_data
    with pytest.raises(ValueError):
        pipeline.fit(data.sr, data.gp.slice(0, 100), data.service_forecast, split)
