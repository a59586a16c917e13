import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helioforge.arimodels import (
    PRESETS,
    LagSpec,
    ModelParams,
    fit_ar,
    forecast_matrix,
    load_spec,
    persistence_predict,
    predict_recursive,
    residual_ss,
    seasonal_diff,
    seasonal_integrate,
)
from helioforge.timeseries import TimeSeries

from conftest import START, make_series


def simulate_ari(coeffs, lags, n, lag=96, seed=0, burn=500, noise=1.0):
    """Draw the differenced AR process, then integrate at the seasonal lag."""
    rng = np.random.default_rng(seed)
    total = n + burn
    z = np.zeros(total)
    e = rng.standard_normal(total) * noise
    m = max(lags)
    for t in range(m, total):
        z[t] = sum(a * z[t - k] for a, k in zip(coeffs, lags)) + e[t]
    z = z[burn:]
    x = np.empty(n)
    x[:lag] = 50 + 10 * rng.standard_normal(lag)
    for t in range(lag, n):
        x[t] = x[t - lag] + z[t]
    return x


def test_diff_periodic_is_zero():
    x = np.tile(np.random.default_rng(0).random(96), 3)
    d = seasonal_diff(make_series(x), 96)
    assert np.all(np.isnan(d.values[:96])) and np.allclose(d.values[96:], 0)


def test_diff_ramp_lag_one():
    d = seasonal_diff(make_series([1, 2, 3, 4]), 1)
    assert np.isnan(d.values[0]) and list(d.values[1:]) == [1, 1, 1]


def test_diff_needs_history():
    with pytest.raises(ValueError, match="insufficient history"):
        seasonal_diff(make_series([1, 2, 3]), 3)


def test_integrate_single_step():
    hist = make_series([10.0])
    diff = TimeSeries(hist.end_time, 900, np.array([2.0]))
    assert list(seasonal_integrate(diff, hist, 1).values) == [12.0]


def test_integrate_zero_diff_repeats_history():
    day = np.random.default_rng(1).random(96)
    hist = make_series(day)
    out = seasonal_integrate(TimeSeries(hist.end_time, 900, np.zeros(192)), hist, 96)
    assert np.array_equal(out.values, np.tile(day, 2))


def test_integrate_missing_history():
    with pytest.raises(ValueError, match="insufficient history"):
        seasonal_integrate(TimeSeries(START, 900, np.zeros(3)), make_series([1.0]), 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 10_000))
def test_diff_integrate_round_trip(lag, periods, seed):
    x = np.random.default_rng(seed).normal(100, 30, lag * (periods + 1) + 3)
    s = make_series(x)
    d = seasonal_diff(s, lag)
    back = seasonal_integrate(d.slice(lag, len(d)), s.slice(0, lag), lag)
    assert np.allclose(back.values, x[lag:], rtol=1e-9, atol=0)


def test_lagspec_validation():
    with pytest.raises(ValueError):
        LagSpec((2, 1))
    with pytest.raises(ValueError):
        LagSpec((1, 1))
    with pytest.raises(ValueError):
        LagSpec((1,), seasonal_lag=0)
    assert PRESETS["arix"].history_needed == 96 + 97


def test_recover_ari2():
    x = simulate_ari((0.5, -0.3), (1, 2), 10_000, seed=3)
    m = fit_ar(make_series(x), LagSpec((1, 2)))
    assert np.allclose(m.ar_coeffs, [0.5, -0.3], atol=0.05)
    assert m.fit_residual_rms == pytest.approx(1.0, rel=0.05)


def test_exogenous_identifiability():
    rng = np.random.default_rng(5)
    exo = rng.normal(200, 50, 5000)
    target = np.concatenate([[exo[0]], exo[:-1]])  # target(t) = exo(t - 1)
    m = fit_ar(make_series(target), LagSpec((1,), (1,)), exo=make_series(exo))
    assert m.exo_coeffs[0] == pytest.approx(1.0, abs=1e-6)
    assert m.ar_coeffs[0] == pytest.approx(0.0, abs=1e-6)


def test_white_noise_gives_zero_coefficients():
    x = simulate_ari((), (1,), 20_000, seed=2, noise=2.0)
    m = fit_ar(make_series(x), PRESETS["ari-short"])
    assert np.all(np.abs(m.ar_coeffs) < 0.03)
    assert m.fit_residual_rms == pytest.approx(2.0, rel=0.03)


def test_fit_is_least_squares_minimum():
    x = simulate_ari((0.4, 0.2), (1, 96), 4000, seed=7)
    s = make_series(x)
    spec = LagSpec((1, 2, 96))
    m = fit_ar(s, spec)
    base = residual_ss(m, s)
    for i in range(len(m.ar_coeffs)):
        for d in (-1e-3, 1e-3):
            c = m.ar_coeffs.copy()
            c[i] += d
            assert residual_ss(ModelParams(spec, c), s) >= base


def test_fit_errors():
    with pytest.raises(ValueError, match="insufficient data"):
        fit_ar(make_series(np.random.default_rng(0).random(150)), PRESETS["ari-long"])
    with pytest.raises(ValueError, match="degenerate regression"):
        fit_ar(make_series(np.zeros(2000)), PRESETS["ari-short"])
    with pytest.raises(ValueError, match="exogenous input required"):
        fit_ar(make_series(np.random.default_rng(0).random(3000)), PRESETS["arix"])


def test_fit_drops_rows_with_missing():
    x = simulate_ari((0.5, -0.3), (1, 2), 6000, seed=4)
    x[1000:1010] = np.nan
    m = fit_ar(make_series(x), LagSpec((1, 2)))
    assert np.allclose(m.ar_coeffs, [0.5, -0.3], atol=0.06)


def test_zero_model_is_persistence():
    x = np.random.default_rng(0).random(400) * 100
    hist = make_series(x)
    out = predict_recursive(ModelParams.zeros(PRESETS["ari-long"]), hist, horizon=150)
    assert np.array_equal(out, persistence_predict(hist, 96, 150))
    assert np.array_equal(out[:96], x[-96:])


def test_one_step_closed_form():
    x = simulate_ari((0.5, -0.3), (1, 2), 2000, seed=9) + 500
    spec = LagSpec((1, 2, 96))
    m = ModelParams(spec, np.array([0.5, -0.3, 0.1]))
    out = predict_recursive(m, make_series(x), horizon=1)[0]
    z = lambda t: x[t] - x[t - 96]
    n = len(x)
    expected = x[n - 96] + 0.5 * z(n - 1) - 0.3 * z(n - 2) + 0.1 * z(n - 96)
    assert out == pytest.approx(expected, rel=1e-12)


def _brute_force(model, x, horizon, exo=None, exo_future=None):
    """Step-by-step simulator on plain Python lists, independent of the batch code."""
    s = model.spec.seasonal_lag
    hist = list(x)
    ex = list(exo) + list(exo_future) if exo is not None else None
    n0 = len(hist)
    for h in range(horizon):
        t = n0 + h
        zt = 0.0
        for a, k in zip(model.ar_coeffs, model.spec.ar_lags):
            zt += a * (hist[t - k] - hist[t - k - s])
        for b, j in zip(model.exo_coeffs, model.spec.exo_lags):
            zt += b * (ex[t - j] - ex[t - j - s])
        hist.append(hist[t - s] + zt)
    return np.maximum(np.array(hist[n0:]), 0.0)


def test_multi_step_matches_brute_force():
    x = simulate_ari((0.5, -0.2, 0.3), (1, 2, 96), 3000, seed=11) + 300
    model = fit_ar(make_series(x), LagSpec((1, 2, 96)))
    out = predict_recursive(model, make_series(x), horizon=96)
    assert np.allclose(out, _brute_force(model, x, 96), rtol=1e-10)


def test_arix_multi_step_matches_brute_force():
    rng = np.random.default_rng(2)
    exo = simulate_ari((0.6,), (1,), 3000, seed=12) + 300
    target = 0.8 * exo + rng.normal(0, 1, 3000)
    spec = PRESETS["arix"]
    model = fit_ar(make_series(target[:2500]), spec, exo=make_series(exo[:2500]))
    fut = exo[2500:2596]
    out = predict_recursive(model, make_series(target[:2500]), fut, 96, exo_history=make_series(exo[:2500]))
    assert np.allclose(out, _brute_force(model, target[:2500], 96, exo[:2500], fut), rtol=1e-10)
    with pytest.raises(ValueError, match="exogenous input required"):
        predict_recursive(model, make_series(target[:2500]), None, 96)


def test_batch_matrix_matches_single_origin_and_ignores_future():
    x = simulate_ari((0.5,), (1,), 1500, seed=1) + 200
    s = make_series(x)
    model = fit_ar(s, PRESETS["ari-long"])
    origins = [400, 777, 1200]
    fm = forecast_matrix(model, s, origins, 96)
    poisoned = x.copy()
    for r, o in enumerate(origins):
        assert np.allclose(fm.values[r], predict_recursive(model, s.slice(0, o), horizon=96))
    poisoned[401:] = 1e9
    again = forecast_matrix(model, make_series(poisoned), [400], 96)
    assert np.array_equal(again.values[0], fm.values[0])


def test_persistence_examples():
    assert np.all(persistence_predict(make_series(np.full(96, 3.5)), 96, 96) == 3.5)
    day = np.arange(96.0)
    assert np.array_equal(persistence_predict(make_series(np.concatenate([np.zeros(96), day])), 96, 96), day)
    with pytest.raises(ValueError):
        persistence_predict(make_series(np.zeros(10)), 96, 96)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-2, 2), st.floats(-2, 2))
def test_predictions_nonnegative(seed, a, b):
    x = np.random.default_rng(seed).random(300) * 50
    m = ModelParams(LagSpec((1, 2)), np.array([a, b]))
    assert np.all(predict_recursive(m, make_series(x), horizon=96) >= 0)


def test_params_text_round_trip(tmp_path):
    m = ModelParams(PRESETS["arix"], np.arange(8) / 7.0, np.arange(16) / 3.0, 0.125, 999)
    m.save(tmp_path / "m.params")
    back = ModelParams.load(tmp_path / "m.params")
    assert back.spec == m.spec and np.array_equal(back.ar_coeffs, m.ar_coeffs) and np.array_equal(back.exo_coeffs, m.exo_coeffs)
    assert back.n_rows == 999


def test_load_spec_file(tmp_path):
    p = tmp_path / "spec.txt"
    p.write_text("ar_lags = 1, 2, 96\nseasonal_lag = 96\n")
    assert load_spec(str(p)).ar_lags == (1, 2, 96)
    assert load_spec("ari-short") is PRESETS["ari-short"]
    with pytest.raises(ValueError):
        ModelParams(LagSpec((1, 2)), np.zeros(3))
