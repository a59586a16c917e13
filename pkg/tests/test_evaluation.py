import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helioforge.arimodels import persistence_predict
from helioforge.evaluation import (
    acf_pacf,
    compare_predictors,
    durbin_levinson,
    evaluate_matrix,
    rmse_normalized,
    rolling_backtest,
    sample_acf,
    validation_origins,
    write_profiles,
    write_table,
)
from helioforge.timeseries import DatasetSplit, ForecastMatrix

from conftest import make_series


def direct_rmse(p, m, M):
    s = 0.0
    for a, b in zip(p, m):
        s += (a - b) ** 2
    return 100.0 / M * math.sqrt(s / len(p))


def test_rmse_perfect_and_offset():
    m = np.arange(96.0)
    assert rmse_normalized(m, m, 5.0) == 0.0
    for M in (1000.0, 500.0, 80.0, 20.0, 10.0):  # M/10 exactly representable
        meas = np.arange(48.0)
        assert rmse_normalized(meas + M / 10, meas, M) == 10.0


def test_rmse_errors():
    with pytest.raises(ValueError):
        rmse_normalized([], [], 1.0)
    with pytest.raises(ValueError):
        rmse_normalized([1.0], [1.0], 0.0)
    with pytest.raises(ValueError):
        rmse_normalized([1.0, 2.0], [1.0], 1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 200), st.floats(0.1, 5000))
def test_rmse_direct_oracle(seed, h, M):
    rng = np.random.default_rng(seed)
    p, m = rng.normal(0, M, h), rng.normal(0, M, h)
    assert rmse_normalized(p, m, M) == pytest.approx(direct_rmse(p, m, M), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100))
def test_rmse_scale_invariance_and_triangle(seed, c):
    rng = np.random.default_rng(seed)
    p, q, m = rng.random((3, 50)) * 100
    assert rmse_normalized(c * p, c * m, c * 100) == pytest.approx(rmse_normalized(p, m, 100), rel=1e-9)
    assert rmse_normalized(p, m, 100) <= rmse_normalized(p, q, 100) + rmse_normalized(q, m, 100) + 1e-12


def periodic_split(days=10):
    x = np.tile(np.random.default_rng(0).random(96) * 100, days)
    return make_series(x), DatasetSplit.by_days(4, 3, 3)


def test_persistence_perfect_on_periodic_data():
    s, split = periodic_split()
    rep = rolling_backtest(lambda h, n: persistence_predict(h, 96, n), s, split, 96, stride=5)
    assert rep.rmse == 0.0 and np.all(rep.per_origin_rmse == 0)


def test_mean_of_per_origin_and_stride_consistency():
    s, split = periodic_split()
    rng = np.random.default_rng(1)
    noisy = make_series(s.values + rng.normal(0, 5, len(s)))
    pred = lambda h, n: persistence_predict(h, 96, n)
    r1 = rolling_backtest(pred, noisy, split, 12, stride=1)
    r4 = rolling_backtest(pred, noisy, split, 12, stride=4)
    assert r1.rmse == pytest.approx(np.mean(r1.per_origin_rmse))
    shared = np.isin(r1.origins, r4.origins)
    assert np.array_equal(r1.per_origin_rmse[shared], r4.per_origin_rmse)
    assert r1.n_origins == len(validation_origins(split, 12))


def test_backtest_rejects_wrong_length():
    s, split = periodic_split()
    with pytest.raises(ValueError, match="shape"):
        rolling_backtest(lambda h, n: np.zeros(n + 1), s, split, 12)


def test_backtest_never_sees_the_future():
    s, split = periodic_split()
    poison = -1e300
    vals = s.values.copy()
    seen = []

    def spy(history, n):
        seen.append(len(history))
        o = len(history)
        data = vals.copy()
        data[o:] = poison  # anything at or after the origin is poison
        assert np.array_equal(history.values, data[:o])
        assert not np.any(history.values == poison)
        return np.zeros(n)

    rep = rolling_backtest(spy, s, split, 96, stride=7)
    assert seen == list(rep.origins)


def test_evaluate_matrix_and_tables(tmp_path):
    s, split = periodic_split()
    origins = validation_origins(split, 96, 8)
    tgt = origins[:, None] + np.arange(96)
    fm = ForecastMatrix.on_grid(s, origins, s.values[tgt] + 3.0, "X")
    rep = evaluate_matrix(fm, s, 96, M=30.0)
    assert rep.rmse == pytest.approx(10.0)
    assert np.allclose(rep.horizon_profile, 10.0)
    rows, profiles = compare_predictors([(fm, "offset")], s, split, M=30.0, stride=8)
    assert rows[0].rmse_short == pytest.approx(10.0) and rows[0].rmse_medium == pytest.approx(10.0)
    write_table(rows, tmp_path / "t.csv")
    write_profiles(profiles, tmp_path / "p.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "predictor_id,method,rmse_s,rmse_m"
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 97


def test_acf_lag_zero_and_zero_variance():
    x = np.random.default_rng(0).standard_normal(500)
    assert sample_acf(x, 5)[0] == 1.0
    with pytest.raises(ValueError, match="zero variance"):
        acf_pacf(np.full(100, 3.0), 5)


def test_white_noise_band():
    c = acf_pacf(np.random.default_rng(1).standard_normal(10_000), 50)
    assert np.mean(np.abs(c.acf) <= c.band) >= 0.93
    assert np.mean(np.abs(c.pacf) <= c.band) >= 0.93


def test_ar1_pacf():
    rng = np.random.default_rng(2)
    e = rng.standard_normal(20_000)
    x = np.zeros_like(e)
    for t in range(1, len(e)):
        x[t] = 0.8 * x[t - 1] + e[t]
    c = acf_pacf(x, 20)
    assert c.pacf[0] == pytest.approx(0.8, abs=0.02)
    assert np.mean(np.abs(c.pacf[1:]) <= c.band) >= 0.8
    assert list(c.significant())[0] == 1


def test_durbin_levinson_against_yule_walker():
    rho = sample_acf(np.random.default_rng(3).standard_normal(400).cumsum(), 6)
    pacf = durbin_levinson(rho)
    for k in range(1, 7):
        R = np.array([[rho[abs(i - j)] for j in range(k)] for i in range(k)])
        phi = np.linalg.solve(R, rho[1:k + 1])
        assert pacf[k - 1] == pytest.approx(phi[-1], abs=1e-9)
