import itertools

import numpy as np
import pytest

from helioforge import gate
from helioforge.gate import (
    BAD,
    GOOD,
    ConvergenceError,
    GateModel,
    GateSample,
    classify,
    kkt_violations,
    label_training_data,
    rbf_kernel,
    smo,
    train_gate,
    train_gate_arrays,
)
from helioforge.timeseries import ForecastMatrix

from conftest import make_series


def two_clusters(n=40, seed=0):
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0, 2 * np.pi, n)
    rad = 0.5 * np.sqrt(rng.uniform(0, 1, n))
    offs = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    X = np.vstack([offs[: n // 2] + (-5, -5), offs[n // 2:] + (5, 5)])
    y = np.r_[-np.ones(n // 2), np.ones(n - n // 2)]
    return X, y


XOR_X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
XOR_Y = np.array([1.0, 1.0, -1.0, -1.0])


def dual_by_enumeration(K, y, C):
    """Exact small dual QP: try every zero / free / C assignment and solve the KKT system."""
    n = len(y)
    Q = np.outer(y, y) * K
    best, best_obj = None, np.inf
    for states in itertools.product((0, 1, 2), repeat=n):
        alpha = np.array([C if s == 2 else 0.0 for s in states])
        free = [i for i, s in enumerate(states) if s == 1]
        if free:
            fixed = [i for i in range(n) if i not in free]
            f = len(free)
            A = np.zeros((f + 1, f + 1))
            A[:f, :f] = Q[np.ix_(free, free)]
            A[:f, f] = -y[free]
            A[f, :f] = y[free]
            rhs = np.r_[1.0 - Q[np.ix_(free, fixed)] @ alpha[fixed], -y[fixed] @ alpha[fixed]]
            try:
                sol = np.linalg.solve(A, rhs)
            except np.linalg.LinAlgError:
                continue
            alpha[free] = sol[:f]
        if np.any(alpha < -1e-9) or np.any(alpha > C + 1e-9) or abs(y @ alpha) > 1e-9:
            continue
        obj = 0.5 * alpha @ Q @ alpha - alpha.sum()
        if obj < best_obj - 1e-12:
            best, best_obj = alpha, obj
    return best, best_obj


def test_separable_clusters_perfect():
    X, y = two_clusters()
    m = train_gate_arrays(X, y, C=10, gamma=1)
    assert np.all(np.where(m.predict_good(X), 1, -1) == y)
    assert len(kkt_violations(m, X, y)) == 0


def test_xor_against_enumerated_dual():
    m = train_gate_arrays(XOR_X, XOR_Y, C=10, gamma=1)
    assert np.all(np.where(m.predict_good(XOR_X), 1, -1) == XOR_Y)
    Xs = m.standardize(XOR_X)
    alpha_ref, _ = dual_by_enumeration(rbf_kernel(Xs, Xs, 1.0), XOR_Y, 10.0)
    alpha = np.zeros(4)
    alpha[m.sv_index] = np.abs(m.dual_coeffs)
    assert np.allclose(alpha, alpha_ref, atol=1e-3)


def test_smo_matches_enumeration_on_random_small_problems():
    rng = np.random.default_rng(4)
    for _ in range(10):
        X = rng.normal(size=(5, 2))
        y = np.array([1, 1, -1, -1, rng.choice([-1, 1])], dtype=float)
        K = rbf_kernel(X, X, 0.7)
        alpha, _, _ = smo(K, y, 2.0, tol=1e-10)
        ref, ref_obj = dual_by_enumeration(K, y, 2.0)
        Q = np.outer(y, y) * K
        assert 0.5 * alpha @ Q @ alpha - alpha.sum() == pytest.approx(ref_obj, abs=1e-7)


def test_duplicated_samples_same_boundary():
    # duplicating rows doubles the slack penalty, so the boundary is only
    # invariant where no slack is active: a separable set
    X, y = two_clusters(30, seed=2)
    a = train_gate_arrays(X, y, C=10, gamma=0.5)
    b = train_gate_arrays(np.vstack([X, X]), np.r_[y, y], C=10, gamma=0.5)
    g = np.linspace(-8, 8, 25)
    probe = np.array([[u, v] for u in g for v in g])
    da, db = a.decision_function(probe), b.decision_function(probe)
    clear = (np.abs(da) > 1e-3) & (np.abs(db) > 1e-3)
    assert np.array_equal(da[clear] > 0, db[clear] > 0)
    assert clear.mean() > 0.95


def test_invariants_on_trained_model():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(300, 4))
    y = np.where(X[:, 0] + 0.5 * rng.normal(size=300) > 0, 1.0, -1.0)
    for C in gate.C_GRID:
        m = train_gate_arrays(X, y, C=C, gamma=0.5)
        assert np.all(np.abs(m.dual_coeffs) <= C + 1e-12)
        assert abs(m.dual_coeffs.sum()) < 1e-8
        assert len(kkt_violations(m, X, y, tol=1e-2)) == 0


def test_label_flip_flips_training_predictions():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(120, 3))
    y = np.where(np.sin(2 * X[:, 0]) + X[:, 1] > 0, 1.0, -1.0)
    a = train_gate_arrays(X, y, C=10, gamma=1)
    b = train_gate_arrays(X, -y, C=10, gamma=1)
    da, db = a.decision_function(X), b.decision_function(X)
    assert np.all(np.sign(da) == -np.sign(db))
    assert np.allclose(da, -db, atol=5e-3)  # both solved to the 1e-3 KKT tolerance


def test_lipschitz_bound_in_forecast_change():
    rng = np.random.default_rng(1)
    samples = [GateSample(float(c), int(i), GOOD if c > 0 else BAD) for c, i in zip(rng.normal(0, 100, 200), rng.integers(1, 97, 200))]
    m = train_gate(samples, C=10, gamma=1)
    L = m.lipschitz_bound()
    for _ in range(200):
        inst = int(rng.integers(1, 97))
        x1, x2 = rng.normal(0, 150, 2)
        f = m.decision_function(gate.gate_features([x1, x2], [inst, inst]))
        assert abs(f[0] - f[1]) <= L * abs(x1 - x2) + 1e-9


def test_classify_rules():
    samples = [GateSample(c, i, GOOD if c > 0 else BAD) for c in (-300.0, -200.0, 200.0, 300.0) for i in range(30, 60, 5)]
    m = train_gate(samples, C=10, gamma=1)
    assert classify(m, 280.0, 45) == GOOD
    assert classify(m, -280.0, 45) == BAD
    with pytest.raises(ValueError):
        classify(m, 0.0, 0)
    zero = GateModel(np.zeros((1, 4)), np.array([0.0]), 0.0, 1.0, 1.0, np.zeros(4), np.ones(4))
    assert classify(zero, 1.0, 10) == BAD  # exact zero decision is Bad


def test_standardization_invariance():
    X, y = two_clusters(40, seed=5)
    X = X + np.random.default_rng(1).normal(0, 2.5, X.shape)
    a = train_gate_arrays(X, y, C=10, gamma=1)
    b = train_gate_arrays(X + np.array([1000.0, -42.0]), y, C=10, gamma=1)
    probe = np.random.default_rng(2).normal(0, 6, (200, 2))
    assert np.array_equal(a.predict_good(probe), b.predict_good(probe + np.array([1000.0, -42.0])))


def test_nearest_cluster_agreement():
    X, y = two_clusters()
    m = train_gate_arrays(X, y, C=10, gamma=1)
    probe = np.random.default_rng(3).uniform(-7, 7, (300, 2))
    nearest = np.linalg.norm(probe - 5, axis=1) < np.linalg.norm(probe + 5, axis=1)
    far = np.abs(probe.sum(axis=1)) > 4  # skip the band around the bisector
    assert np.array_equal(m.predict_good(probe)[far], nearest[far])


def test_errors():
    with pytest.raises(ValueError, match="degenerate labels"):
        train_gate_arrays(np.zeros((5, 2)), np.ones(5))
    with pytest.raises(ValueError):
        GateSample(1.0, 97)
    X, y = two_clusters()
    with pytest.raises(ConvergenceError):
        smo(rbf_kernel(X, X, 1.0), y, 10.0, tol=1e-12, max_iter=1)


def test_text_round_trip(tmp_path):
    X, y = two_clusters()
    m = train_gate_arrays(X, y)
    m.save(tmp_path / "g.model")
    back = GateModel.load(tmp_path / "g.model")
    probe = np.random.default_rng(0).normal(0, 5, (50, 2))
    assert np.array_equal(back.decision_function(probe), m.decision_function(probe))
    assert np.array_equal(back.sv_index, m.sv_index)


def _day_matrices(service_err, ari_err, days=3):
    """Day-start forecasts with prescribed absolute errors against a known truth."""
    n = days * 96
    truth = 100 + 10 * np.arange(n, dtype=float) % 7
    grid = make_series(truth)
    origins = np.arange(96, n - 95, 96)
    tgt = origins[:, None] + np.arange(96)
    svc = ForecastMatrix.on_grid(grid, origins, truth[tgt] + service_err(tgt))
    ari = ForecastMatrix.on_grid(grid, origins, truth[tgt] + ari_err(tgt))
    return svc, ari, grid


def test_labels_strict_dominance_and_ties():
    svc, ari, grid = _day_matrices(lambda t: np.zeros(t.shape), lambda t: np.full(t.shape, 5.0))
    assert {s.label for s in label_training_data(svc, ari, grid)} == {GOOD}
    svc, ari, grid = _day_matrices(lambda t: np.full(t.shape, 3.0), lambda t: np.full(t.shape, -3.0))
    assert {s.label for s in label_training_data(svc, ari, grid)} == {BAD}


def test_labels_alternate_with_exactness():
    even = lambda t: np.where(t % 2 == 0, 0.0, 4.0)
    odd = lambda t: np.where(t % 2 == 1, 0.0, 4.0)
    svc, ari, grid = _day_matrices(even, odd)
    samples = label_training_data(svc, ari, grid)
    assert len(samples) == 2 * 96
    for s in samples:
        assert s.label == (GOOD if (s.instant - 1) % 2 == 0 else BAD)


def test_labels_coverage_mismatch():
    svc, ari, grid = _day_matrices(lambda t: 0 * t, lambda t: 0 * t)
    with pytest.raises(ValueError, match="coverage mismatch"):
        label_training_data(svc, ari.select([0]), grid)


def test_grid_search_returns_grid_point():
    X, y = two_clusters(60, seed=9)
    X = X + np.random.default_rng(0).normal(0, 3, X.shape)
    C, g, acc = gate.select_hyperparameters(X, y, Cs=(0.1, 10.0), gammas=(0.1, 1.0))
    assert C in (0.1, 10.0) and g in (0.1, 1.0) and 0.5 < acc <= 1.0
