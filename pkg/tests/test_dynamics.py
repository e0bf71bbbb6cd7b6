import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2fm.dynamics import (MAX_ROOT, ARModel, DynamicsError, VARModel, fit_ar, fit_var,
                           idio_filter, unconditional_variance)


def simulate_ar(phi, T, rng, q=1.0):
    phi = np.atleast_1d(phi)
    x = np.zeros(T + 200)
    e = rng.standard_normal(T + 200) * np.sqrt(q)
    for t in range(len(phi), T + 200):
        x[t] = phi @ x[t - len(phi):t][::-1] + e[t]
    return x[200:]


def simulate_var(B, T, rng):
    p, r, _ = B.shape
    f = np.zeros((T + 200, r))
    for t in range(p, T + 200):
        f[t] = sum(B[k] @ f[t - k - 1] for k in range(p)) + rng.standard_normal(r)
    return f[200:]


# ---- fit_ar ---------------------------------------------------------------------------

def test_fit_ar_recovers_ar1():
    x = simulate_ar(0.7, 500, np.random.default_rng(0))
    m = fit_ar(x)
    assert 0.6 <= m.coefs[0, 0] <= 0.8
    assert m.q[0] == pytest.approx(1.0, abs=0.15)


def test_fit_ar_white_noise():
    x = np.random.default_rng(1).standard_normal(1000)
    assert abs(fit_ar(x).coefs[0, 0]) < 2 / np.sqrt(1000)


def test_fit_ar_degenerate_zero_series():
    m = fit_ar(np.zeros(50))
    assert m.coefs[0, 0] == 0 and m.q[0] == 0


def test_fit_ar_matches_scalar_ols_and_skips_missing():
    rng = np.random.default_rng(2)
    x = simulate_ar(0.5, 120, rng)
    x[[10, 40, 41, 90]] = np.nan
    Y, X = x[1:], x[:-1]
    ok = ~np.isnan(Y) & ~np.isnan(X)
    phi = np.sum(Y[ok] * X[ok]) / np.sum(X[ok] ** 2)
    m = fit_ar(x)
    assert m.coefs[0, 0] == pytest.approx(phi, rel=1e-12)
    assert m.q[0] == pytest.approx(np.mean((Y[ok] - phi * X[ok]) ** 2), rel=1e-12)


def test_fit_ar_insufficient_data():
    with pytest.raises(DynamicsError):
        fit_ar(np.array([1.0, 2.0, np.nan, 3.0, 4.0]))


def test_fit_ar_clips_explosive_coefficient():
    x = 1.05 ** np.arange(60)
    m = fit_ar(x)
    assert m.coefs[0, 0] == MAX_ROOT


def test_fit_ar_higher_order_is_stationary():
    x = np.cumsum(np.cumsum(np.random.default_rng(3).standard_normal(300)))
    m = fit_ar(x, d=2)
    comp = np.array([m.coefs[0], [1.0, 0.0]])
    assert np.max(np.abs(np.linalg.eigvals(comp))) <= MAX_ROOT + 1e-12


def test_fit_ar_matrix_input_is_columnwise():
    rng = np.random.default_rng(4)
    X = np.column_stack([simulate_ar(0.3, 200, rng), simulate_ar(-0.4, 200, rng)])
    both = fit_ar(X)
    for j in range(2):
        single = fit_ar(X[:, j])
        assert both.coefs[j, 0] == single.coefs[0, 0]


def test_fit_ar_interval_coverage():
    hits = 0
    for seed in range(50):
        x = simulate_ar(0.6, 400, np.random.default_rng(100 + seed))
        m = fit_ar(x)
        se = np.sqrt(m.q[0] / np.sum(x[:-1] ** 2))
        hits += abs(m.coefs[0, 0] - 0.6) <= 1.96 * se
    assert hits / 50 >= 0.9


# ---- idio_filter -------------------------------------------------------------------------

@settings(max_examples=30)
@given(st.integers(1, 20), st.integers(1, 5), st.integers(0, 1000))
def test_idio_filter_zero_coefficients_is_identity(T, n, seed):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((T, n))
    y[rng.random((T, n)) < 0.2] = np.nan
    out = idio_filter(y, ARModel.zeros(n), rng.standard_normal((T, n)))
    np.testing.assert_array_equal(out, y)


def test_idio_filter_single_lag():
    y = np.array([[3.0], [5.0]])
    eps = np.array([[2.0], [0.0]])
    ar = ARModel(np.array([[0.5]]), np.array([1.0]))
    np.testing.assert_allclose(idio_filter(y, ar, eps), [[3.0], [4.0]])


def test_idio_filter_first_iteration_identity_and_missing_kept():
    y = np.array([[1.0, np.nan], [2.0, 3.0]])
    ar = ARModel(np.array([[0.5], [0.9]]), np.ones(2))
    out = idio_filter(y, ar, np.zeros_like(y))
    np.testing.assert_array_equal(out, y)


def test_idio_filter_quarterly_spacing():
    y = np.zeros((7, 1))
    eps = np.arange(7.0)[:, None]
    ar = ARModel(np.array([[0.5]]), np.ones(1))
    out = idio_filter(y, ar, eps, spacing=3)
    np.testing.assert_allclose(out[:, 0], [0, 0, 0, 0, -0.5, -1.0, -1.5])


# ---- unconditional_variance -----------------------------------------------------------------

def test_unconditional_variance_examples():
    ar = ARModel(np.array([[0.0], [0.5], [0.99]]), np.array([1.0, 0.75, 1.0]))
    np.testing.assert_allclose(unconditional_variance(ar), [1.0, 1.0, 1 / (1 - 0.99 ** 2)])
    assert unconditional_variance(ar)[2] == pytest.approx(50.25, abs=0.01)


def test_unconditional_variance_yule_walker_ar2():
    phi1, phi2, q = 0.5, 0.2, 1.0
    gamma0 = (1 - phi2) * q / ((1 + phi2) * ((1 - phi2) ** 2 - phi1 ** 2))
    ar = ARModel(np.array([[phi1, phi2]]), np.array([q]))
    assert unconditional_variance(ar)[0] == pytest.approx(gamma0, rel=1e-10)


def test_unconditional_variance_rejects_unit_root():
    with pytest.raises(DynamicsError):
        unconditional_variance(ARModel(np.array([[1.0]]), np.array([1.0])))


@given(st.floats(-0.98, 0.98), st.floats(-0.5, 0.5), st.floats(0.0, 10.0))
def test_unconditional_variance_at_least_innovation_variance(a, b, q):
    phi = np.array([[a, b]])
    comp = np.array([[a, b], [1.0, 0.0]])
    if np.max(np.abs(np.linalg.eigvals(comp))) >= 0.999:
        return
    assert unconditional_variance(ARModel(phi, np.array([q])))[0] >= q - 1e-12


# ---- fit_var ----------------------------------------------------------------------------------

def test_fit_var_recovers_coefficients():
    B = np.zeros((2, 2, 2))
    B[0] = [[0.5, 0.1], [0.0, 0.4]]
    B[1] = [[0.2, 0.0], [0.1, 0.1]]
    f = simulate_var(B, 1000, np.random.default_rng(0))
    m = fit_var(f, 2)
    assert np.abs(m.coefs - B).max() < 0.1
    np.testing.assert_allclose(m.cov, np.eye(2), atol=0.15)
    assert m.spectral_radius() < 1


def test_fit_var_iid_factors():
    T = 2000
    f = np.random.default_rng(1).standard_normal((T, 3))
    assert np.abs(fit_var(f, 2).coefs).max() < 3 / np.sqrt(T)


def test_fit_var_scalar_equals_unclipped_ols():
    x = simulate_ar([0.5, 0.2], 300, np.random.default_rng(2))
    m = fit_var(x[:, None], 2)
    X = np.column_stack([x[1:-1], x[:-2]])
    coef, *_ = np.linalg.lstsq(X, x[2:], rcond=None)
    np.testing.assert_allclose(m.coefs[:, 0, 0], coef, rtol=1e-10)


def test_fit_var_residuals_orthogonal_to_regressors():
    f = simulate_var(np.array([[[0.5, 0.1], [0.2, 0.3]]]), 400, np.random.default_rng(3))
    m = fit_var(f, 2)
    Y = f[2:]
    X = np.hstack([f[1:-1], f[:-2]])
    resid = Y - X @ np.concatenate(list(m.coefs), axis=1).T
    scale = np.abs(X).max() * np.abs(Y).max() * len(Y)
    assert np.abs(X.T @ resid).max() / scale < 1e-8
    assert np.all(np.linalg.eigvalsh(m.cov) >= 0)


def test_fit_var_errors_and_warnings():
    with pytest.raises(DynamicsError):
        fit_var(np.zeros((12, 2)), 2)
    with pytest.raises(DynamicsError, match="rank"):
        fit_var(np.ones((100, 2)), 2)
    walk = np.cumsum(np.random.default_rng(4).standard_normal((300, 1)), axis=0) * 1.0
    walk = walk * 1.02 ** np.arange(300)[:, None]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit_var(walk, 1)
    assert any("not stationary" in str(w.message) for w in caught)


def test_model_serialisation_round_trip():
    ar = ARModel(np.array([[0.1], [0.2]]), np.array([1.0, 2.0]))
    var = VARModel(np.arange(8.0).reshape(2, 2, 2) / 10, np.eye(2))
    ar2 = ARModel.from_dict(ar.to_dict())
    var2 = VARModel.from_dict(var.to_dict())
    assert ar2.coefs.tobytes() == ar.coefs.tobytes() and ar2.q.tobytes() == ar.q.tobytes()
    assert var2.coefs.tobytes() == var.coefs.tobytes()
