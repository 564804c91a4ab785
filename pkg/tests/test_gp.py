from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from wavefront import gp
from wavefront.gp import KernelParams


# -- kernel -------------------------------------------------------------------------

def test_kernel_same_point():
    k = KernelParams(3.0, (1.0, 2.0, 0.5))
    assert gp.gauss_kernel(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0]), k) == 9.0


def test_kernel_far_apart():
    k = KernelParams(1.0, (1.0, 1.0, 1.0))
    assert gp.gauss_kernel(np.zeros(3), np.array([20.0, 0, 0]), k) < 1e-12


def test_kernel_unit_offset():
    k = KernelParams(2.0, (1.0, 1.0, 1.0))
    v = gp.gauss_kernel(np.zeros(3), np.array([1.0, 0, 0]), k)
    assert v == pytest.approx(4 * math.exp(-1), rel=1e-14)
    assert v == pytest.approx(1.4715, abs=1e-4)


def test_kernel_params_validation():
    with pytest.raises(ValueError):
        KernelParams(0.0, (1.0,))
    with pytest.raises(ValueError):
        KernelParams(1.0, (1.0, -1.0))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 30), st.integers(1, 3), st.integers(0, 2**31))
def test_gram_positive_definite(n, dim, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 10, (n, dim))
    k = KernelParams(rng.uniform(0.1, 100), tuple(rng.uniform(0.1, 5, dim)))
    K = gp.gauss_kernel(X, X, k)
    np.testing.assert_allclose(K, K.T)
    K[np.diag_indices_from(K)] += gp.NUGGET_REL * k.amplitude**2
    gp.cholesky(K)


def test_cholesky_error_reports_eigenvalue():
    with pytest.raises(gp.FactorizationError, match="smallest eigenvalue"):
        gp.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


# -- OLS ----------------------------------------------------------------------------------

def test_ols_exact_span():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 4))
    beta = np.array([1.0, -2.0, 0.5, 3.0])
    np.testing.assert_allclose(gp.ols(X, X @ beta), beta, atol=1e-12)


def test_ols_intercept_only():
    y = np.array([1.0, 4.0, 7.0, 2.0])
    assert gp.ols(np.ones((4, 1)), y)[0] == pytest.approx(y.mean())


def test_ols_inverse_sqrt_basis():
    nu = np.array([1.0, 4.0, 9.0])
    X = np.column_stack([np.ones(3), 1 / np.sqrt(nu)])
    np.testing.assert_allclose(gp.ols(X, 2 + 3 / np.sqrt(nu)), [2.0, 3.0], atol=1e-12)


def test_ols_rank_deficient():
    X = np.column_stack([np.ones(5), np.arange(5.0), 2 * np.arange(5.0)])
    with pytest.raises(np.linalg.LinAlgError, match="collinear"):
        gp.ols(X, np.arange(5.0))
    with pytest.raises(ValueError):
        gp.ols(np.ones((1, 2)), np.ones(1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_ols_matches_lstsq(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(15, 3))
    y = rng.normal(size=15)
    np.testing.assert_allclose(gp.ols(X, y), np.linalg.lstsq(X, y, rcond=None)[0], rtol=1e-8, atol=1e-10)


# -- conditioning -------------------------------------------------------------------------------

def test_condition_interpolates():
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 5, (10, 2))
    y = np.sin(X[:, 0]) + X[:, 1]
    k = KernelParams(2.0, (1.5, 1.5))
    c = gp.Conditioning(X, y, k)
    mu, V = gp.condition(c, X)
    np.testing.assert_allclose(mu, y, rtol=1e-6, atol=1e-6 * np.abs(y).max())
    # exact value a^2 eps / (a^2 + eps) < eps; allow the cancellation error of a^2 - (...)
    assert np.all(np.diag(V) < 1e-8 * k.amplitude**2 + 1e-14 * k.amplitude**2)


def test_condition_reverts_to_prior():
    X = np.array([[0.0, 0.0], [1.0, 1.0]])
    k = KernelParams(3.0, (1.0, 1.0))
    c = gp.Conditioning(X, np.array([5.0, -2.0]), k, mean_fn=lambda q: np.full(len(q), 7.0),
                        mean=np.full(2, 7.0))
    mu, V = c.condition(np.array([[21.0, 21.0]]))
    assert mu[0] == pytest.approx(7.0, abs=1e-10)
    assert V[0, 0] == pytest.approx(9.0, rel=1e-10)


def test_condition_one_point():
    c = gp.Conditioning(np.array([[0.0]]), np.array([1.0]), KernelParams(1.0, (1.0,)))
    mu, V = c.condition(np.array([[1.0]]))
    assert mu[0] == pytest.approx(math.exp(-1), rel=1e-7)
    assert V[0, 0] == pytest.approx(1 - math.exp(-2), rel=1e-7)


def test_condition_marginal_matches_full():
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 3, (8, 3))
    c = gp.Conditioning(X, rng.normal(size=8), KernelParams(1.3, (1.0, 2.0, 0.7)))
    Q = rng.uniform(0, 3, (5, 3))
    mu1, V = c.condition(Q)
    mu2, v = c.condition(Q, full_cov=False)
    np.testing.assert_allclose(mu1, mu2)
    np.testing.assert_allclose(np.diag(V), v, atol=1e-12)


def _brute(X, y, m, Q, mq, k):
    K = gp.gauss_kernel(X, X, k) + gp.NUGGET_REL * k.amplitude**2 * np.eye(len(X))
    Ki = np.linalg.inv(K)
    Ks = gp.gauss_kernel(Q, X, k)
    mu = mq + Ks @ Ki @ (y - m)
    V = gp.gauss_kernel(Q, Q, k) - Ks @ Ki @ Ks.T
    r = y - m
    ll = -0.5 * r @ Ki @ r - 0.5 * np.linalg.slogdet(K)[1] - 0.5 * len(y) * math.log(2 * math.pi)
    return mu, V, ll


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**31))
def test_condition_brute_force(n, nq, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 4, (n, 3))
    Q = rng.uniform(0, 4, (nq, 3))
    k = KernelParams(rng.uniform(0.5, 50), tuple(rng.uniform(0.8, 3, 3)))
    beta = rng.normal(size=3)
    y = X @ beta + rng.normal(scale=k.amplitude, size=n)
    c = gp.Conditioning(X, y, k, mean=X @ beta, mean_fn=lambda q: q @ beta, noise=0.0)
    mu, V = c.condition(Q)
    mu_b, V_b, ll_b = _brute(X, y, X @ beta, Q, Q @ beta, k)
    scale = k.amplitude**2
    np.testing.assert_allclose(mu, mu_b, rtol=1e-8, atol=1e-8 * k.amplitude)
    np.testing.assert_allclose(V, V_b, rtol=1e-8, atol=1e-8 * scale)
    assert c.loglik() == pytest.approx(ll_b, rel=1e-8)


# -- log likelihood -----------------------------------------------------------------------------

def test_loglik_single_point():
    c = gp.Conditioning(np.array([[0.0]]), np.array([0.0]), KernelParams(1.0, (1.0,)))
    assert gp.loglik_gp(c) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-7)
    assert gp.loglik_gp(c) == pytest.approx(-0.9189, abs=1e-4)


def test_loglik_independent_points():
    c = gp.Conditioning(np.array([[0.0], [100.0]]), np.array([0.5, -1.2]), KernelParams(1.0, (1.0,)))
    expected = stats.norm.logpdf(0.5) + stats.norm.logpdf(-1.2)
    assert c.loglik() == pytest.approx(expected, abs=1e-7)


def test_loglik_correlated_pair():
    c = gp.Conditioning(np.array([[0.0], [1.0]]), np.array([1.0, 1.0]), KernelParams(1.0, (1.0,)))
    rho = math.exp(-1)
    # closed form: -log 2pi - log(1 - rho^2)/2 - 1/(1 + rho)
    closed = -math.log(2 * math.pi) - 0.5 * math.log(1 - rho**2) - 1 / (1 + rho)
    assert c.loglik() == pytest.approx(closed, abs=1e-7)
    assert c.loglik() == pytest.approx(
        stats.multivariate_normal([0, 0], [[1, rho], [rho, 1]]).logpdf([1, 1]), abs=1e-7)


def test_loglik_amplitude_peak():
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 10, (40, 1))
    k_true = KernelParams(4.0, (1.0,))
    K = gp.gauss_kernel(X, X, k_true) + 1e-8 * 16 * np.eye(40)
    y = np.linalg.cholesky(K) @ rng.normal(size=40)
    amps = np.linspace(1.0, 12.0, 221)
    ll = np.array([gp.Conditioning(X, y, KernelParams(a, (1.0,))).loglik() for a in amps])
    best = amps[np.argmax(ll)]
    # with r fixed the optimum is a^2 = y' R^-1 y / n
    R = gp.gauss_kernel(X, X, KernelParams(1.0, (1.0,))) + 1e-8 * np.eye(40)
    a_hat = math.sqrt(y @ np.linalg.solve(R, y) / 40)
    assert best == pytest.approx(a_hat, abs=0.06)
    slope = np.gradient(ll, amps)
    assert np.all(slope[amps < a_hat - 0.1] > 0) and np.all(slope[amps > a_hat + 0.1] < 0)


def test_mvn_logpdf_chol():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(5, 5))
    S = A @ A.T + np.eye(5)
    r = rng.normal(size=5)
    assert gp.mvn_logpdf_chol(r, np.linalg.cholesky(S)) == pytest.approx(
        stats.multivariate_normal(np.zeros(5), S).logpdf(r), rel=1e-10)
