from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import RECOVERY_BOX, ExactBank, small_problem
from wavefront import infer
from wavefront import synthetic as sy
from wavefront.data import SiteData
from wavefront.emulator import EmulatorBank

TRUTH = infer.ModelParams(20.0, 0.3, 0.2, 100.0, 30.0, 10.0)


def batch_se(x: np.ndarray, n_batches: int = 20) -> float:
    b = np.array_split(np.asarray(x), n_batches)
    return float(np.std([v.mean() for v in b], ddof=1) / math.sqrt(n_batches))


def dense_loglik(t, mu, S) -> float:
    r = t - mu
    return float(-0.5 * r @ np.linalg.inv(S) @ r - 0.5 * math.log(np.linalg.det(S)) - 0.5 * len(t) * math.log(2 * math.pi))


def one_site_lik(k: int = 0, sigma_i: float | None = None):
    _, data, ems = small_problem(5)
    sub = data.subset([k])
    if sigma_i is not None:
        sub = SiteData(sub.site_ids, sub.coords, sub.t, np.array([sigma_i]))
    return infer.EmulatedLikelihood(sub, EmulatorBank([ems[k]]))


# ---------------------------------------------------------------- priors

def test_prior_nu_mode_near_twelve():
    assert infer.Priors().nu.mode == pytest.approx(math.exp(2.5))
    assert infer.Priors().nu.mode == pytest.approx(12.18, abs=0.01)


def test_prior_sigma2_mean_gives_sigma_near_500():
    ig = infer.Priors().sigma2
    assert ig.mean == pytest.approx(2.5e5)
    assert math.sqrt(ig.mean) == pytest.approx(500.0)
    assert ig.mean == pytest.approx(stats.invgamma(5.0, scale=1e6).mean())


def reference_log_prior(x) -> float:
    pr = infer.Priors()
    tot = 0.0
    for k, d in ((0, pr.nu), (1, pr.v_coast), (2, pr.v_river), (4, pr.a_zeta), (5, pr.r_zeta)):
        tot += stats.lognorm(s=math.sqrt(d.var), scale=math.exp(d.mu)).logpdf(x[k])
    # density of sigma when sigma^2 is inverse gamma
    tot += stats.invgamma(pr.sigma2.alpha, scale=pr.sigma2.beta).logpdf(x[3] ** 2) + math.log(2 * x[3])
    return tot


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1e-2, 1e3), min_size=6, max_size=6))
def test_log_prior_matches_scipy_marginals(x):
    assert infer.log_prior(x) == pytest.approx(reference_log_prior(x), rel=1e-10, abs=1e-9)
    assert infer.log_prior(x, log_scale=True) == pytest.approx(
        reference_log_prior(x) + sum(math.log(v) for v in x), rel=1e-10, abs=1e-9)


def test_log_prior_nonpositive_is_minus_inf():
    assert infer.log_prior([20, 0.3, 0.2, 0.0, 30, 10]) == -np.inf
    assert infer.log_prior([-1, 0.3, 0.2, 100, 30, 10]) == -np.inf


def test_marginal_logpdfs_sum_to_log_prior():
    x = TRUTH.as_array()
    assert infer.Priors().marginal_logpdfs(x).sum() == pytest.approx(infer.log_prior(x), rel=1e-12)


def test_model_params_reject_nonpositive():
    with pytest.raises(ValueError):
        infer.ModelParams(20, 0.3, 0.2, 100, 0.0, 10)


# ---------------------------------------------------------------- likelihood

def test_single_site_reduces_to_univariate_normal():
    lik = one_site_lik(sigma_i=0.0)
    mu = np.array([1234.0])
    got = lik.loglik_from_pred(mu, np.zeros(1), 150.0, 1e-9, 10.0)
    assert got == pytest.approx(stats.norm(1234.0, 150.0).logpdf(lik.t[0]), rel=1e-12)


def test_zero_amplitude_factorizes():
    _, data, ems = small_problem(6)
    lik = infer.EmulatedLikelihood.from_emulators(data, ems)
    mu, var = lik.predict(TRUTH.theta)
    got = lik.loglik_from_pred(mu, var, 100.0, 0.0, 10.0)
    sd = np.sqrt(var + data.sigma ** 2 + 100.0 ** 2)
    assert got == pytest.approx(stats.norm(mu, sd).logpdf(data.t).sum(), rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loglik_matches_dense_construction(seed):
    rng = np.random.default_rng(seed)
    _, data, ems = small_problem(3, seed=seed)
    p = infer.ModelParams(*rng.uniform([10, 0.1, 0.1, 50, 10, 3], [40, 0.9, 0.7, 300, 200, 30]))
    mu, var = EmulatorBank(ems).predict(p.theta)
    d2 = np.array([[np.sum((a - b) ** 2) for b in data.coords] for a in data.coords])
    S = p.a_zeta ** 2 * np.exp(-d2 / p.r_zeta ** 2) + np.diag(var + data.sigma ** 2 + p.sigma ** 2)
    assert infer.log_lik_emulated(p, data, ems) == pytest.approx(dense_loglik(data.t, mu, S), rel=1e-10)


def test_loglik_permutation_invariant():
    _, data, ems = small_problem(8, seed=3)
    perm = np.random.default_rng(0).permutation(8)
    a = infer.log_lik_emulated(TRUTH, data, ems)
    b = infer.log_lik_emulated(TRUTH, data.subset(perm), [ems[k] for k in perm])
    assert abs(a - b) <= 1e-10 * abs(a)


def test_batched_loglik_matches_single():
    _, data, ems = small_problem(6, n_draws=5)
    lik = infer.EmulatedLikelihood.from_emulators(data, ems, uncertain=True)
    preds = [lik.predict(TRUTH.theta, j) for j in range(lik.n_banks)]
    batch = lik.loglik_batch([m for m, _ in preds], [v for _, v in preds], 100.0, 30.0, 10.0)
    single = [lik.loglik(TRUTH, j) for j in range(lik.n_banks)]
    np.testing.assert_allclose(batch, single, rtol=1e-10)
    mix = lik.loglik_mixture(TRUTH)
    assert mix == pytest.approx(np.log(np.mean(np.exp(np.array(single) - max(single)))) + max(single), rel=1e-12)


def test_site_order_mismatch_rejected():
    _, data, ems = small_problem(4)
    with pytest.raises(ValueError):
        infer.EmulatedLikelihood(data, EmulatorBank(ems[::-1]))


# ---------------------------------------------------------------- MCMC

PRIOR_CFG = infer.MHConfig(n_iter=40_000, burn_in=2_000, thin=2, pilot_iter=4_000, use_likelihood=False)


@pytest.fixture(scope="module")
def prior_chain():
    return infer.mh_sample(None, None, config=PRIOR_CFG, seed=5)


def test_prior_only_chain_reproduces_priors(prior_chain):
    pr = infer.Priors()
    logs = np.log(prior_chain.samples)
    for k, d in ((0, pr.nu), (1, pr.v_coast), (2, pr.v_river), (4, pr.a_zeta), (5, pr.r_zeta)):
        x = logs[:, k]
        assert abs(x.mean() - d.mu) < 3 * batch_se(x), k
    # sigma^2 has an inverse-gamma prior: compare E[log sigma^2] = log(beta) - digamma(alpha)
    from scipy.special import digamma
    x = 2 * logs[:, 3]
    assert abs(x.mean() - (math.log(pr.sigma2.beta) - digamma(pr.sigma2.alpha))) < 3 * batch_se(x)


def test_thinning_does_not_shift_means(prior_chain):
    for k in range(6):
        x = np.log(prior_chain.samples[:, k])
        assert abs(x[::2].mean() - x.mean()) < 2 * batch_se(x)


def test_prior_only_acceptance_in_range(prior_chain):
    for b, rate in prior_chain.acceptance.items():
        assert 0.1 <= rate <= 0.6, b


def test_tight_normal_target_moments():
    # likelihood off and tight log-normal priors: the target is a known normal in log parameters
    pr = infer.Priors(nu=infer.LogNormal(2.0, 0.04), v_coast=infer.LogNormal(-1.0, 0.01))
    ch = infer.mh_sample(None, None, priors=pr, config=PRIOR_CFG, seed=9)
    for k, d in ((0, pr.nu), (1, pr.v_coast)):
        x = np.log(ch.samples[:, k])
        assert abs(x.mean() - d.mu) < 3 * batch_se(x)
        assert x.var() == pytest.approx(d.var, rel=0.1)


SHORT = infer.MHConfig(n_iter=6_000, burn_in=1_000, thin=5, pilot_iter=2_000)


@pytest.fixture(scope="module")
def problem():
    return small_problem(10, seed=4, n_draws=4)


def test_chain_deterministic(problem):
    _, data, ems = problem
    a = infer.mh_sample(data, ems, config=SHORT, seed=3)
    b = infer.mh_sample(data, ems, config=SHORT, seed=3)
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(a.log_post, b.log_post)
    c = infer.mh_sample(data, ems, config=SHORT, seed=4)
    assert not np.array_equal(a.samples, c.samples)


def test_log_post_recomputes(problem):
    _, data, ems = problem
    ch = infer.mh_sample(data, ems, config=SHORT, seed=3)
    assert np.all(np.isfinite(ch.log_post))
    for k in range(0, len(ch), 97):
        x = ch.samples[k]
        ref = infer.log_prior(x) + infer.log_lik_emulated(infer.ModelParams.from_array(x), data, ems)
        assert ch.log_post[k] == pytest.approx(ref, rel=1e-8, abs=1e-8)


def test_joint_with_single_draw_equals_fixed():
    _, data, ems = small_problem(10, seed=4, n_draws=1)
    a = infer.mh_sample(data, ems, config=SHORT, seed=11)
    b = infer.mh_sample_hyper_uncertain(data, ems, config=SHORT, seed=11)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert b.mode == "joint" and np.all(b.hyper_index == 0)


def test_joint_chain_visits_all_draw_indices(problem):
    _, data, ems = problem
    ch = infer.mh_sample_hyper_uncertain(data, ems, config=SHORT, seed=2)
    assert set(np.unique(ch.hyper_index)) == {0, 1, 2, 3}


def test_joint_and_mixture_agree(problem):
    _, data, ems = problem
    cfg = infer.MHConfig(n_iter=110_000, burn_in=10_000, thin=10, pilot_iter=5_000)
    joint = infer.mh_sample_hyper_uncertain(data, ems, config=cfg, seed=21)
    mix = infer.mh_sample_hyper_uncertain(data, ems, config=cfg, seed=22, mixture=True)
    assert len(joint) == len(mix) == 10_000
    for k, name in enumerate(infer.PARAM_NAMES):
        ks = stats.ks_2samp(joint.samples[:, k], mix.samples[:, k]).statistic
        assert ks < 0.05, (name, ks)


def test_proposal_covariance_reused(problem):
    _, data, ems = problem
    a = infer.mh_sample(data, ems, config=SHORT, seed=3)
    cov = {b: np.array(c) for b, c in a.proposal_cov.items()}
    b = infer.mh_sample(data, ems, config=SHORT, seed=3, proposal_cov=cov, init=a.samples[-1])
    assert len(b) == len(a)
    for rate in b.acceptance.values():
        assert 0.1 <= rate <= 0.6


# ---------------------------------------------------------------- spatial process and predictive

def dense_conditionals(lik, x, j=0):
    """Joint normal of (zeta, t) conditioned on t, using explicit inverses."""
    mu, var = lik.predict(x[:3], j)
    n = lik.n
    K = x[4] ** 2 * np.exp(-lik.d2 / x[5] ** 2)
    S = np.diag(var + lik.s2 + x[3] ** 2)
    joint = np.block([[K, K], [K, K + S]])
    A, B, C = joint[:n, :n], joint[:n, n:], joint[n:, n:]
    Ci = np.linalg.inv(C)
    m = B @ Ci @ (lik.t - mu)
    V = A - B @ Ci @ B.T
    return m, V, mu + m, S + V


@pytest.mark.parametrize("n", [3, 5])
def test_conditional_moments_match_dense(n):
    _, data, ems = small_problem(n, seed=n)
    lik = infer.EmulatedLikelihood.from_emulators(data, ems)
    x = np.array([25.0, 0.4, 0.3, 80.0, 120.0, 8.0])
    got = infer.conditional_moments(x, lik)
    ref = dense_conditionals(lik, x)
    for g, r in zip(got, ref):
        np.testing.assert_allclose(g, r, rtol=1e-8, atol=1e-8 * np.abs(r).max())


def fake_chain(rows, mode="fixed"):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    k = len(rows)
    return infer.PosteriorChain(rows, np.zeros(k), np.arange(k), np.zeros(k, dtype=int), {}, {}, mode=mode)


def test_zeta_collapses_with_zero_amplitude():
    _, data, ems = small_problem(6)
    ch = fake_chain([[20, 0.3, 0.2, 100, 1e-8, 10]] * 3)
    z = infer.posterior_zeta(ch, data, ems, seed=0)
    assert np.abs(z.means).max() < 1e-10 and np.abs(z.draws).max() < 1e-6
    assert z.variances.max() < 1e-12


def test_zeta_single_site_absorbs_residual():
    lik = one_site_lik()
    x = np.array([20, 0.3, 0.2, 10.0, 1e5, 10.0])
    mu, _ = lik.predict(x[:3])
    m, V, _, _ = infer.conditional_moments(x, lik)
    assert m[0] == pytest.approx(lik.t[0] - mu[0], rel=1e-6)


@pytest.mark.parametrize("seed", [7, 10])
def test_zeta_anomaly_detected(seed):
    # low observation noise and an exact emulator, so a +500 year shift at one site stands out
    rng = np.random.default_rng(seed)
    arr = sy.random_sites(40, rng)
    truth = infer.ModelParams(20.0, 0.3, 0.2, 30.0, 30.0, 10.0)
    data = sy.synthetic_dataset(arr, truth, rng, sigma_range=(10.0, 30.0))
    t = data.t.copy()
    t[5] += 500.0
    bumped = SiteData(data.site_ids, data.coords, t, data.sigma)
    lik = infer.EmulatedLikelihood(bumped, [ExactBank(arr)])
    cfg = infer.MHConfig(n_iter=20_000, burn_in=4_000, thin=20, pilot_iter=3_000, theta_bounds=RECOVERY_BOX)
    priors = infer.Priors(sigma2=infer.InverseGamma(5.0, 3600.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ch = infer.mh_sample(bumped, lik, priors=priors, config=cfg, seed=3)
    m, _ = infer.posterior_zeta(ch, bumped, lik, seed=1).summary()
    others = np.delete(m, 5)
    assert m[5] > 0 and m[5] > np.abs(others).max()


def test_theta_bounds_respected(problem):
    _, data, ems = problem
    cfg = infer.MHConfig(n_iter=4_000, burn_in=500, thin=5, pilot_iter=1_000, theta_bounds=RECOVERY_BOX)
    ch = infer.mh_sample(data, ems, config=cfg, seed=1)
    lo, hi = np.array(RECOVERY_BOX).T
    assert np.all(ch.samples[:, :3] >= lo) and np.all(ch.samples[:, :3] <= hi)


def test_predictive_collapses_to_mean():
    arr, data, _ = small_problem(4)
    data0 = SiteData(data.site_ids, data.coords, data.t, np.zeros(4))
    lik = infer.EmulatedLikelihood(data0, [ExactBank(arr)])
    x = [20, 0.3, 0.2, 1e-3, 1e-9, 10.0]  # zeta amplitude vanishing faster than sigma
    pred = infer.predictive(fake_chain([x] * 3), data0, lik, seed=0)
    mu = arr(np.array(x[:3]))
    np.testing.assert_allclose(pred.means, np.tile(mu, (3, 1)), atol=1e-6)
    assert pred.variances.max() < 1e-5
    np.testing.assert_allclose(pred.draws, np.tile(mu, (3, 1)), atol=1e-2)


def test_predictive_variance_matches_dense():
    _, data, ems = small_problem(3, seed=2)
    rows = [[22, 0.35, 0.25, 120, 40, 12], [18, 0.2, 0.1, 90, 25, 6]]
    pred = infer.predictive(fake_chain(rows), data, ems, seed=0)
    lik = infer.EmulatedLikelihood.from_emulators(data, ems)
    for r, x in enumerate(rows):
        _, _, m, C = dense_conditionals(lik, np.array(x, dtype=float))
        np.testing.assert_allclose(pred.means[r], m, rtol=1e-8)
        np.testing.assert_allclose(pred.variances[r], np.diag(C), rtol=1e-8)


def test_predictive_density_integrates_to_one():
    _, data, ems = small_problem(3, seed=2)
    pred = infer.predictive(fake_chain([[22, 0.35, 0.25, 120, 40, 12]] * 2), data, ems, seed=0)
    grid = np.linspace(pred.means[0, 0] - 2000, pred.means[0, 0] + 2000, 4001)
    assert np.trapezoid(pred.density(0, grid), grid) == pytest.approx(1.0, abs=1e-6)


def test_predictive_coverage_on_model_data(problem):
    _, data, ems = small_problem(40, seed=8)
    cfg = infer.MHConfig(n_iter=20_000, burn_in=4_000, thin=20, pilot_iter=3_000)
    ch = infer.mh_sample(data, ems, config=cfg, seed=8)
    pred = infer.predictive(ch, data, ems, seed=1)
    assert pred.coverage(data.t) >= 0.85


def test_chain_csv_round_trip_and_summary(tmp_path, prior_chain):
    p = tmp_path / "s.csv"
    prior_chain.write_csv(p, comments=["hello"])
    back = infer.PosteriorChain.read_csv(p)
    np.testing.assert_array_equal(back.samples, prior_chain.samples)
    np.testing.assert_array_equal(back.iterations, prior_chain.iterations)
    assert p.read_text().splitlines()[1] == "iter,nu,v_coast,v_river,sigma,a_zeta,r_zeta,log_post"
    s = prior_chain.summary()
    assert set(s["parameters"]) == set(infer.PARAM_NAMES)
    for v in s["parameters"].values():
        assert v["ci95"][0] <= v["mean"] <= v["ci95"][1]
    assert set(s["acceptance"]) == {"theta", "sigma", "zeta"}


def test_kde_mode_of_normal_sample():
    x = np.random.default_rng(0).normal(3.0, 1.0, 20_000)
    assert infer.kde_mode(x) == pytest.approx(3.0, abs=0.3)
