from __future__ import annotations

import warnings

import numpy as np
import pytest
from scipy import stats

from wavefront import design as dz
from wavefront import emulator as em
from wavefront import gp

BOX = ((5.0, 60.0), (0.05, 1.0), (0.05, 0.8))
QUICK = em.HyperMHConfig(n_iter=600, burn_in=200, thin=4)


def smooth_tau(theta):
    th = np.atleast_2d(theta)
    return 1000 + 2000 / np.sqrt(th[:, 0]) + 50 / th[:, 1] + 30 / th[:, 2]


def wavy_tau(theta):
    th = np.atleast_2d(theta)
    return smooth_tau(th) + 40 * np.sin(th[:, 0] / 20) + 30 * np.cos(2 * th[:, 1]) * th[:, 2]


@pytest.fixture(scope="module")
def train_design():
    return dz.lhd_maximin(40, BOX, n_candidates=50, seed=3).points


@pytest.fixture(scope="module")
def wavy_emulator(train_design):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return em.build_emulator("w", train_design, wavy_tau(train_design), config=QUICK, seed=1)


# -- mean function -------------------------------------------------------------------------

def test_mean_basis_examples():
    np.testing.assert_allclose(em.mean_basis([1, 1, 1]), [1, 1, 1, 1])
    np.testing.assert_allclose(em.mean_basis([4, 2, 0.5]), [1, 0.5, 0.5, 2])
    np.testing.assert_allclose(em.mean_basis([100, 10, 10]), [1, 0.1, 0.1, 0.1])
    with pytest.raises(ValueError):
        em.mean_basis([0, 1, 1])


def test_fit_mean_examples(train_design):
    np.testing.assert_allclose(em.fit_mean(train_design, 100 + 500 / np.sqrt(train_design[:, 0])),
                               [100, 500, 0, 0], atol=1e-8)
    np.testing.assert_allclose(em.fit_mean(train_design, np.full(len(train_design), 321.0)),
                               [321, 0, 0, 0], atol=1e-8)
    d200 = dz.lhd_maximin(200, BOX, n_candidates=10, seed=0).points
    alpha = np.array([800.0, 1500.0, 12.0, 7.0])
    np.testing.assert_allclose(em.fit_mean(d200, em.mean_basis(d200) @ alpha), alpha, rtol=1e-8)
    with pytest.raises(em.EmulatorError):
        em.fit_mean(train_design[:3], np.ones(3))


# -- hyperparameter MCMC -------------------------------------------------------------------

def test_hyper_prior_readings():
    assert em.HyperPrior.reading("variance") == em.HyperPrior()
    sd = em.HyperPrior.reading("sd")
    assert sd.log_a_var == 0.25 and sd.log_r_var == 9.0
    with pytest.raises(ValueError):
        em.HyperPrior.reading("other")


def test_hyper_prior_only_matches_prior(train_design):
    cfg = em.HyperMHConfig(n_iter=20000, burn_in=1000, thin=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ch = em.fit_hyper_mh(train_design, None, None, config=cfg, seed=0, use_likelihood=False)
    log_a = np.log(ch.samples[:, 0])
    # batch-means standard error
    batches = log_a[: len(log_a) // 50 * 50].reshape(50, -1).mean(1)
    se = batches.std(ddof=1) / np.sqrt(50)
    assert abs(log_a.mean() - 6.3) < 3 * se
    assert log_a.var() == pytest.approx(0.5, rel=0.2)


def test_hyper_flat_data_shrinks_amplitude(train_design):
    y = np.full(len(train_design), 1234.0)
    alpha = em.fit_mean(train_design, y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ch = em.fit_hyper_mh(train_design, y, alpha, config=QUICK, seed=2)
    assert np.log(ch.samples[:, 0]).mean() < 6.3


def test_hyper_deterministic(train_design):
    y = wavy_tau(train_design)
    alpha = em.fit_mean(train_design, y)
    cfg = em.HyperMHConfig(n_iter=200, burn_in=50, thin=5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = em.fit_hyper_mh(train_design, y, alpha, config=cfg, seed=7)
        b = em.fit_hyper_mh(train_design, y, alpha, config=cfg, seed=7)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.samples.shape == (30, 4)


# -- prediction ------------------------------------------------------------------------------

def test_predict_at_design_points(wavy_emulator):
    e = wavy_emulator
    mu, var = e.predict(e.design)
    np.testing.assert_allclose(mu, e.arrivals, rtol=1e-6)
    assert np.all(var < 1e-8 * e.kernel().amplitude ** 2 * (1 + 1e-6))


def test_predict_far_corner(wavy_emulator):
    e = wavy_emulator
    corner = np.array([[60.0 * 40, 1.0 * 40, 0.8 * 40]])
    _, var = e.predict(corner)
    assert var[0] == pytest.approx(e.kernel().amplitude ** 2, rel=0.1)


def test_predict_rejects_nonpositive(wavy_emulator):
    with pytest.raises(ValueError):
        wavy_emulator.predict([[0.0, 0.5, 0.5]])


def test_smooth_function_holdout(train_design):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        e = em.build_emulator("s", train_design, smooth_tau(train_design), config=QUICK, seed=4)
    hold = dz.lhd_maximin(100, BOX, n_candidates=5, seed=99).points
    mu, var = e.predict(hold)
    ok = np.abs(mu - smooth_tau(hold)) < 3 * np.sqrt(var) + 1e-9 * np.abs(mu)
    assert ok.mean() >= 0.95


def test_wavy_function_accuracy(wavy_emulator):
    # accuracy only; calibration is checked on GP-draw functions in the acceptance suite
    hold = dz.lhd_maximin(100, BOX, n_candidates=5, seed=98).points
    mu, _ = wavy_emulator.predict(hold)
    truth = wavy_tau(hold)
    wiggle = truth - em.mean_basis(hold) @ em.fit_mean(hold, truth)
    assert np.sqrt(np.mean((mu - truth) ** 2)) < 0.2 * wiggle.std()


def test_mixture_single_component(wavy_emulator):
    e = wavy_emulator
    single = em.SiteEmulator("x", e.design, e.arrivals, e.alpha, e.hyper_point[None, :])
    q = dz.lhd_maximin(10, BOX, n_candidates=2, seed=5).points
    (m1, v1), = single.predict_mixture(q, 1)
    m0, v0 = e.predict(q)
    np.testing.assert_array_equal(m1, m0)
    np.testing.assert_array_equal(v1, v0)


def test_mixture_moments(wavy_emulator):
    e = wavy_emulator
    q = dz.lhd_maximin(60, BOX, n_candidates=2, seed=6).points
    comps = e.predict_mixture(q, 20)
    assert len(comps) == 20
    means = np.array([c[0] for c in comps])
    vars_ = np.array([c[1] for c in comps])
    mix_mean = means.mean(0)
    mix_var = vars_.mean(0) + means.var(0)
    np.testing.assert_allclose(mix_mean, np.mean(means, axis=0))
    _, v_point = e.predict(q)
    assert (mix_var >= v_point).mean() >= 0.75


def test_save_load_roundtrip(tmp_path, wavy_emulator):
    p = tmp_path / "w.emu.json"
    wavy_emulator.save(p, {"config_hash": "abc", "seed": 1})
    back = em.SiteEmulator.load(p)
    q = np.array([[20.0, 0.3, 0.2]])
    assert back.predict(q)[0][0] == wavy_emulator.predict(q)[0][0]
    np.testing.assert_array_equal(back.hyper_samples, wavy_emulator.hyper_samples)
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "x"}')
    with pytest.raises(em.EmulatorError):
        em.SiteEmulator.load(bad)


def test_build_excludes_unreached(train_design):
    y = wavy_tau(train_design)
    y[[0, 5]] = np.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        e = em.build_emulator("u", train_design, y, config=em.HyperMHConfig(60, 20, 4), seed=0)
    assert e.excluded == (0, 5)
    assert len(e.arrivals) == len(train_design) - 2
    y[:20] = np.nan
    with pytest.raises(em.EmulatorError, match="never reached"):
        em.build_emulator("u", train_design, y, config=em.HyperMHConfig(60, 20, 4), seed=0)


# -- validation ---------------------------------------------------------------------------------

def test_md_threshold_constant():
    assert em.md_threshold(200, 100) == pytest.approx(11.44, abs=0.01)


def _fixed_emulator(p=200, seed=0):
    rng = np.random.default_rng(seed)
    d = dz.lhd_maximin(p, BOX, n_candidates=3, seed=seed).points
    k = gp.KernelParams(80.0, (25.0, 0.5, 0.4))
    K = gp.gauss_kernel(d, d, k) + 1e-8 * 6400 * np.eye(p)
    alpha = np.array([900.0, 1800.0, 10.0, 5.0])
    y = em.mean_basis(d) @ alpha + np.linalg.cholesky(K) @ rng.standard_normal(p)
    return em.SiteEmulator("f", d, y, alpha, np.array([[80.0, 25.0, 0.5, 0.4]]))


def test_md_zero_for_exact_holdout():
    e = _fixed_emulator()
    hold = dz.lhd_maximin(100, BOX, n_candidates=2, seed=50).points
    mu, _ = e.predict(hold)
    assert em.validate_md(e, hold, mu).md == pytest.approx(0.0, abs=1e-9)


def test_md_calibrated_under_own_predictive():
    e = _fixed_emulator()
    rng = np.random.default_rng(11)
    hold = dz.lhd_maximin(100, BOX, n_candidates=2, seed=51).points
    mu, V = e.predict(hold, full_cov=True)
    L = np.linalg.cholesky(V + 1e-8 * 6400 * np.eye(len(V)))
    inside = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(100):
            r = em.validate_md(e, hold, mu + L @ rng.standard_normal(len(mu)))
            inside += r.lower <= r.md <= r.upper
    assert inside >= 90


def test_pit_calibrated_under_own_predictive():
    e = _fixed_emulator()
    rng = np.random.default_rng(12)
    hold = dz.lhd_maximin(100, BOX, n_candidates=2, seed=52).points
    mu, var = e.predict(hold)
    passed = sum(em.validate_pit(e, hold, mu + np.sqrt(var) * rng.standard_normal(len(mu))).passed
                 for _ in range(100))
    assert passed >= 90
    assert em.validate_pit(e, hold, mu).threshold == pytest.approx(16.919, abs=1e-3)


def test_pit_detects_bias():
    e = _fixed_emulator()
    rng = np.random.default_rng(13)
    hold = dz.lhd_maximin(100, BOX, n_candidates=2, seed=53).points
    mu, var = e.predict(hold)
    y = mu + np.sqrt(var) * (rng.standard_normal(len(mu)) + 3)
    assert not em.validate_pit(e, hold, y).passed


def test_pit_of_median_is_half():
    e = _fixed_emulator()
    hold = dz.lhd_maximin(30, BOX, n_candidates=2, seed=54).points
    mu, _ = e.predict(hold)
    np.testing.assert_array_equal(em.validate_pit(e, hold, mu).pit, 0.5)
    with pytest.raises(ValueError):
        em.validate_pit(e, hold[:10], mu[:10])


def test_pit_chi2_uniform_counts():
    pit = (np.arange(100) + 0.5) / 100
    chi2, counts = em.pit_chi2(pit)
    assert chi2 == 0.0 and np.all(counts == 10)


# -- batched prediction ------------------------------------------------------------------------

def test_bank_matches_individual(train_design):
    rng = np.random.default_rng(0)
    ems = []
    for s in range(4):
        d = train_design if s < 2 else train_design[:-s]
        y = wavy_tau(d) * (1 + 0.1 * s)
        ems.append(em.SiteEmulator(f"s{s}", d, y, em.fit_mean(d, y),
                                   np.exp(rng.normal([4, 3, -1, -1], 0.1, (5, 4)))))
    q = np.array([17.0, 0.4, 0.3])
    for bank, hyper in ((em.EmulatorBank(ems), None), (em.EmulatorBank(ems, index=2, n_components=3), 2)):
        mu, var = bank.predict(q)
        for s, e in enumerate(ems):
            h = None if hyper is None else e.mixture_draws(3)[hyper]
            m1, v1 = e.predict(q, hyper=h)
            assert mu[s] == pytest.approx(m1[0], rel=1e-10)
            assert var[s] == pytest.approx(v1[0], rel=1e-6, abs=1e-9 * e.kernel(h).amplitude ** 2)
    shared = em.EmulatorBank(ems[:2])
    assert shared.shared and not em.EmulatorBank(ems).shared


def test_train_all_and_load(tmp_path, train_design):
    Y = np.column_stack([wavy_tau(train_design), smooth_tau(train_design)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ems = em.train_all(("a", "b"), train_design, Y, config=em.HyperMHConfig(60, 20, 4), seed=3)
        again = em.train_all(("a", "b"), train_design, Y, config=em.HyperMHConfig(60, 20, 4), seed=3)
    for a, b in zip(ems, again):
        np.testing.assert_array_equal(a.hyper_samples, b.hyper_samples)
    for e in ems:
        e.save(tmp_path / f"{e.site_id}.emu.json")
    loaded = em.load_emulators(tmp_path, ("b", "a"))
    assert [e.site_id for e in loaded] == ["b", "a"]
