from __future__ import annotations

import numpy as np

from wavefront import design as dz
from wavefront import emulator as em
from wavefront import infer
from wavefront import synthetic as sy

RECOVERY_BOX = ((5.0, 60.0), (0.05, 1.0), (0.05, 0.8))


def quick_emulators(arrivals: sy.AnalyticArrivals, p: int = 30, n_draws: int = 1, seed: int = 0,
                    spread: float = 0.1, lengths=(15.0, 0.3, 0.2)) -> list[em.SiteEmulator]:
    """Emulators of analytic arrival functions with hand-set hyperparameter draws (no MCMC)."""
    rng = np.random.default_rng(seed)
    d = dz.lhd_maximin(p, RECOVERY_BOX, n_candidates=20, seed=seed).points
    Y = arrivals(d)
    out = []
    for s, sid in enumerate(arrivals.site_ids):
        alpha = em.fit_mean(d, Y[:, s])
        resid = Y[:, s] - em.mean_basis(d) @ alpha
        base = np.log([max(resid.std(), 1.0), *lengths])
        draws = np.exp(base + spread * rng.standard_normal((n_draws, 4))) if n_draws > 1 else np.exp(base)[None]
        out.append(em.SiteEmulator(sid, d, Y[:, s], alpha, draws))
    return out


def small_problem(n_sites: int = 10, seed: int = 0, n_draws: int = 1, params=None, p: int = 30):
    rng = np.random.default_rng(seed)
    arr = sy.random_sites(n_sites, rng)
    params = params or infer.ModelParams(*sy.THETA_STAR, sigma=100.0, a_zeta=30.0, r_zeta=10.0)
    data = sy.synthetic_dataset(arr, params, rng)
    return arr, data, quick_emulators(arr, p=p, n_draws=n_draws, seed=seed)


class ExactBank:
    """Stand-in emulator bank that returns the analytic arrival times with zero variance."""

    def __init__(self, arrivals: sy.AnalyticArrivals):
        self.arrivals = arrivals
        self.site_ids = arrivals.site_ids
        self.design = dz.lhd_maximin(20, RECOVERY_BOX, n_candidates=5, seed=0).points

    def predict(self, theta):
        return self.arrivals(np.asarray(theta, dtype=float)), np.zeros(len(self.site_ids))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
