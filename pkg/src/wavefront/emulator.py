"""Per-site Gaussian-process emulators of wavefront arrival time.

Each site gets a GP over theta = (nu, v_coast, v_river) with mean
``alpha_0 + alpha_1/sqrt(nu) + alpha_2/v_coast + alpha_3/v_river`` (fitted
once by OLS) and an ARD Gaussian covariance whose hyperparameters
``(a, r_1, r_2, r_3)`` are sampled by Metropolis-Hastings on a log scale.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, optimize, stats

from . import gp
from .gp import Conditioning, KernelParams

log = logging.getLogger(__name__)

FORMAT_NAME = "wavefront-site-emulator"
FORMAT_VERSION = 1
MAX_UNREACHED_FRACTION = 0.2


class EmulatorError(RuntimeError):
    pass


def mean_basis(theta) -> np.ndarray:
    """Rows ``(1, nu^-1/2, v_coast^-1, v_river^-1)`` for each theta."""
    th = np.asarray(theta, dtype=float)
    single = th.ndim == 1
    th = np.atleast_2d(th)
    if np.any(~(th > 0)):
        raise ValueError("mean basis needs strictly positive (nu, v_coast, v_river)")
    out = np.column_stack([np.ones(len(th)), th[:, 0] ** -0.5, 1.0 / th[:, 1], 1.0 / th[:, 2]])
    return out[0] if single else out


def fit_mean(design, arrivals) -> np.ndarray:
    X = mean_basis(np.atleast_2d(design))
    if X.shape[0] < 4:
        raise EmulatorError("need at least 4 usable design points")
    return gp.ols(X, np.asarray(arrivals, dtype=float))


# ---------------------------------------------------------------------------
# hyperparameter MCMC

@dataclass(frozen=True)
class HyperPrior:
    """Independent log-normal priors; ``*_var`` are variances of the logs."""

    log_a_mean: float = 6.3
    log_a_var: float = 0.5
    log_r_mean: float = 9.0
    log_r_var: float = 3.0

    @classmethod
    def reading(cls, second_arg: str = "variance") -> "HyperPrior":
        """Default priors with the second log-normal argument read as a variance or an sd."""
        if second_arg == "variance":
            return cls()
        if second_arg == "sd":
            return cls(log_a_var=0.5**2, log_r_var=3.0**2)
        raise ValueError("second_arg must be 'variance' or 'sd'")

    def logpdf_log(self, x: np.ndarray) -> float:
        """Log density of (log a, log r_1..3), i.e. normal densities of the logs."""
        means = np.r_[self.log_a_mean, np.full(len(x) - 1, self.log_r_mean)]
        vars_ = np.r_[self.log_a_var, np.full(len(x) - 1, self.log_r_var)]
        return float(stats.norm.logpdf(x, means, np.sqrt(vars_)).sum())


@dataclass(frozen=True)
class HyperMHConfig:
    n_iter: int = 50_000
    burn_in: int = 5_000
    thin: int = 10
    init_step: float = 0.2
    adapt: bool = True

    @classmethod
    def paper(cls) -> "HyperMHConfig":
        return cls(n_iter=500_000, burn_in=50_000, thin=50)


@dataclass(eq=False)
class HyperChain:
    samples: np.ndarray          # (k, 4): a, r_1, r_2, r_3
    acceptance: np.ndarray       # per-parameter acceptance after burn-in
    step: np.ndarray
    log_post: np.ndarray


class _ResidualGP:
    """Cheap repeated GP log likelihoods for a fixed training set."""

    def __init__(self, design: np.ndarray, resid: np.ndarray):
        self.resid = resid
        self.n = len(resid)
        self.d2 = [(design[:, j, None] - design[None, :, j]) ** 2 for j in range(design.shape[1])]

    def loglik(self, log_params: np.ndarray) -> float:
        a2 = np.exp(2 * log_params[0])
        expo = sum(d / np.exp(2 * lr) for d, lr in zip(self.d2, log_params[1:]))
        K = a2 * np.exp(-expo)
        K[np.diag_indices_from(K)] += gp.NUGGET_REL * a2
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            return -np.inf
        return gp.mvn_logpdf_chol(self.resid, L)


def _hyper_mode(design, resid, log_post) -> np.ndarray:
    """Posterior mode by Nelder-Mead from a few length-scale starts.

    Derivative-free search copes with the -inf walls where the covariance
    stops being numerically positive definite.
    """
    spread = np.ptp(design, axis=0)
    spread = np.where(spread > 0, spread, 1.0)

    def neg(x):
        v = log_post(x)
        return -v if np.isfinite(v) else 1e300

    best = None
    for frac in (0.5, 0.2, 1.0):
        x0 = np.r_[np.log(max(resid.std(), 1e-6)), np.log(spread * frac)]
        res = optimize.minimize(neg, x0, method="Nelder-Mead",
                                options={"maxiter": 1500, "xatol": 1e-3, "fatol": 1e-4})
        if best is None or res.fun < best.fun:
            best = res
    if best.fun >= 1e300:
        raise EmulatorError("no hyperparameter value gives a positive definite covariance")
    return best.x


def fit_hyper_mh(design, arrivals, alpha, prior: HyperPrior = HyperPrior(),
                 config: HyperMHConfig = HyperMHConfig(), seed=None,
                 use_likelihood: bool = True) -> HyperChain:
    """Component-wise log-scale random-walk MH for ``(a, r_1, r_2, r_3)``.

    The mean function with coefficients ``alpha`` enters through the GP
    likelihood of the arrivals.  Step sizes adapt during burn-in only
    (toward 44% univariate acceptance) and are frozen afterwards.  The chain
    starts from the posterior mode.
    """
    rng = np.random.default_rng(seed)
    design = np.atleast_2d(np.asarray(design, dtype=float))
    dim = design.shape[1] + 1
    if use_likelihood:
        resid = np.asarray(arrivals, dtype=float) - mean_basis(design) @ np.asarray(alpha, dtype=float)
        model = _ResidualGP(design, resid)

        def log_post(x):
            return prior.logpdf_log(x) + model.loglik(x)

        x = _hyper_mode(design, resid, log_post)
    else:
        def log_post(x):
            return prior.logpdf_log(x)

        x = np.r_[prior.log_a_mean, np.full(dim - 1, prior.log_r_mean)]

    lp = log_post(x)
    step = np.full(dim, config.init_step)
    n_keep = max(0, (config.n_iter - config.burn_in) // config.thin)
    out = np.empty((n_keep, dim))
    out_lp = np.empty(n_keep)
    accepts = np.zeros(dim)
    window = np.zeros(dim)
    k = 0
    for it in range(config.n_iter):
        for j in range(dim):
            prop = x.copy()
            prop[j] += step[j] * rng.standard_normal()
            lp_prop = log_post(prop)
            if np.log(rng.random()) < lp_prop - lp:
                x, lp = prop, lp_prop
                if it >= config.burn_in:
                    accepts[j] += 1
                window[j] += 1
        if it < config.burn_in and config.adapt and (it + 1) % 50 == 0:
            rate = window / 50
            step *= np.exp(np.clip(rate - 0.44, -0.5, 0.5))
            window[:] = 0
        if it >= config.burn_in and (it - config.burn_in) % config.thin == config.thin - 1 and k < n_keep:
            out[k] = x
            out_lp[k] = lp
            k += 1
    n_main = max(1, config.n_iter - config.burn_in)
    acc = accepts / n_main
    if np.any(acc < 0.05) or np.any(acc > 0.6):
        warnings.warn(f"hyperparameter MH acceptance {np.round(acc, 3)} outside [0.05, 0.6]; "
                      "lengthen burn-in or adjust init_step", RuntimeWarning)
    return HyperChain(np.exp(out[:k]), acc, step, out_lp[:k])


# ---------------------------------------------------------------------------
# the per-site emulator

@dataclass(eq=False)
class SiteEmulator:
    site_id: str
    design: np.ndarray           # (p, 3) usable training inputs
    arrivals: np.ndarray         # (p,)
    alpha: np.ndarray            # (4,)
    hyper_samples: np.ndarray    # (k, 4): a, r_1, r_2, r_3
    excluded: tuple[int, ...] = ()
    acceptance: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.design = np.atleast_2d(np.asarray(self.design, dtype=float))
        self.arrivals = np.asarray(self.arrivals, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.hyper_samples = np.atleast_2d(np.asarray(self.hyper_samples, dtype=float))
        if not np.all(np.isfinite(self.arrivals)):
            raise EmulatorError(f"site {self.site_id}: training arrivals must be finite")

    @property
    def hyper_point(self) -> np.ndarray:
        """Componentwise posterior mean of the hyperparameter draws."""
        return self.hyper_samples.mean(axis=0)

    def kernel(self, hyper=None) -> KernelParams:
        h = self.hyper_point if hyper is None else np.asarray(hyper, dtype=float)
        return KernelParams(h[0], tuple(h[1:]))

    def mean(self, theta) -> np.ndarray:
        return mean_basis(theta) @ self.alpha

    def conditioning(self, hyper=None) -> Conditioning:
        key = None if hyper is None else tuple(np.asarray(hyper, dtype=float))
        c = self._cache.get(key)
        if c is None:
            c = Conditioning(self.design, self.arrivals, self.kernel(hyper),
                             mean=self.mean(self.design), mean_fn=self.mean)
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = c
        return c

    def predict(self, theta_star, hyper=None, full_cov: bool = False):
        """Predictive mean and marginal variances (or full covariance) at ``theta_star``."""
        q = np.atleast_2d(np.asarray(theta_star, dtype=float))
        if np.any(~(q > 0)):
            raise ValueError("query points must be strictly positive")
        return self.conditioning(hyper).condition(q, full_cov=full_cov)

    def mixture_draws(self, n_components: int | None = None) -> np.ndarray:
        h = self.hyper_samples
        if n_components is None or n_components >= len(h):
            return h
        idx = np.linspace(0, len(h) - 1, n_components).round().astype(int)
        return h[idx]

    def predict_mixture(self, theta_star, n_components: int | None = None):
        """One (mean, variance) pair per retained hyperparameter draw (equal weights)."""
        return [self.predict(theta_star, hyper=h) for h in self.mixture_draws(n_components)]

    # serialisation ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "site_id": self.site_id,
            "alpha": self.alpha.tolist(),
            "hyper_point": self.hyper_point.tolist(),
            "hyper_samples": self.hyper_samples.tolist(),
            "acceptance": None if self.acceptance is None else np.asarray(self.acceptance).tolist(),
            "excluded_design_rows": list(self.excluded),
            "design": self.design.tolist(),
            "arrivals": self.arrivals.tolist(),
        }

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        d = self.to_dict()
        if extra:
            d["provenance"] = extra
        Path(path).write_text(json.dumps(d, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SiteEmulator":
        d = json.loads(Path(path).read_text())
        if d.get("format") != FORMAT_NAME:
            raise EmulatorError(f"{path}: not an emulator file")
        if d.get("version") != FORMAT_VERSION:
            raise EmulatorError(f"{path}: unsupported emulator file version {d.get('version')}")
        return cls(d["site_id"], np.array(d["design"]), np.array(d["arrivals"]),
                   np.array(d["alpha"]), np.array(d["hyper_samples"]),
                   tuple(d.get("excluded_design_rows", ())),
                   None if d.get("acceptance") is None else np.array(d["acceptance"]))


def build_emulator(site_id: str, design, arrivals, prior: HyperPrior = HyperPrior(),
                   config: HyperMHConfig = HyperMHConfig(), seed=None) -> SiteEmulator:
    """Fit mean coefficients, then sample hyperparameters, for one site.

    Design points whose arrival is NaN (front never arrived) are dropped;
    more than 20% of them is an error.
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    arrivals = np.asarray(arrivals, dtype=float)
    ok = np.isfinite(arrivals)
    excluded = tuple(int(i) for i in np.flatnonzero(~ok))
    if (~ok).mean() > MAX_UNREACHED_FRACTION:
        raise EmulatorError(f"site {site_id}: {len(excluded)} of {len(arrivals)} design runs "
                            "never reached the site")
    if excluded:
        log.info("site %s: excluding %d unreached design points", site_id, len(excluded))
    alpha = fit_mean(design[ok], arrivals[ok])
    chain = fit_hyper_mh(design[ok], arrivals[ok], alpha, prior, config, seed)
    if len(chain.samples) == 0:
        raise EmulatorError(f"site {site_id}: hyperparameter chain produced no samples")
    return SiteEmulator(site_id, design[ok], arrivals[ok], alpha, chain.samples, excluded, chain.acceptance)


# ---------------------------------------------------------------------------
# validation

def md_reference(p: int, p_star: int):
    """Scaled F reference for MD^2: ``p*(p-5)/(p-3) F(p*, p-3)``."""
    scale = p_star * (p - 5) / (p - 3)
    return stats.f(p_star, p - 3, scale=scale)


def md_threshold(p: int, p_star: int, level: float = 0.95) -> float:
    return float(np.sqrt(md_reference(p, p_star).ppf(level)))


@dataclass(frozen=True)
class MDResult:
    md: float
    threshold: float
    lower: float
    upper: float

    @property
    def passed(self) -> bool:
        return self.md <= self.threshold


def validate_md(em: SiteEmulator, theta_star, arrivals_star, hyper=None) -> MDResult:
    """Mahalanobis distance of hold-out runs under the full predictive covariance."""
    mu, V = em.predict(theta_star, hyper=hyper, full_cov=True)
    r = np.asarray(arrivals_star, dtype=float) - mu
    a2 = em.kernel(hyper).amplitude ** 2
    # below the training jitter the covariance is singular at working precision
    if np.linalg.eigvalsh(V)[0] < gp.NUGGET_REL * a2:
        warnings.warn(f"site {em.site_id}: near-singular hold-out covariance regularised with the "
                      "training nugget", RuntimeWarning)
        V = V + gp.NUGGET_REL * a2 * np.eye(len(V))
    L = gp.cholesky(V)
    z = linalg.solve_triangular(L, r, lower=True)
    ref = md_reference(len(em.arrivals), len(r))
    return MDResult(float(np.sqrt(z @ z)), float(np.sqrt(ref.ppf(0.95))),
                    float(np.sqrt(ref.ppf(0.025))), float(np.sqrt(ref.ppf(0.975))))


@dataclass(frozen=True)
class PITResult:
    pit: np.ndarray
    chi2: float
    threshold: float
    counts: np.ndarray

    @property
    def passed(self) -> bool:
        return self.chi2 < self.threshold


def pit_chi2(pit: np.ndarray, n_bins: int = 10) -> tuple[float, np.ndarray]:
    counts = np.bincount(np.minimum((np.asarray(pit) * n_bins).astype(int), n_bins - 1), minlength=n_bins)
    expected = len(pit) / n_bins
    return float(((counts - expected) ** 2 / expected).sum()), counts


def validate_pit(em: SiteEmulator, theta_star, arrivals_star, hyper=None, n_bins: int = 10) -> PITResult:
    """PIT values from marginal predictions and Pearson chi-square over equal bins."""
    y = np.asarray(arrivals_star, dtype=float)
    if len(y) < 20:
        raise ValueError("PIT validation needs at least 20 hold-out points")
    mu, var = em.predict(theta_star, hyper=hyper)
    if np.any(var <= 0):
        raise EmulatorError(f"site {em.site_id}: zero predictive variance at a hold-out point "
                            "(hold-out design collides with training design)")
    pit = stats.norm.cdf((y - mu) / np.sqrt(var))
    chi2, counts = pit_chi2(pit, n_bins)
    return PITResult(pit, chi2, float(stats.chi2.ppf(0.95, n_bins - 1)), counts)


# ---------------------------------------------------------------------------
# batched prediction across sites

class EmulatorBank:
    """Marginal predictions for many site emulators at one theta.

    All sites are stacked (designs padded to a common size) so a prediction
    costs a handful of batched array operations.  ``hyper`` selects, per
    site, either the posterior-mean hyperparameters (``None``) or row
    ``index`` of each site's retained draws.
    """

    def __init__(self, emulators: Sequence[SiteEmulator], index: int | None = None,
                 n_components: int | None = None):
        self.site_ids = tuple(em.site_id for em in emulators)
        n = len(emulators)
        P = max(len(em.arrivals) for em in emulators)
        self.alpha = np.array([em.alpha for em in emulators])
        self.design = np.zeros((n, P, 3))
        self.linv = np.zeros((n, P, P))
        self.weights = np.zeros((n, P))
        self.inv_r2 = np.zeros((n, 3))
        self.a2 = np.zeros(n)
        for s, em in enumerate(emulators):
            h = em.hyper_point if index is None else em.mixture_draws(n_components)[index]
            c = em.conditioning(h)
            p = len(em.arrivals)
            self.design[s, :p] = em.design
            self.design[s, p:] = em.design[0]
            self.linv[s, :p, :p] = linalg.solve_triangular(c.chol, np.eye(p), lower=True)
            self.weights[s, :p] = c.weights
            self.inv_r2[s] = 1.0 / np.asarray(h[1:]) ** 2
            self.a2[s] = h[0] ** 2
        self.shared = all(len(em.arrivals) == P and np.array_equal(em.design, emulators[0].design)
                          for em in emulators)

    def __len__(self) -> int:
        return len(self.site_ids)

    def predict(self, theta) -> tuple[np.ndarray, np.ndarray]:
        th = np.asarray(theta, dtype=float)
        if np.any(~(th > 0)):
            raise ValueError("theta must be strictly positive")
        m = self.alpha @ mean_basis(th)
        if self.shared:
            d2 = (self.design[0] - th) ** 2                      # (P, 3)
            ks = self.a2[:, None] * np.exp(-(self.inv_r2 @ d2.T))  # (n, P)
        else:
            d2 = (self.design - th) ** 2                         # (n, P, 3)
            ks = self.a2[:, None] * np.exp(-np.einsum("npj,nj->np", d2, self.inv_r2))
        mu = m + np.einsum("np,np->n", ks, self.weights)
        v = np.matmul(self.linv, ks[:, :, None])[:, :, 0]
        var = np.maximum(self.a2 - np.einsum("np,np->n", v, v), 0.0)
        return mu, var


def load_emulators(directory: str | Path, site_ids: Sequence[str] | None = None) -> list[SiteEmulator]:
    directory = Path(directory)
    if site_ids is None:
        return [SiteEmulator.load(p) for p in sorted(directory.glob("*.emu.json"))]
    return [SiteEmulator.load(directory / f"{sid}.emu.json") for sid in site_ids]


def site_seeds(master_seed, n: int) -> list[np.random.SeedSequence]:
    """Independent per-site seed sequences derived from one master seed."""
    if not isinstance(master_seed, np.random.SeedSequence):
        master_seed = np.random.SeedSequence(master_seed)
    return master_seed.spawn(n)


def train_all(site_ids: Sequence[str], design, arrivals, prior: HyperPrior = HyperPrior(),
              config: HyperMHConfig = HyperMHConfig(), seed=None, n_jobs: int = 1) -> list[SiteEmulator]:
    """Build one emulator per column of ``arrivals`` (shape ``(p, n_sites)``)."""
    arrivals = np.asarray(arrivals, dtype=float)
    if arrivals.shape[1] != len(site_ids):
        raise ValueError("arrivals must have one column per site")
    seeds = site_seeds(seed, len(site_ids))
    jobs = [(sid, design, arrivals[:, s], prior, config, seeds[s]) for s, sid in enumerate(site_ids)]
    if n_jobs == 1:
        return [build_emulator(*job) for job in jobs]
    from joblib import Parallel, delayed
    return Parallel(n_jobs=n_jobs)(delayed(build_emulator)(*job) for job in jobs)
