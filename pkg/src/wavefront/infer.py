"""Hierarchical arrival-time model, emulated likelihood and block MCMC.

Observed site dates follow ``t_i = tau_i(theta) + zeta(x_i) + sigma_i w_i + sigma e_i``
where ``tau_i`` is replaced by its emulator, ``zeta`` is a zero-mean GP over
site coordinates (degrees) and ``w_i, e_i`` are standard normal.  Marginally

    t ~ N(mu(theta), K_zeta + diag(V_i(theta) + sigma_i^2 + sigma^2)).

MCMC runs on log parameters with three blocks updated in fixed order:
``(nu, v_coast, v_river)``, ``sigma`` and ``(a_zeta, r_zeta)``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, optimize, special, stats

from .data import SiteData
from .emulator import EmulatorBank, SiteEmulator
from .gp import LOG_2PI

log = logging.getLogger(__name__)

PARAM_NAMES = ("nu", "v_coast", "v_river", "sigma", "a_zeta", "r_zeta")
BLOCKS = {"theta": (0, 1, 2), "sigma": (3,), "zeta": (4, 5)}
BLOCK_ORDER = ("theta", "sigma", "zeta")


@dataclass(frozen=True)
class ModelParams:
    nu: float
    v_coast: float
    v_river: float
    sigma: float
    a_zeta: float
    r_zeta: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.nu, self.v_coast, self.v_river])

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, x) -> "ModelParams":
        return cls(*(float(v) for v in x))


# ---------------------------------------------------------------------------
# priors

@dataclass(frozen=True)
class LogNormal:
    """Log-normal given the mean and *variance* of log X."""

    mu: float
    var: float

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            lx = np.log(x)
            out = -lx - 0.5 * np.log(2 * np.pi * self.var) - (lx - self.mu) ** 2 / (2 * self.var)
        return np.where(x > 0, out, -np.inf)

    def sample(self, rng, size=None):
        return np.exp(self.mu + np.sqrt(self.var) * rng.standard_normal(size))

    @property
    def mode(self) -> float:
        return float(np.exp(self.mu - self.var))

    @property
    def median(self) -> float:
        return float(np.exp(self.mu))


@dataclass(frozen=True)
class InverseGamma:
    """Inverse gamma with shape ``alpha`` and scale ``beta``: density ~ x^(-alpha-1) exp(-beta/x)."""

    alpha: float
    beta: float

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (self.alpha * np.log(self.beta) - special.gammaln(self.alpha)
                   - (self.alpha + 1) * np.log(x) - self.beta / x)
        return np.where(x > 0, out, -np.inf)

    def sample(self, rng, size=None):
        return self.beta / rng.gamma(self.alpha, 1.0, size)

    @property
    def mean(self) -> float:
        return self.beta / (self.alpha - 1) if self.alpha > 1 else np.inf


@dataclass(frozen=True)
class Priors:
    nu: LogNormal = LogNormal(3.5, 1.0)
    v_coast: LogNormal = LogNormal(1.0, 0.25)
    v_river: LogNormal = LogNormal(2.6, 1.0)
    sigma2: InverseGamma = InverseGamma(5.0, 1e6)
    a_zeta: LogNormal = LogNormal(5.0, 2.25)
    r_zeta: LogNormal = LogNormal(2.5, 2.25)

    def marginal_logpdfs(self, x) -> np.ndarray:
        """Log densities of each parameter on its natural scale (sigma, not sigma^2)."""
        x = np.asarray(x, dtype=float)
        s = x[..., 3]
        with np.errstate(divide="ignore", invalid="ignore"):
            lsig = np.where(s > 0, self.sigma2.logpdf(s * s) + np.log(2 * s), -np.inf)
        return np.stack([self.nu.logpdf(x[..., 0]), self.v_coast.logpdf(x[..., 1]),
                         self.v_river.logpdf(x[..., 2]), lsig,
                         self.a_zeta.logpdf(x[..., 4]), self.r_zeta.logpdf(x[..., 5])], axis=-1)

    def sample(self, rng, size=None) -> np.ndarray:
        return np.stack([self.nu.sample(rng, size), self.v_coast.sample(rng, size),
                         self.v_river.sample(rng, size), np.sqrt(self.sigma2.sample(rng, size)),
                         self.a_zeta.sample(rng, size), self.r_zeta.sample(rng, size)], axis=-1)

    def medians(self) -> np.ndarray:
        return np.array([self.nu.median, self.v_coast.median, self.v_river.median,
                         np.sqrt(self.sigma2.beta / stats.gamma(self.sigma2.alpha).median()),
                         self.a_zeta.median, self.r_zeta.median])


def log_prior(p: ModelParams | Sequence[float], priors: Priors = Priors(), log_scale: bool = False) -> float:
    """Joint log prior density of the six parameters.

    With ``log_scale`` the density is that of the log parameters, i.e. the
    natural-scale density times the Jacobian ``prod(x)``.
    """
    x = p.as_array() if isinstance(p, ModelParams) else np.asarray(p, dtype=float)
    if not all(v > 0 for v in x):
        return -np.inf
    lx = [math.log(v) for v in x]
    lp = 0.0
    for k, d in ((0, priors.nu), (1, priors.v_coast), (2, priors.v_river), (4, priors.a_zeta), (5, priors.r_zeta)):
        lp += -lx[k] - 0.5 * math.log(2 * math.pi * d.var) - (lx[k] - d.mu) ** 2 / (2 * d.var)
    ig, s2 = priors.sigma2, x[3] * x[3]
    lp += (ig.alpha * math.log(ig.beta) - math.lgamma(ig.alpha) - (ig.alpha + 1) * math.log(s2)
           - ig.beta / s2 + math.log(2 * x[3]))
    return lp + sum(lx) if log_scale else lp


# ---------------------------------------------------------------------------
# likelihood

def site_sqdist(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=float)
    return ((c[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def zeta_cov(d2: np.ndarray, a_zeta: float, r_zeta: float) -> np.ndarray:
    return a_zeta * a_zeta * np.exp(-d2 / (r_zeta * r_zeta))


class EmulatedLikelihood:
    """Likelihood of site dates with the simulator replaced by emulators.

    ``banks`` holds one :class:`EmulatorBank` per hyperparameter draw index
    (a single bank for the fixed-hyperparameter model).
    """

    def __init__(self, data: SiteData, banks: EmulatorBank | Sequence[EmulatorBank]):
        if isinstance(banks, EmulatorBank):
            banks = [banks]
        self.banks = list(banks)
        for b in self.banks:
            if tuple(b.site_ids) != tuple(data.site_ids):
                raise ValueError("emulator site ids do not match the data site order")
        self.data = data
        self.t = np.asarray(data.t, dtype=float)
        self.s2 = np.asarray(data.sigma, dtype=float) ** 2
        self.d2 = site_sqdist(data.coords)
        self.n = len(self.t)
        self._kcache: tuple[float, np.ndarray] | None = None
        self.n_factor_failures = 0

    @classmethod
    def from_emulators(cls, data: SiteData, emulators: Sequence[SiteEmulator],
                       n_components: int | None = None, uncertain: bool = False):
        by_id = {em.site_id: em for em in emulators}
        try:
            ems = [by_id[s] for s in data.site_ids]
        except KeyError as exc:
            raise ValueError(f"no emulator for site {exc.args[0]}") from None
        if not uncertain:
            return cls(data, EmulatorBank(ems))
        n_e = min(len(em.mixture_draws(n_components)) for em in ems)
        return cls(data, [EmulatorBank(ems, index=j, n_components=n_e) for j in range(n_e)])

    @property
    def n_banks(self) -> int:
        return len(self.banks)

    def predict(self, theta, j: int = 0):
        return self.banks[j].predict(theta)

    def _corr(self, r: float) -> np.ndarray:
        if self._kcache is None or self._kcache[0] != r:
            self._kcache = (r, np.exp(-self.d2 / (r * r)))
        return self._kcache[1]

    def covariance(self, var, sigma, a_zeta, r_zeta) -> np.ndarray:
        S = (a_zeta * a_zeta) * self._corr(r_zeta)
        S[np.diag_indices(self.n)] += var + self.s2 + sigma * sigma
        return S

    def loglik_from_pred(self, mu, var, sigma, a_zeta, r_zeta) -> float:
        S = self.covariance(var, sigma, a_zeta, r_zeta)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            self.n_factor_failures += 1
            warnings.warn("likelihood covariance factorization failed; state rejected", RuntimeWarning)
            return -np.inf
        z = linalg.solve_triangular(L, self.t - mu, lower=True, check_finite=False)
        return float(-0.5 * z @ z - np.log(np.diag(L)).sum() - 0.5 * self.n * LOG_2PI)

    def loglik_batch(self, mus, vars_, sigma, a_zeta, r_zeta) -> np.ndarray:
        """Log likelihoods for stacked predictions (one row per draw index), factorised together."""
        mus = np.asarray(mus, dtype=float)
        S = np.broadcast_to((a_zeta * a_zeta) * self._corr(r_zeta), (len(mus), self.n, self.n)).copy()
        di = np.arange(self.n)
        S[:, di, di] += np.asarray(vars_) + self.s2 + sigma * sigma
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            return np.array([self.loglik_from_pred(m, v, sigma, a_zeta, r_zeta) for m, v in zip(mus, vars_)])
        z = np.linalg.solve(L, (self.t - mus)[:, :, None])[:, :, 0]
        logdet = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(1)
        return -0.5 * (z * z).sum(1) - logdet - 0.5 * self.n * LOG_2PI

    def loglik(self, p: ModelParams | Sequence[float], j: int = 0) -> float:
        x = p.as_array() if isinstance(p, ModelParams) else np.asarray(p, dtype=float)
        mu, var = self.predict(x[:3], j)
        return self.loglik_from_pred(mu, var, *x[3:])

    def loglik_mixture(self, p: ModelParams | Sequence[float]) -> float:
        """Log of the equally weighted mixture over hyperparameter draw indices."""
        x = p.as_array() if isinstance(p, ModelParams) else np.asarray(p, dtype=float)
        preds = [self.predict(x[:3], j) for j in range(self.n_banks)]
        ll = self.loglik_batch([m for m, _ in preds], [v for _, v in preds], *x[3:])
        return float(special.logsumexp(ll) - np.log(self.n_banks))


def log_lik_emulated(p: ModelParams, data: SiteData,
                     emulators: Sequence[SiteEmulator] | EmulatorBank | EmulatedLikelihood) -> float:
    """Exact multivariate normal log density of the site dates (hyperparameters at their point values)."""
    if isinstance(emulators, EmulatedLikelihood):
        lik = emulators
    elif isinstance(emulators, EmulatorBank):
        lik = EmulatedLikelihood(data, emulators)
    else:
        lik = EmulatedLikelihood.from_emulators(data, emulators)
    return lik.loglik(p)


# ---------------------------------------------------------------------------
# MCMC

@dataclass(frozen=True)
class MHConfig:
    n_iter: int = 100_000
    burn_in: int = 10_000
    thin: int = 10
    pilot_iter: int = 5_000
    target_accept: tuple[float, float] = (0.2, 0.4)
    init_scale: float = 0.05
    use_likelihood: bool = True
    # optional (low, high) pairs for (nu, v_coast, v_river): the prior is truncated to this box,
    # normally the emulator design region outside which predictions are extrapolations
    theta_bounds: tuple | None = None

    @classmethod
    def paper(cls) -> "MHConfig":
        return cls(n_iter=1_000_000, burn_in=100_000, thin=100)

    @classmethod
    def for_scale(cls, scale: str) -> "MHConfig":
        if scale == "paper":
            return cls.paper()
        if scale == "desk":
            return cls()
        raise ValueError(f"unknown scale {scale!r}")


@dataclass(frozen=True)
class PosteriorSample:
    params: ModelParams
    iteration: int
    log_post: float
    hyper_index: int = 0


@dataclass(eq=False)
class PosteriorChain:
    samples: np.ndarray        # (k, 6) natural-scale parameters
    log_post: np.ndarray       # (k,) log prior + log likelihood (natural scale)
    iterations: np.ndarray     # (k,)
    hyper_index: np.ndarray    # (k,) emulator draw index (0 when fixed)
    acceptance: dict
    proposal_cov: dict
    n_bad_predictions: int = 0
    mode: str = "fixed"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, k: int) -> PosteriorSample:
        return PosteriorSample(ModelParams.from_array(self.samples[k]), int(self.iterations[k]),
                               float(self.log_post[k]), int(self.hyper_index[k]))

    def column(self, name: str) -> np.ndarray:
        return self.samples[:, PARAM_NAMES.index(name)]

    def interval(self, level: float = 0.95) -> np.ndarray:
        q = (1 - level) / 2
        return np.quantile(self.samples, [q, 1 - q], axis=0).T

    def summary(self) -> dict:
        out = {"n_samples": len(self), "mode": self.mode,
               "acceptance": {k: float(v) for k, v in self.acceptance.items()},
               "n_bad_predictions": self.n_bad_predictions, "parameters": {}}
        ci = self.interval()
        for j, name in enumerate(PARAM_NAMES):
            x = self.samples[:, j]
            out["parameters"][name] = {"mean": float(x.mean()), "sd": float(x.std(ddof=1)) if len(x) > 1 else 0.0,
                                       "mode": kde_mode(x), "ci95": [float(ci[j, 0]), float(ci[j, 1])]}
        return out

    def write_csv(self, path: str | Path, comments: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            w = csv.writer(fh)
            w.writerow(("iter",) + PARAM_NAMES + ("log_post",))
            for it, row, lp in zip(self.iterations, self.samples, self.log_post):
                w.writerow([int(it)] + [repr(float(v)) for v in row] + [repr(float(lp))])

    @classmethod
    def read_csv(cls, path: str | Path) -> "PosteriorChain":
        rows = []
        with open(path) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        for row in csv.DictReader(lines):
            rows.append([float(row[k]) for k in ("iter",) + PARAM_NAMES + ("log_post",)])
        a = np.array(rows, dtype=float).reshape(-1, len(PARAM_NAMES) + 2)
        return cls(a[:, 1:7], a[:, 7], a[:, 0].astype(int), np.zeros(len(a), dtype=int), {}, {})


def kde_mode(x: np.ndarray, n_grid: int = 512) -> float:
    x = np.asarray(x, dtype=float)
    if len(x) < 3 or np.ptp(x) == 0:
        return float(np.median(x)) if len(x) else float("nan")
    kde = stats.gaussian_kde(x)
    grid = np.linspace(x.min(), x.max(), n_grid)
    return float(grid[np.argmax(kde(grid))])


class _Target:
    """Log target over log parameters, with cached emulator predictions."""

    def __init__(self, lik: EmulatedLikelihood | None, priors: Priors, mode: str, use_likelihood: bool,
                 theta_bounds=None):
        self.lik = lik
        self.bounds = None if theta_bounds is None else np.asarray(theta_bounds, dtype=float).reshape(3, 2)
        self.priors = priors
        self.mode = mode
        self.use_likelihood = use_likelihood and lik is not None
        self.bad = 0

    def preds(self, theta, j):
        """Emulator predictions used by the target: one pair, or all banks for the mixture."""
        if not self.use_likelihood:
            return None
        if not self.inside(theta):
            return None
        try:
            if self.mode == "mixture":
                pairs = [self.lik.predict(theta, k) for k in range(self.lik.n_banks)]
                out = (np.array([m for m, _ in pairs]), np.array([v for _, v in pairs]))
                ok = np.all(np.isfinite(out[0])) and np.all(np.isfinite(out[1]))
            else:
                out = self.lik.predict(theta, j)
                ok = np.all(np.isfinite(out[0])) and np.all(np.isfinite(out[1]))
        except (ValueError, np.linalg.LinAlgError):
            ok = False
        if not ok:
            self.bad += 1
            return None
        return out

    def inside(self, theta) -> bool:
        if self.bounds is None:
            return True
        return bool(np.all((theta >= self.bounds[:, 0]) & (theta <= self.bounds[:, 1])))

    def loglik(self, x, preds) -> float:
        if not self.use_likelihood:
            return 0.0
        if preds is None:
            return -np.inf
        if self.mode == "mixture":
            ll = self.lik.loglik_batch(preds[0], preds[1], *x[3:])
            return float(special.logsumexp(ll) - np.log(len(ll)))
        return self.lik.loglik_from_pred(preds[0], preds[1], *x[3:])

    def log_prior_natural(self, x) -> float:
        return log_prior(x, self.priors)

    def __call__(self, y, preds) -> tuple[float, float]:
        """(log target in log space, natural-scale log posterior)."""
        x = np.exp(y)
        if not self.inside(x[:3]):
            return -np.inf, -np.inf
        lp = self.log_prior_natural(x)
        if not np.isfinite(lp):
            return -np.inf, -np.inf
        ll = self.loglik(x, preds)
        return lp + ll + float(y.sum()), lp + ll


def _initial_state(target: _Target, priors: Priors, init) -> np.ndarray:
    if init is not None:
        x0 = init.as_array() if isinstance(init, ModelParams) else np.asarray(init, dtype=float)
        return np.log(x0)
    x0 = priors.medians()
    if target.use_likelihood:
        pts = target.lik.banks[0].design.reshape(-1, 3)
        x0[:3] = np.exp(np.log(pts).mean(axis=0))
    if not target.inside(x0[:3]):
        x0[:3] = target.bounds.mean(axis=1)
    y0 = np.log(x0)

    def f(y):
        v = target(y, target.preds(np.exp(y[:3]), 0))[0]
        return -v if np.isfinite(v) else 1e300

    res = optimize.minimize(f, y0, method="Nelder-Mead",
                            options={"maxiter": 3000, "xatol": 1e-4, "fatol": 1e-6})
    target.bad = 0
    return res.x if res.fun < f(y0) else y0


def _run_chain(lik, priors: Priors, config: MHConfig, seed, mode: str,
               init=None, proposal_cov: dict | None = None) -> PosteriorChain:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    # the draw-index stream is separate so that a single stored draw reproduces the fixed chain
    rng_j = np.random.default_rng(ss.spawn(1)[0])
    target = _Target(lik, priors, mode, config.use_likelihood, config.theta_bounds)
    n_e = lik.n_banks if (lik is not None and mode == "joint") else 1

    y = _initial_state(target, priors, init)
    j = 0
    preds = target.preds(np.exp(y[:3]), j)
    cur, cur_nat = target(y, preds)
    if not np.isfinite(cur):
        raise RuntimeError("initial state has zero posterior density")

    chol = {}
    for b, idx in BLOCKS.items():
        if proposal_cov and b in proposal_cov:
            chol[b] = np.linalg.cholesky(np.atleast_2d(proposal_cov[b]))
        else:
            chol[b] = config.init_scale * np.eye(len(idx))
    scale = {b: 1.0 for b in BLOCKS}
    adapt = proposal_cov is None and config.pilot_iter > 0

    n_total = (config.pilot_iter if adapt else 0) + config.n_iter
    start_main = n_total - config.n_iter
    keep_from = start_main + config.burn_in
    n_keep = max(0, (config.n_iter - config.burn_in) // config.thin)
    out = np.empty((n_keep, 6))
    out_lp = np.empty(n_keep)
    out_it = np.empty(n_keep, dtype=int)
    out_j = np.empty(n_keep, dtype=int)
    acc = {b: 0 for b in BLOCKS}
    acc_window = {b: 0 for b in BLOCKS}
    pilot_hist = []
    window = 200
    half_pilot = (start_main // 2) // window * window
    if half_pilot < 4 * window:
        half_pilot = -1
    k = 0

    for it in range(n_total):
        for b in BLOCK_ORDER:
            idx = BLOCKS[b]
            prop = y.copy()
            prop[list(idx)] += scale[b] * (chol[b] @ rng.standard_normal(len(idx)))
            if b == "theta":
                j_prop = int(rng_j.integers(n_e)) if n_e > 1 else j
                p_preds = target.preds(np.exp(prop[:3]), j_prop)
            else:
                j_prop, p_preds = j, preds
            new, new_nat = target(prop, p_preds)
            if np.log(rng.random()) < new - cur:
                y, cur, cur_nat, preds, j = prop, new, new_nat, p_preds, j_prop
                acc_window[b] += 1
                if it >= start_main:
                    acc[b] += 1
        if adapt and it < start_main:
            pilot_hist.append(y.copy())
            if (it + 1) % window == 0:
                lo, hi = config.target_accept
                for b in BLOCKS:
                    rate = acc_window[b] / window
                    if rate < lo or rate > hi:
                        scale[b] *= float(np.exp(np.clip(rate - 0.3, -0.3, 0.3) * 3))
                    acc_window[b] = 0
                # after half the pilot, switch to the empirical covariance of the pilot draws
                if it + 1 == half_pilot:
                    h = np.array(pilot_hist[len(pilot_hist) // 2:])
                    for b, idx in BLOCKS.items():
                        d = len(idx)
                        c = np.atleast_2d(np.cov(h[:, list(idx)], rowvar=False))
                        c += 1e-10 * np.eye(d)
                        if np.all(np.isfinite(c)) and np.linalg.eigvalsh(c).min() > 0:
                            chol[b] = np.linalg.cholesky(c * 2.38**2 / d)
                            scale[b] = 1.0
        if it >= keep_from and (it - keep_from) % config.thin == config.thin - 1 and k < n_keep:
            out[k] = np.exp(y)
            out_lp[k] = cur_nat
            out_it[k] = it - start_main + 1
            out_j[k] = j
            k += 1

    n_main = max(1, config.n_iter)
    acceptance = {b: acc[b] / n_main for b in BLOCK_ORDER}
    covs = {b: (scale[b] ** 2) * (chol[b] @ chol[b].T) for b in BLOCKS}
    for b, rate in acceptance.items():
        if rate < 0.1 or rate > 0.6:
            warnings.warn(f"block {b} acceptance {rate:.3f} outside [0.1, 0.6]", RuntimeWarning)
    if target.bad:
        log.warning("%d proposals rejected because emulator prediction failed", target.bad)
    return PosteriorChain(out[:k], out_lp[:k], out_it[:k], out_j[:k], acceptance,
                          {b: c.tolist() for b, c in covs.items()}, target.bad, mode,
                          {"config": asdict(config), "seed": seed if isinstance(seed, int) else None})


def mh_sample(data: SiteData | None, emulators, priors: Priors = Priors(),
              config: MHConfig = MHConfig(), seed=None, init=None,
              proposal_cov: dict | None = None) -> PosteriorChain:
    """Block random-walk MH with emulator hyperparameters fixed at their point values.

    ``emulators`` is a list of :class:`SiteEmulator`, an :class:`EmulatorBank`
    or a prepared :class:`EmulatedLikelihood`.  Proposals are correlated
    normal random walks on log parameters, tuned during an adaptive pilot
    and then frozen.
    """
    lik = _as_likelihood(data, emulators, uncertain=False)
    return _run_chain(lik, priors, config, seed, "fixed", init, proposal_cov)


def mh_sample_hyper_uncertain(data: SiteData | None, emulators, priors: Priors = Priors(),
                              config: MHConfig = MHConfig(), seed=None, init=None,
                              proposal_cov: dict | None = None, n_components: int | None = None,
                              mixture: bool = False) -> PosteriorChain:
    """MCMC that integrates over emulator hyperparameter uncertainty.

    The default joint scheme augments the state with a draw index ``j``
    shared by all sites; each theta proposal also draws ``j`` uniformly, and
    the pair is accepted with the joint ratio.  With ``mixture=True`` the
    likelihood is instead the explicit equally weighted mixture over ``j``.
    Both target the same marginal for the model parameters.
    """
    lik = _as_likelihood(data, emulators, uncertain=True, n_components=n_components)
    return _run_chain(lik, priors, config, seed, "mixture" if mixture else "joint", init, proposal_cov)


def _as_likelihood(data, emulators, uncertain: bool, n_components=None):
    if emulators is None:
        return None
    if isinstance(emulators, EmulatedLikelihood):
        return emulators
    if isinstance(emulators, EmulatorBank) or (
            isinstance(emulators, (list, tuple)) and emulators and isinstance(emulators[0], EmulatorBank)):
        return EmulatedLikelihood(data, emulators)
    return EmulatedLikelihood.from_emulators(data, emulators, n_components, uncertain)


# ---------------------------------------------------------------------------
# posterior spatial process and predictive

def _sym_sqrt_draw(rng, cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((cov + cov.T) / 2)
    return v @ (np.sqrt(np.clip(w, 0.0, None)) * rng.standard_normal(len(w)))


def conditional_moments(p: ModelParams | Sequence[float], lik: EmulatedLikelihood, j: int = 0):
    """Moments of zeta and of replicate dates given the data and one parameter value.

    Returns ``(mu_star, V_star, pred_mean, pred_cov)`` with
    ``mu_star = K (K + S)^-1 (t - mu)``, ``V_star = K - K (K + S)^-1 K``,
    ``pred_mean = mu + mu_star`` and ``pred_cov = S + V_star`` where
    ``S = diag(V_i + sigma_i^2 + sigma^2)``.
    """
    x = p.as_array() if isinstance(p, ModelParams) else np.asarray(p, dtype=float)
    mu, var = lik.predict(x[:3], j)
    s_diag = var + lik.s2 + x[3] ** 2
    K = zeta_cov(lik.d2, x[4], x[5])
    C = K.copy()
    C[np.diag_indices(lik.n)] += s_diag
    cf = linalg.cho_factor(C, lower=True)
    mu_star = K @ linalg.cho_solve(cf, lik.t - mu)
    V_star = K - K @ linalg.cho_solve(cf, K)
    V_star = (V_star + V_star.T) / 2
    pred_cov = V_star.copy()
    pred_cov[np.diag_indices(lik.n)] += s_diag
    return mu_star, V_star, mu + mu_star, pred_cov


@dataclass(eq=False)
class ZetaDraws:
    draws: np.ndarray       # (k, n) one zeta realisation per posterior sample
    means: np.ndarray       # (k, n) conditional means
    variances: np.ndarray   # (k, n) conditional variances

    def summary(self):
        """Posterior mean and sd per site, combining within- and between-sample variation."""
        m = self.means.mean(axis=0)
        v = self.variances.mean(axis=0) + self.means.var(axis=0)
        return m, np.sqrt(v)


def _subsample(n: int, max_draws: int | None) -> np.ndarray:
    if max_draws is None or max_draws >= n:
        return np.arange(n)
    return np.linspace(0, n - 1, max_draws).round().astype(int)


def posterior_zeta(chain: PosteriorChain, data: SiteData, emulators, seed=None,
                   max_draws: int | None = None) -> ZetaDraws:
    lik = _as_likelihood(data, emulators, uncertain=chain.mode != "fixed")
    rng = np.random.default_rng(seed)
    idx = _subsample(len(chain), max_draws)
    draws = np.empty((len(idx), lik.n))
    means = np.empty_like(draws)
    vars_ = np.empty_like(draws)
    for r, k in enumerate(idx):
        j = int(chain.hyper_index[k]) if lik.n_banks > 1 else 0
        mu_star, V_star, _, _ = conditional_moments(chain.samples[k], lik, j)
        means[r] = mu_star
        vars_[r] = np.clip(np.diag(V_star), 0.0, None)
        draws[r] = mu_star + _sym_sqrt_draw(rng, V_star)
    return ZetaDraws(draws, means, vars_)


@dataclass(eq=False)
class PredictiveDraws:
    site_ids: tuple[str, ...]
    draws: np.ndarray        # (k, n)
    means: np.ndarray        # (k, n) conditional predictive means
    variances: np.ndarray    # (k, n) conditional predictive variances

    def summary(self) -> dict:
        lo, hi = np.quantile(self.draws, [0.025, 0.975], axis=0)
        return {"mean": self.draws.mean(axis=0), "sd": self.draws.std(axis=0, ddof=1) if len(self.draws) > 1
                else np.zeros(self.draws.shape[1]), "lo95": lo, "hi95": hi}

    def density(self, site: int, grid: np.ndarray) -> np.ndarray:
        """Predictive density at ``grid`` as the equally weighted normal mixture over samples."""
        m = self.means[:, site][:, None]
        s = np.sqrt(np.maximum(self.variances[:, site], 1e-300))[:, None]
        return stats.norm.pdf(grid[None, :], m, s).mean(axis=0)

    def coverage(self, t: np.ndarray) -> float:
        s = self.summary()
        return float(np.mean((t >= s["lo95"]) & (t <= s["hi95"])))


def predictive(chain: PosteriorChain, data: SiteData, emulators, seed=None,
               max_draws: int | None = None) -> PredictiveDraws:
    lik = _as_likelihood(data, emulators, uncertain=chain.mode != "fixed")
    rng = np.random.default_rng(seed)
    idx = _subsample(len(chain), max_draws)
    draws = np.empty((len(idx), lik.n))
    means = np.empty_like(draws)
    vars_ = np.empty_like(draws)
    for r, k in enumerate(idx):
        j = int(chain.hyper_index[k]) if lik.n_banks > 1 else 0
        _, _, m, C = conditional_moments(chain.samples[k], lik, j)
        means[r] = m
        vars_[r] = np.clip(np.diag(C), 0.0, None)
        draws[r] = m + _sym_sqrt_draw(rng, C)
    return PredictiveDraws(tuple(data.site_ids), draws, means, vars_)


def write_summary(path: str | Path, chain: PosteriorChain, extra: dict | None = None) -> None:
    d = chain.summary()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
