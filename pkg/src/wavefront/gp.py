"""Gaussian-process core: ARD Gaussian kernel, OLS mean fits, exact conditioning.

The kernel follows ``k(x, x') = a^2 exp(-sum_j (x_j - x'_j)^2 / r_j^2)`` with no
factor of two in the denominator.  All solves go through a Cholesky factor of
the training covariance plus a jitter of ``1e-8 a^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

LOG_2PI = float(np.log(2 * np.pi))
NUGGET_REL = 1e-8


class FactorizationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KernelParams:
    amplitude: float
    length_scales: tuple[float, ...]

    def __post_init__(self):
        r = tuple(float(v) for v in np.atleast_1d(self.length_scales))
        object.__setattr__(self, "length_scales", r)
        object.__setattr__(self, "amplitude", float(self.amplitude))
        if not self.amplitude > 0:
            raise ValueError("kernel amplitude must be positive")
        if not all(v > 0 for v in r):
            raise ValueError("length scales must be positive")


def _as_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x.reshape(-1, 1) if dim == 1 else x.reshape(1, -1)
    return x


def gauss_kernel(x1, x2, params: KernelParams) -> np.ndarray:
    """Covariance matrix between the rows of ``x1`` and ``x2``.

    Two single points (1-d vectors for multi-dimensional inputs, scalars for
    1-d inputs) give a float.
    """
    dim = len(params.length_scales)
    single = (np.ndim(x1) <= 1 and np.ndim(x2) <= 1
              and (dim > 1 or (np.size(x1) == 1 and np.size(x2) == 1)))
    a = _as_points(x1, dim)
    b = _as_points(x2, dim)
    # exact differences avoid cancellation for nearby points
    diff = a[:, None, :] - b[None, :, :]
    d2 = ((diff / np.asarray(params.length_scales)) ** 2).sum(-1)
    k = params.amplitude**2 * np.exp(-d2)
    return float(k[0, 0]) if single else k


def ols(basis: np.ndarray, targets: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Least-squares coefficients via a column-pivoted QR decomposition."""
    X = np.asarray(basis, dtype=float)
    y = np.asarray(targets, dtype=float)
    n, k = X.shape
    if n < k:
        raise ValueError(f"need at least as many rows ({n}) as columns ({k})")
    q, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int((diag > rtol * diag[0]).sum()) if diag.size and diag[0] > 0 else 0
    if rank < k:
        bad = sorted(int(c) for c in piv[rank:])
        raise np.linalg.LinAlgError(f"rank-deficient basis: columns {bad} are collinear with the others")
    coef = linalg.solve_triangular(r, q.T @ y)
    out = np.empty(k)
    out[piv] = coef
    return out


def cholesky(K: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        eig = float(np.linalg.eigvalsh((K + K.T) / 2).min())
        raise FactorizationError(f"covariance not positive definite (smallest eigenvalue ~ {eig:.3g})") from None


@dataclass(frozen=True, eq=False)
class Conditioning:
    """Training set for one GP plus its cached Cholesky factor.

    ``mean`` holds the prior mean at the training inputs; ``mean_fn`` maps
    query inputs to prior means (defaults to zero).  ``noise`` is extra
    per-point variance added on top of the fixed jitter.
    """

    inputs: np.ndarray
    targets: np.ndarray
    params: KernelParams
    mean: np.ndarray | None = None
    mean_fn: object = None
    noise: np.ndarray | float = 0.0
    chol: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.targets, dtype=float)
        m = np.zeros_like(y) if self.mean is None else np.asarray(self.mean, dtype=float)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "mean", m)
        K = gauss_kernel(X, X, self.params)
        K[np.diag_indices_from(K)] += NUGGET_REL * self.params.amplitude**2 + self.noise
        L = cholesky(K)
        object.__setattr__(self, "chol", L)
        object.__setattr__(self, "weights", linalg.cho_solve((L, True), y - m))

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def prior_mean(self, query: np.ndarray) -> np.ndarray:
        if self.mean_fn is None:
            return np.zeros(query.shape[0])
        return np.asarray(self.mean_fn(query), dtype=float)

    def condition(self, query, full_cov: bool = True):
        """Posterior mean and covariance (or marginal variances) at ``query``."""
        Q = np.asarray(query, dtype=float)
        if Q.ndim == 1:
            Q = Q.reshape(-1, self.inputs.shape[1])
        Ks = gauss_kernel(Q, self.inputs, self.params)
        mu = self.prior_mean(Q) + Ks @ self.weights
        v = linalg.solve_triangular(self.chol, Ks.T, lower=True)
        if full_cov:
            V = gauss_kernel(Q, Q, self.params) - v.T @ v
            V = (V + V.T) / 2
            d = np.diag(V).copy()
            if np.any(d < -1e-8 * self.params.amplitude**2):
                raise FactorizationError(f"negative predictive variance {d.min():.3g}")
            V[np.diag_indices_from(V)] = np.maximum(d, 0.0)
            return mu, V
        var = self.params.amplitude**2 - (v * v).sum(0)
        if np.any(var < -1e-8 * self.params.amplitude**2):
            raise FactorizationError(f"negative predictive variance {var.min():.3g}")
        return mu, np.maximum(var, 0.0)

    def loglik(self) -> float:
        """Log marginal density of the targets, including the 2*pi constant."""
        resid = self.targets - self.mean
        alpha = linalg.solve_triangular(self.chol, resid, lower=True)
        return float(-0.5 * alpha @ alpha - np.log(np.diag(self.chol)).sum() - 0.5 * self.n * LOG_2PI)


def condition(c: Conditioning, query, full_cov: bool = True):
    return c.condition(query, full_cov)


def loglik_gp(c: Conditioning) -> float:
    return c.loglik()


def mvn_logpdf_chol(resid: np.ndarray, L: np.ndarray) -> float:
    alpha = linalg.solve_triangular(L, resid, lower=True)
    return float(-0.5 * alpha @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(resid) * LOG_2PI)
