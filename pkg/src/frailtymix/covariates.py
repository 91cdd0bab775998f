"""Cluster-wise covariate densities and their closed-form MLEs.

Continuous marginal covariates get a multivariate Gaussian per cluster;
categorical ones a product of independent multinomials. Both are fitted
by plain maximum likelihood on the cluster's hard-assigned rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "GaussianParams",
    "MultinomialParams",
    "log_gaussian_density",
    "log_multinomial_density",
    "mle_gaussian",
    "mle_multinomial",
    "PROB_FLOOR",
]

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class GaussianParams:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class MultinomialParams:
    """One probability vector per categorical variable."""

    probs: tuple

    def __post_init__(self):
        probs = tuple(np.asarray(p, dtype=float) for p in self.probs)
        for p in probs:
            if abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("multinomial probabilities must sum to 1")
            if np.any(p < PROB_FLOOR * (1 - 1e-9)):
                raise ValueError("multinomial probabilities below floor")
        object.__setattr__(self, "probs", probs)


def log_gaussian_density(u, params: GaussianParams):
    """Multivariate normal log-density via a Cholesky factorization.

    Accepts a single vector (p,) or a matrix of rows (n, p).
    """
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    rows = np.atleast_2d(u)
    p = params.mean.size
    if rows.shape[1] != p:
        raise ValueError("dimension mismatch between u and the Gaussian parameters")
    try:
        factor = cho_factor(params.cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    diff = rows - params.mean
    maha = np.einsum("ij,ij->i", diff, cho_solve(factor, diff.T).T)
    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    out = -0.5 * (p * np.log(2.0 * np.pi) + log_det + maha)
    return float(out[0]) if single else out


def log_multinomial_density(v, params: MultinomialParams):
    """Sum of per-variable log-probabilities for integer category codes.

    Accepts a single code tuple (q,) or a matrix of codes (n, q).
    """
    v = np.asarray(v, dtype=np.intp)
    single = v.ndim == 1
    rows = np.atleast_2d(v)
    if rows.shape[1] != len(params.probs):
        raise ValueError("dimension mismatch between v and the multinomial parameters")
    total = np.zeros(rows.shape[0])
    for r, p in enumerate(params.probs):
        codes = rows[:, r]
        if np.any((codes < 0) | (codes >= p.size)):
            raise ValueError(f"undeclared category code in variable {r}")
        total += np.log(p[codes])
    return float(total[0]) if single else total


def mle_gaussian(rows, ridge: float = 1e-8) -> GaussianParams:
    """Sample mean and MLE (n-divisor) covariance, ridge-regularized when
    the smallest eigenvalue collapses."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    n, p = rows.shape
    if n < p + 1:
        raise ValueError(f"need at least {p + 1} rows for a {p}-dimensional Gaussian MLE")
    mean = rows.mean(axis=0)
    diff = rows - mean
    cov = diff.T @ diff / n
    smallest = np.linalg.eigvalsh(cov)[0]
    if smallest < 1e-10:
        bump = ridge * max(np.trace(cov) / p, 1.0)
        cov = cov + bump * np.eye(p)
    return GaussianParams(mean, cov)


def mle_multinomial(rows, n_categories) -> MultinomialParams:
    """Relative category frequencies per variable, floored and renormalized."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.intp))
    if rows.shape[0] == 0:
        raise ValueError("empty cluster: cannot fit multinomial parameters")
    probs = []
    for r, k in enumerate(n_categories):
        counts = np.bincount(rows[:, r], minlength=k).astype(float)
        p = counts / counts.sum()
        p = np.maximum(p, PROB_FLOOR)
        probs.append(p / p.sum())
    return MultinomialParams(tuple(probs))
