"""Gamma frailty calculus in the log domain.

The frailty is Gamma with mean fixed at 1 and variance ``theta``. Its
Laplace transform is L(s; theta) = (1 + theta*s)^(-1/theta), and the log
of the (sign-corrected) q-th derivative has the closed form

    log[(-1)^q L^(q)(s)] = sum_{l=0}^{q-1} log(1 + l*theta)
                           - (1/theta + q) * log(1 + theta*s).

Below ``THETA_MIN`` the transform is replaced by its degenerate limit
exp(-s) (frailty identically 1), which keeps likelihood code finite and
turns the component into a frailty-free proportional-hazards model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import gamma as gamma_dist

__all__ = ["THETA_MIN", "log_laplace_deriv", "posterior_frailty", "FrailtyPosterior"]

THETA_MIN = 1e-6


def log_laplace_deriv(theta: float, q: int, s: float) -> float:
    """log[(-1)^q L^(q)(s; theta)] for the mean-one Gamma frailty.

    ``q`` is the number of events in a (group, cluster) cell and ``s`` the
    cell's cumulative-hazard sum, so both are nonnegative.
    """
    if q < 0 or int(q) != q:
        raise ValueError("q must be a nonnegative integer")
    if s < 0:
        raise ValueError("s must be nonnegative")
    if theta <= THETA_MIN:
        # Degenerate limit: frailty concentrates at 1, L^(q)(s) -> (-1)^q e^{-s}.
        return -float(s)
    q = int(q)
    head = np.sum(np.log1p(theta * np.arange(q))) if q else 0.0
    return float(head - (1.0 / theta + q) * np.log1p(theta * s))


@dataclass(frozen=True)
class FrailtyPosterior:
    mean: float
    variance: float
    ci_low: float
    ci_high: float


def posterior_frailty(theta: float, d: int, s: float, level: float = 0.95) -> FrailtyPosterior:
    """Posterior of a cell's frailty given d events and cumulative hazard s.

    Conjugacy gives Gamma(shape 1/theta + d, rate 1/theta + s); the
    interval is the central ``level`` quantile range of that posterior.
    """
    if d < 0 or int(d) != d:
        raise ValueError("d must be a nonnegative integer")
    if s < 0:
        raise ValueError("s must be nonnegative")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    if theta <= THETA_MIN:
        return FrailtyPosterior(1.0, 0.0, 1.0, 1.0)
    shape = 1.0 / theta + d
    rate = 1.0 / theta + s
    mean = (1.0 + theta * d) / (1.0 + theta * s)
    variance = theta * (1.0 + theta * d) / (1.0 + theta * s) ** 2
    alpha = (1.0 - level) / 2.0
    lo, hi = gamma_dist.ppf([alpha, 1.0 - alpha], a=shape, scale=1.0 / rate)
    return FrailtyPosterior(float(mean), float(variance), float(lo), float(hi))
