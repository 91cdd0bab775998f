"""Parametric baseline hazard families.

Each family provides the hazard h0(t), the cumulative hazard H0(t), a
numerically stable log-hazard, and a bijection to an unconstrained
parameter vector (positive parameters go through log, the lognormal
location passes through unchanged) so that downstream optimizers can
work on all of R^b.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr
from scipy.stats import norm

__all__ = [
    "BaselineFamily",
    "Exponential",
    "Weibull",
    "Gompertz",
    "Lognormal",
    "FAMILY_NAMES",
    "family_from_name",
    "from_unconstrained",
    "default_init",
]


def _check_positive_times(t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("hazard requires t > 0")
    return t


def _check_nonnegative_times(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("cumulative hazard requires t >= 0")
    return t


def _require_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite {what}; use the log-domain routine")
    return value


class BaselineFamily:
    """Common interface for the parametric baselines."""

    name: str
    n_params: int

    def hazard(self, t):
        """h0(t) on the natural scale. Raises if the result overflows."""
        return _require_finite(np.exp(self.log_hazard(t)), f"{self.name} hazard")

    def log_hazard(self, t):
        raise NotImplementedError

    def cum_hazard(self, t):
        raise NotImplementedError

    def to_unconstrained(self) -> np.ndarray:
        raise NotImplementedError

    def natural_params(self) -> np.ndarray:
        raise NotImplementedError

    def param_names(self) -> tuple:
        raise NotImplementedError

    def log_scale_mask(self) -> np.ndarray:
        """True for coordinates that are log-mapped in the unconstrained vector."""
        return np.ones(self.n_params, dtype=bool)


@dataclass(frozen=True)
class Exponential(BaselineFamily):
    rate: float

    name = "exponential"
    n_params = 1

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("exponential rate must be positive")

    def log_hazard(self, t):
        t = _check_positive_times(t)
        return np.full_like(t, np.log(self.rate))

    def cum_hazard(self, t):
        t = _check_nonnegative_times(t)
        return _require_finite(self.rate * t, "exponential cumulative hazard")

    def to_unconstrained(self):
        return np.array([np.log(self.rate)])

    def natural_params(self):
        return np.array([self.rate])

    def param_names(self):
        return ("lambda",)


@dataclass(frozen=True)
class Weibull(BaselineFamily):
    scale: float
    shape: float

    name = "weibull"
    n_params = 2

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0):
            raise ValueError("weibull parameters must be positive")

    def log_hazard(self, t):
        t = _check_positive_times(t)
        return np.log(self.scale) + np.log(self.shape) + (self.shape - 1.0) * np.log(t)

    def cum_hazard(self, t):
        t = _check_nonnegative_times(t)
        return _require_finite(self.scale * t**self.shape, "weibull cumulative hazard")

    def to_unconstrained(self):
        return np.log([self.scale, self.shape])

    def natural_params(self):
        return np.array([self.scale, self.shape])

    def param_names(self):
        return ("lambda", "rho")


@dataclass(frozen=True)
class Gompertz(BaselineFamily):
    scale: float
    shape: float

    name = "gompertz"
    n_params = 2

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0):
            raise ValueError("gompertz parameters must be positive")

    def log_hazard(self, t):
        t = _check_positive_times(t)
        return np.log(self.scale) + self.shape * t

    def cum_hazard(self, t):
        t = _check_nonnegative_times(t)
        return _require_finite(
            self.scale / self.shape * np.expm1(self.shape * t),
            "gompertz cumulative hazard",
        )

    def to_unconstrained(self):
        return np.log([self.scale, self.shape])

    def natural_params(self):
        return np.array([self.scale, self.shape])

    def param_names(self):
        return ("lambda", "rho")


@dataclass(frozen=True)
class Lognormal(BaselineFamily):
    location: float
    scale: float

    name = "lognormal"
    n_params = 2

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("lognormal scale must be positive")

    def _z(self, t):
        return (np.log(t) - self.location) / self.scale

    def log_hazard(self, t):
        # log phi(z) - log(nu t) - log(1 - Phi(z)); the survival log uses
        # log_ndtr(-z), which stays finite deep into the right tail where a
        # naive 1 - Phi(z) would underflow.
        t = _check_positive_times(t)
        z = self._z(t)
        return norm.logpdf(z) - np.log(self.scale) - np.log(t) - log_ndtr(-z)

    def cum_hazard(self, t):
        t = _check_nonnegative_times(t)
        with np.errstate(divide="ignore"):
            z = np.where(t > 0, self._z(np.where(t > 0, t, 1.0)), -np.inf)
        return -log_ndtr(-z)

    def to_unconstrained(self):
        return np.array([self.location, np.log(self.scale)])

    def natural_params(self):
        return np.array([self.location, self.scale])

    def param_names(self):
        return ("eta", "nu")

    def log_scale_mask(self):
        return np.array([False, True])


FAMILY_NAMES = ("exponential", "weibull", "gompertz", "lognormal")

_CONSTRUCTORS = {
    "exponential": (Exponential, 1),
    "weibull": (Weibull, 2),
    "gompertz": (Gompertz, 2),
    "lognormal": (Lognormal, 2),
}


def family_from_name(name: str, natural: np.ndarray) -> BaselineFamily:
    """Build a family from its tag and natural-scale parameter values."""
    try:
        cls, b = _CONSTRUCTORS[name]
    except KeyError:
        raise ValueError(f"unknown baseline family {name!r}") from None
    natural = np.asarray(natural, dtype=float)
    if natural.shape != (b,):
        raise ValueError(f"{name} expects {b} parameters, got {natural.shape}")
    return cls(*natural)


def from_unconstrained(name: str, vector: np.ndarray) -> BaselineFamily:
    """Inverse of ``to_unconstrained`` for the given family tag."""
    try:
        cls, b = _CONSTRUCTORS[name]
    except KeyError:
        raise ValueError(f"unknown baseline family {name!r}") from None
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (b,):
        raise ValueError(f"{name} expects {b} unconstrained coordinates, got {vector.shape}")
    if name == "lognormal":
        return Lognormal(vector[0], np.exp(vector[1]))
    return cls(*np.exp(vector))


def n_baseline_params(name: str) -> int:
    try:
        return _CONSTRUCTORS[name][1]
    except KeyError:
        raise ValueError(f"unknown baseline family {name!r}") from None


def default_init(name: str, times, events) -> BaselineFamily:
    """Cheap moment-based starting values for maximum likelihood fits."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    rate = max(events.sum(), 1.0) / times.sum()
    if name == "exponential":
        return Exponential(rate)
    if name == "weibull":
        return Weibull(rate, 1.0)
    if name == "gompertz":
        return Gompertz(rate, 1.0)
    if name == "lognormal":
        log_event_times = np.log(times[events.astype(bool)])
        if log_event_times.size == 0:
            log_event_times = np.log(times)
        loc = float(np.mean(log_event_times))
        scale = float(np.std(log_event_times))
        return Lognormal(loc, scale if scale > 1e-3 else 1.0)
    raise ValueError(f"unknown baseline family {name!r}")
