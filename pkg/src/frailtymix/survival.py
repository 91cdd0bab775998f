"""Per-cluster shared-frailty survival likelihood and its maximization.

The cluster log-likelihood over groups j is

    sum_j [ sum_{i in cell j} delta_i (log h0(y_i) + x_i'beta)
            + log[(-1)^{d_j} L^{(d_j)}(s_j; theta)] ],

with d_j the cell's event count and s_j = sum_i H0(y_i) exp(x_i'beta).
Maximization runs on unconstrained coordinates (beta free, log-mapped
positive baseline parameters, log theta) with central finite-difference
gradients, as a quasi-Newton (BFGS) iteration. The covariance of the
unconstrained estimate is the inverse negative finite-difference Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.stats import norm

from . import baselines
from .frailty import THETA_MIN, log_laplace_deriv

__all__ = [
    "SurvivalParams",
    "SurvivalFitResult",
    "WaldRow",
    "group_cluster_loglik",
    "cluster_survival_loglik",
    "obs_marginal_logdensity",
    "fit_survival_mle",
    "wald_tests",
    "min_cluster_size",
]

MAX_ITER = 500
GRAD_TOL = 1e-6
LOGLIK_RTOL = 1e-9
FD_STEP = 1e-5


@dataclass(frozen=True)
class SurvivalParams:
    beta: np.ndarray
    baseline: baselines.BaselineFamily
    theta: float

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite")
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        object.__setattr__(self, "beta", beta)

    def to_unconstrained(self) -> np.ndarray:
        return np.concatenate(
            [self.beta, self.baseline.to_unconstrained(), [np.log(self.theta)]]
        )

    @staticmethod
    def from_unconstrained(vector, family_name: str, n_covariates: int) -> "SurvivalParams":
        vector = np.asarray(vector, dtype=float)
        b = baselines.n_baseline_params(family_name)
        if vector.size != n_covariates + b + 1:
            raise ValueError("unconstrained vector has wrong length")
        beta = vector[:n_covariates]
        baseline = baselines.from_unconstrained(family_name, vector[n_covariates:-1])
        return SurvivalParams(beta, baseline, float(np.exp(vector[-1])))

    def coordinate_names(self, x_names=None) -> tuple:
        m = self.beta.size
        betas = tuple(x_names) if x_names else tuple(f"beta{k + 1}" for k in range(m))
        return betas + self.baseline.param_names() + ("theta",)

    def natural_params(self) -> np.ndarray:
        return np.concatenate([self.beta, self.baseline.natural_params(), [self.theta]])

    def log_scale_mask(self) -> np.ndarray:
        """True where the unconstrained coordinate is the log of the natural one."""
        return np.concatenate(
            [
                np.zeros(self.beta.size, dtype=bool),
                self.baseline.log_scale_mask(),
                [True],
            ]
        )


@dataclass(frozen=True)
class SurvivalFitResult:
    params: SurvivalParams
    loglik: float
    covariance: np.ndarray
    converged: bool
    iterations: int
    message: str = ""


def min_cluster_size(n_covariates: int, family_name: str) -> int:
    """Smallest cluster for which the survival MLE is attempted."""
    return n_covariates + baselines.n_baseline_params(family_name) + 1 + 5


def group_cluster_loglik(y, delta, X, params: SurvivalParams) -> float:
    """Integrated-frailty log-likelihood of one (group, cluster) cell."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        return 0.0
    delta = np.asarray(delta, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    lp = X @ params.beta if params.beta.size else np.zeros(y.size)
    if not np.all(np.isfinite(lp)):
        raise FloatingPointError("non-finite covariate contribution")
    d = float(delta.sum())
    s = float(np.sum(params.baseline.cum_hazard(y) * np.exp(lp)))
    event_term = float(np.sum(delta * (params.baseline.log_hazard(y) + lp)))
    return event_term + log_laplace_deriv(params.theta, int(round(d)), s)


def cluster_survival_loglik(y, delta, X, group_index, params: SurvivalParams) -> float:
    """Sum of group_cluster_loglik over the cluster's populated groups."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        return 0.0
    delta = np.asarray(delta, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    group_index = np.asarray(group_index, dtype=np.intp)
    lp = X @ params.beta if params.beta.size else np.zeros(y.size)
    if not np.all(np.isfinite(lp)):
        raise FloatingPointError("non-finite covariate contribution")
    event_term = float(np.sum(delta * (params.baseline.log_hazard(y) + lp)))
    hexp = params.baseline.cum_hazard(y) * np.exp(lp)
    n_groups = int(group_index.max()) + 1
    d = np.bincount(group_index, weights=delta, minlength=n_groups)
    s = np.bincount(group_index, weights=hexp, minlength=n_groups)
    theta = params.theta
    if theta <= THETA_MIN:
        return event_term - float(s.sum())
    d_int = np.rint(d).astype(np.intp)
    head = 0.0
    for dj in d_int[d_int > 0]:
        head += np.sum(np.log1p(theta * np.arange(dj)))
    tail = -np.sum((1.0 / theta + d_int) * np.log1p(theta * s))
    return event_term + float(head + tail)


def obs_marginal_logdensity(y, delta, X, params: SurvivalParams):
    """Per-observation integrated-frailty log-density (frailty integrated
    out observation by observation, matching the E-step factorization)."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 0
    y = np.atleast_1d(y)
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if single else X.reshape(y.size, -1)
    lp = X @ params.beta if params.beta.size else np.zeros(y.size)
    s = params.baseline.cum_hazard(y) * np.exp(lp)
    theta = params.theta
    if theta <= THETA_MIN:
        lap = -s
    else:
        lap = -(1.0 / theta + delta) * np.log1p(theta * s)
    out = delta * (params.baseline.log_hazard(y) + lp) + lap
    return float(out[0]) if single else out


def _make_objective(y, delta, X, group_index, family_name, n_covariates):
    """Negative cluster log-likelihood over unconstrained coordinates,
    with precomputed per-group structure for speed."""
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    group_index = np.asarray(group_index, dtype=np.intp)
    n_groups = int(group_index.max()) + 1
    d = np.bincount(group_index, weights=delta, minlength=n_groups).astype(np.intp)
    head_coeff = np.arange(int(d.max())) if d.max() else np.zeros(0)

    def negloglik(vector):
        params = SurvivalParams.from_unconstrained(vector, family_name, n_covariates)
        lp = X @ params.beta if n_covariates else np.zeros(y.size)
        with np.errstate(over="raise", invalid="raise"):
            try:
                event_term = np.sum(delta * (params.baseline.log_hazard(y) + lp))
                hexp = params.baseline.cum_hazard(y) * np.exp(lp)
            except FloatingPointError:
                return np.inf
        s = np.bincount(group_index, weights=hexp, minlength=n_groups)
        theta = params.theta
        if theta <= THETA_MIN:
            lap = -s.sum()
        else:
            head = sum(
                np.sum(np.log1p(theta * head_coeff[:dj])) for dj in d if dj > 0
            )
            lap = head - np.sum((1.0 / theta + d) * np.log1p(theta * s))
        value = event_term + lap
        return -value if np.isfinite(value) else np.inf

    return negloglik


def _fd_gradient(fun, x, step=FD_STEP):
    """Central finite differences with coordinate-relative step."""
    grad = np.empty_like(x)
    for k in range(x.size):
        h = step * (1.0 + abs(x[k]))
        up, down = x.copy(), x.copy()
        up[k] += h
        down[k] -= h
        grad[k] = (fun(up) - fun(down)) / (2.0 * h)
    return grad


def _fd_hessian(fun, x, step=1e-4):
    n = x.size
    hess = np.empty((n, n))
    steps = step * (1.0 + np.abs(x))
    f0 = fun(x)
    for i in range(n):
        for j in range(i, n):
            if i == j:
                up, down = x.copy(), x.copy()
                up[i] += steps[i]
                down[i] -= steps[i]
                hess[i, i] = (fun(up) - 2.0 * f0 + fun(down)) / steps[i] ** 2
            else:
                pp, pm, mp, mm = x.copy(), x.copy(), x.copy(), x.copy()
                pp[[i, j]] += [steps[i], steps[j]]
                pm[i] += steps[i]
                pm[j] -= steps[j]
                mp[i] -= steps[i]
                mp[j] += steps[j]
                mm[[i, j]] -= [steps[i], steps[j]]
                hess[i, j] = hess[j, i] = (
                    fun(pp) - fun(pm) - fun(mp) + fun(mm)
                ) / (4.0 * steps[i] * steps[j])
    return hess


def _default_start(y, delta, X, family_name, n_covariates) -> SurvivalParams:
    baseline = baselines.default_init(family_name, y, delta)
    return SurvivalParams(np.zeros(n_covariates), baseline, 0.1)


def fit_survival_mle(
    y,
    delta,
    X,
    group_index,
    family_name: str,
    init: SurvivalParams | None = None,
    compute_covariance: bool = True,
) -> SurvivalFitResult:
    """Maximize the cluster survival log-likelihood by BFGS with
    finite-difference gradients; deterministic given (data, family, init)."""
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != y.size:
        X = X.reshape(y.size, -1)
    m = X.shape[1]
    floor = min_cluster_size(m, family_name)
    if y.size < floor:
        raise ValueError(f"cluster too small: {y.size} < {floor} observations")
    if delta.sum() < 1:
        raise ValueError("cluster has no events")
    if m and np.linalg.matrix_rank(X) < m:
        raise ValueError("regression matrix is rank deficient on this cluster")

    negloglik = _make_objective(y, delta, X, group_index, family_name, m)
    x0 = (init or _default_start(y, delta, X, family_name, m)).to_unconstrained()

    trace = [negloglik(x0)]
    res = optimize.minimize(
        negloglik,
        x0,
        jac=lambda x: _fd_gradient(negloglik, x),
        method="BFGS",
        callback=lambda xk: trace.append(negloglik(xk)),
        options={"gtol": GRAD_TOL, "maxiter": MAX_ITER},
    )
    grad = _fd_gradient(negloglik, res.x)
    converged = bool(np.max(np.abs(grad)) < GRAD_TOL) or bool(res.success)
    if not converged and len(trace) >= 2:
        converged = abs(trace[-1] - trace[-2]) <= LOGLIK_RTOL * max(abs(trace[-1]), 1.0)

    covariance = np.full((x0.size, x0.size), np.nan)
    if compute_covariance:
        hess = _fd_hessian(negloglik, res.x)
        try:
            covariance = np.linalg.inv(hess)
        except np.linalg.LinAlgError:
            converged = False
    params = SurvivalParams.from_unconstrained(res.x, family_name, m)
    return SurvivalFitResult(
        params=params,
        loglik=float(-res.fun),
        covariance=covariance,
        converged=converged,
        iterations=int(res.nit),
        message=str(res.message),
    )


def covariance_at(y, delta, X, group_index, family_name: str, params: SurvivalParams):
    """Inverse negative finite-difference Hessian at given parameters,
    without re-optimizing (used for ergodic-mean SEM estimates)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    negloglik = _make_objective(y, delta, X, group_index, family_name, X.shape[1])
    hess = _fd_hessian(negloglik, params.to_unconstrained())
    try:
        return np.linalg.inv(hess)
    except np.linalg.LinAlgError:
        return np.full(hess.shape, np.nan)


@dataclass(frozen=True)
class WaldRow:
    name: str
    estimate: float
    std_err: float
    z: float
    p_value: float
    note: str = ""


def natural_covariance(result: SurvivalFitResult) -> np.ndarray:
    """Delta-method map of the unconstrained covariance to natural scale."""
    mask = result.params.log_scale_mask()
    natural = result.params.natural_params()
    jac = np.where(mask, natural, 1.0)
    return result.covariance * np.outer(jac, jac)


def wald_tests(result: SurvivalFitResult, x_names=None) -> list:
    """Per-parameter estimates, delta-method SEs and two-sided p-values."""
    if not result.converged:
        raise ValueError("Wald tests require a converged fit")
    cov = natural_covariance(result)
    diag = np.diag(cov)
    names = result.params.coordinate_names(x_names)
    natural = result.params.natural_params()
    rows = []
    for k, (name, est) in enumerate(zip(names, natural)):
        if not np.isfinite(diag[k]) or diag[k] <= 0:
            rows.append(WaldRow(name, float(est), np.nan, np.nan, np.nan, "SE unavailable"))
            continue
        se = float(np.sqrt(diag[k]))
        z = est / se
        p = float(2.0 * norm.sf(abs(z)))
        note = "boundary-approximate" if name == "theta" else ""
        rows.append(WaldRow(name, float(est), se, float(z), p, note))
    return rows
