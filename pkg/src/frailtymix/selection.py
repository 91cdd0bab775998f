"""BIC model selection, grid search, curve construction and frailty tables."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import em
from . import survival as surv
from .baselines import n_baseline_params
from .data import Dataset
from .frailty import posterior_frailty

__all__ = [
    "ModelConfig",
    "GridCell",
    "GridResult",
    "count_parameters",
    "bic",
    "grid_search",
    "survival_curve",
    "hazard_curve",
    "frailty_estimates",
    "CurveTable",
    "FrailtyRow",
]

Z_95 = 1.959963984540054  # norm.ppf(0.975)


@dataclass(frozen=True)
class ModelConfig:
    n_clusters: int
    family: str
    algorithm: str = "cem"
    restarts: int = 1
    seed: int = 0
    n_regression: int = 0  # m
    n_continuous: int = 0  # p
    categories: tuple = ()  # k_r per marginal categorical variable
    n_frailty_params: int = 1  # f

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("need at least one cluster")
        if self.restarts < 1:
            raise ValueError("need at least one restart")

    @classmethod
    def from_dataset(cls, dataset: Dataset, n_clusters: int, family: str, **kwargs):
        design = dataset.design
        return cls(
            n_clusters=n_clusters,
            family=family,
            n_regression=design.X.shape[1],
            n_continuous=design.U.shape[1],
            categories=tuple(len(c) for c in design.v_categories),
            **kwargs,
        )


def count_parameters(config: ModelConfig) -> int:
    """Total free parameter count d entering the BIC penalty."""
    G = config.n_clusters
    p = config.n_continuous
    b = n_baseline_params(config.family)
    d = G * (1 + config.n_regression)
    d += G * (p * (p + 3)) // 2
    d += G * sum(k - 1 for k in config.categories)
    d += G * b
    d += G * config.n_frailty_params
    d += G - 1
    return d


def bic(loglik: float, d: int, n_obs: int) -> float:
    """BIC = 2*loglik - d*ln(N); higher is better."""
    return 2.0 * loglik - d * np.log(n_obs)


# ---------------------------------------------------------------------------
# grid search

@dataclass
class GridCell:
    n_clusters: int
    family: str
    bic: float
    loglik: float
    n_restarts: int
    failed: bool
    fit: em.ModelFit | None


@dataclass
class GridResult:
    cells: list
    best: GridCell | None


def _restart_seed(seed: int, g_idx: int, f_idx: int, restart: int) -> int:
    return int(np.random.SeedSequence([seed, g_idx, f_idx, restart]).generate_state(1)[0])


def _run_single(args):
    dataset, G, family, algorithm, seed, options = args
    runner = em.run_sem if algorithm.lower() == "sem" else em.run_cem
    try:
        return runner(dataset, G, family, seed, **options)
    except Exception as exc:  # a blown-up restart must not poison the cell
        return f"failed: {exc}"


def _is_degenerate(fit) -> bool:
    return isinstance(fit, str) or any("degenerate" in f for f in fit.flags)


def grid_search(
    dataset: Dataset,
    n_clusters_values,
    families,
    restarts: int = 1,
    seed: int = 0,
    algorithm: str = "cem",
    n_jobs: int = 1,
    **options,
) -> GridResult:
    """Fit every (G, family) cell ``restarts`` times and keep the best
    final log-likelihood per cell; the overall best cell maximizes BIC.

    Restarts use independent derived seeds and a single random
    k-prototypes start each, so they genuinely explore.
    """
    n_clusters_values = list(n_clusters_values)
    families = list(families)
    if restarts > 1:
        options.setdefault("init_restarts", 1)
    tasks = []
    for gi, G in enumerate(n_clusters_values):
        for fi, family in enumerate(families):
            for r in range(restarts):
                tasks.append(
                    (dataset, G, family, algorithm, _restart_seed(seed, gi, fi, r), options)
                )
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            fits = list(pool.map(_run_single, tasks, chunksize=1))
    else:
        fits = [_run_single(t) for t in tasks]

    cells = []
    idx = 0
    for G in n_clusters_values:
        for family in families:
            cell_fits = fits[idx:idx + restarts]
            idx += restarts
            usable = [f for f in cell_fits if not _is_degenerate(f)]
            if not usable:
                cells.append(GridCell(G, family, np.nan, np.nan, restarts, True, None))
                continue
            best = max(usable, key=lambda f: f.final_loglik)
            cells.append(
                GridCell(G, family, best.bic, best.final_loglik, restarts, False, best)
            )
    valid = [c for c in cells if not c.failed]
    best_cell = max(valid, key=lambda c: c.bic) if valid else None
    return GridResult(cells=cells, best=best_cell)


# ---------------------------------------------------------------------------
# curves

@dataclass(frozen=True)
class CurveTable:
    t: np.ndarray
    value: np.ndarray
    ci_low: np.ndarray | None
    ci_high: np.ndarray | None
    has_bands: bool


def _cum_hazard_gradient(baseline, t):
    """dH0/d(natural parameter), shape (b, len(t))."""
    t = np.asarray(t, dtype=float)
    name = baseline.name
    if name == "exponential":
        return np.vstack([t])
    if name == "weibull":
        lam, rho = baseline.scale, baseline.shape
        t_rho = t**rho
        return np.vstack([t_rho, lam * t_rho * np.log(t)])
    if name == "gompertz":
        lam, rho = baseline.scale, baseline.shape
        e = np.exp(rho * t)
        return np.vstack([(e - 1.0) / rho, lam * (t * e / rho - (e - 1.0) / rho**2)])
    if name == "lognormal":
        eta, nu = baseline.location, baseline.scale
        z = (np.log(t) - eta) / nu
        ratio = np.exp(norm.logpdf(z) - norm.logsf(z))  # phi(z)/(1-Phi(z))
        return np.vstack([-ratio / nu, -z * ratio / nu])
    raise ValueError(f"unknown baseline family {name!r}")


def survival_curve(
    params: surv.SurvivalParams,
    covariance: np.ndarray | None,
    profile: np.ndarray,
    t_grid,
    z_quantile: float = Z_95,
) -> CurveTable:
    """Cluster survival curve at frailty 1 with delta-method bands.

    ``covariance`` is the unconstrained-scale covariance from the fit; the
    gradient runs over the natural-scale regression and baseline
    parameters (theta uncertainty is out of the bands' scope).
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size and (np.any(t_grid <= 0) or np.any(np.diff(t_grid) <= 0)):
        raise ValueError("t_grid must be positive and strictly ascending")
    profile = np.asarray(profile, dtype=float)
    if profile.shape != (params.beta.size,):
        raise ValueError("profile length does not match the regression coefficients")
    risk = float(np.exp(profile @ params.beta)) if params.beta.size else 1.0
    H0 = params.baseline.cum_hazard(t_grid)
    S = np.exp(-H0 * risk)
    if covariance is None or not np.all(np.isfinite(covariance)):
        return CurveTable(t_grid, S, None, None, False)
    # natural-scale covariance over (beta, baseline); theta row/col dropped
    mask = params.log_scale_mask()
    natural = params.natural_params()
    jac = np.where(mask, natural, 1.0)
    cov_nat = (covariance * np.outer(jac, jac))[:-1, :-1]
    m = params.beta.size
    grad_beta = (-S * H0 * risk)[None, :] * profile[:, None] if m else np.zeros((0, t_grid.size))
    grad_base = (-S * risk)[None, :] * _cum_hazard_gradient(params.baseline, t_grid)
    grad = np.vstack([grad_beta, grad_base])
    variance = np.einsum("it,ij,jt->t", grad, cov_nat, grad)
    se = np.sqrt(np.maximum(variance, 0.0))
    lo = np.clip(S - z_quantile * se, 0.0, 1.0)
    hi = np.clip(S + z_quantile * se, 0.0, 1.0)
    return CurveTable(t_grid, S, lo, hi, True)


def hazard_curve(params: surv.SurvivalParams, profile: np.ndarray, t_grid) -> CurveTable:
    """h(t) = h0(t) * exp(profile' beta) at frailty 1."""
    t_grid = np.asarray(t_grid, dtype=float)
    profile = np.asarray(profile, dtype=float)
    if profile.shape != (params.beta.size,):
        raise ValueError("profile length does not match the regression coefficients")
    risk = float(np.exp(profile @ params.beta)) if params.beta.size else 1.0
    h = params.baseline.hazard(t_grid) * risk
    return CurveTable(t_grid, h, None, None, False)


# ---------------------------------------------------------------------------
# frailty tables

@dataclass(frozen=True)
class FrailtyRow:
    group: str
    cluster: int
    events: int
    cum_hazard: float
    mean: float
    ci_low: float
    ci_high: float
    significance: str  # "protective" | "neutral" | "risk"


def frailty_estimates(fit: em.ModelFit, dataset: Dataset, level: float = 0.95) -> list:
    """Posterior frailty summary per populated (group, cluster) cell."""
    design = dataset.design
    rows = []
    for g, cluster in enumerate(fit.params.clusters):
        members = fit.assignment == g
        if not members.any():
            continue
        y = dataset.time[members]
        delta = dataset.status[members]
        lp = design.X[members] @ cluster.survival.beta if design.X.shape[1] else np.zeros(y.size)
        hexp = cluster.survival.baseline.cum_hazard(y) * np.exp(lp)
        groups = dataset.group_index[members]
        n_groups = dataset.n_groups
        d = np.bincount(groups, weights=delta.astype(float), minlength=n_groups)
        s = np.bincount(groups, weights=hexp, minlength=n_groups)
        populated = np.bincount(groups, minlength=n_groups) > 0
        for j in np.flatnonzero(populated):
            post = posterior_frailty(cluster.survival.theta, int(round(d[j])), float(s[j]), level)
            if post.ci_low > 1.0:
                signif = "risk"
            elif post.ci_high < 1.0:
                signif = "protective"
            else:
                signif = "neutral"
            rows.append(
                FrailtyRow(
                    group=dataset.group_labels[j],
                    cluster=g + 1,
                    events=int(round(d[j])),
                    cum_hazard=float(s[j]),
                    mean=post.mean,
                    ci_low=post.ci_low,
                    ci_high=post.ci_high,
                    significance=signif,
                )
            )
    return rows
