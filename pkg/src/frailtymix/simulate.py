"""Synthetic data generation and the replication study harness.

The generator draws, for every (group, cluster) cell, a shared Gamma
frailty, then per observation the cluster's covariates and a Weibull
survival time via the inverse-transform
T = (-log U / (lambda * m * exp(x'beta)))^(1/rho).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .data import Dataset, Observation, VariableSpec
from .selection import grid_search

__all__ = [
    "ClusterDGP",
    "DGPConfig",
    "default_dgp",
    "simulate_dataset",
    "ari",
    "misclassification_rate",
    "replicate_study",
    "ReplicateRow",
    "StudySummary",
]


@dataclass(frozen=True)
class ClusterDGP:
    """One cluster's generative block."""

    n_per_group: int
    beta: tuple
    theta: float
    weibull_scale: float
    weibull_shape: float
    gaussian_mean: tuple
    gaussian_sd: tuple
    bernoulli: tuple  # probabilities over the two categories
    multinomial: tuple  # probabilities over the three categories

    def __post_init__(self):
        if self.n_per_group < 1:
            raise ValueError("cluster cell size must be >= 1")
        if not (self.theta > 0 and self.weibull_scale > 0 and self.weibull_shape > 0):
            raise ValueError("positivity constraint violated")
        for probs in (self.bernoulli, self.multinomial):
            if abs(sum(probs) - 1.0) > 1e-9 or min(probs) < 0:
                raise ValueError("probabilities must form a simplex")


@dataclass(frozen=True)
class DGPConfig:
    clusters: tuple
    n_groups: int = 10
    censoring_time: float | None = None  # None = no censoring

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_obs(self) -> int:
        return self.n_groups * sum(c.n_per_group for c in self.clusters)


def default_dgp(censoring_time: float | None = None) -> DGPConfig:
    """The three-cluster, ten-group benchmark generative process."""
    return DGPConfig(
        clusters=(
            ClusterDGP(40, (0.2, -0.1, 0.3, 0.5, 0.2), 0.8, 2.0, 3.0,
                       (1.0, -3.0), (1.0, 1.0), (0.4, 0.6), (0.3, 0.5, 0.2)),
            ClusterDGP(50, (-0.2, -0.1, 0.2, -0.3, 0.15), 0.6, 0.7, 3.0,
                       (3.0, 1.0), (1.0, 1.0), (0.8, 0.2), (0.6, 0.1, 0.3)),
            ClusterDGP(60, (-0.2, 0.2, -0.3, -0.3, -0.4), 0.4, 0.4, 3.0,
                       (5.0, 3.0), (1.0, 1.0), (0.2, 0.8), (0.1, 0.3, 0.6)),
        ),
        n_groups=10,
        censoring_time=censoring_time,
    )


def simulation_schema() -> tuple:
    """Schema matching the benchmark DGP; every covariate is both a
    marginal (clustering) variable and a regression covariate."""
    return (
        VariableSpec("x1", "continuous", in_marginal=True, in_regression=True),
        VariableSpec("x2", "continuous", in_marginal=True, in_regression=True),
        VariableSpec("b1", "categorical", ("no", "yes"), in_marginal=True, in_regression=True),
        VariableSpec("c1", "categorical", ("c1", "c2", "c3"), in_marginal=True, in_regression=True),
    )


def simulate_dataset(config: DGPConfig, seed: int):
    """Draw one dataset; returns (Dataset, true assignment, true frailties).

    ``frailties`` has shape (J, G). Bitwise reproducible for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    schema = simulation_schema()
    G = config.n_clusters
    frailties = np.empty((config.n_groups, G))
    for j in range(config.n_groups):
        for g, cl in enumerate(config.clusters):
            frailties[j, g] = rng.gamma(shape=1.0 / cl.theta, scale=cl.theta)
    observations, truth = [], []
    b_levels = schema[2].categories
    c_levels = schema[3].categories
    for j in range(config.n_groups):
        label = f"H{j + 1}"
        for g, cl in enumerate(config.clusters):
            beta = np.asarray(cl.beta)
            for _ in range(cl.n_per_group):
                x1 = rng.normal(cl.gaussian_mean[0], cl.gaussian_sd[0])
                x2 = rng.normal(cl.gaussian_mean[1], cl.gaussian_sd[1])
                b_code = int(rng.random() >= cl.bernoulli[0])
                c_code = int(rng.choice(3, p=cl.multinomial))
                x_row = np.array([
                    x1, x2, float(b_code), float(c_code == 1), float(c_code == 2)
                ])
                rate = cl.weibull_scale * frailties[j, g] * np.exp(x_row @ beta)
                t = (-np.log(rng.random()) / rate) ** (1.0 / cl.weibull_shape)
                if config.censoring_time is not None and t > config.censoring_time:
                    y, status = config.censoring_time, 0
                else:
                    y, status = t, 1
                observations.append(
                    Observation(float(y), status, label,
                                (x1, x2, b_levels[b_code], c_levels[c_code]))
                )
                truth.append(g)
    dataset = Dataset(schema, tuple(observations))
    return dataset, np.asarray(truth, dtype=np.intp), frailties


# ---------------------------------------------------------------------------
# partition scoring

def _contingency(a, b):
    a = np.asarray(a, dtype=np.intp)
    b = np.asarray(b, dtype=np.intp)
    if a.shape != b.shape:
        raise ValueError("partitions have different lengths")
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def ari(a, b) -> float:
    """Hubert-Arabie adjusted Rand index between two hard partitions."""
    table = _contingency(a, b)
    n = table.sum()
    sum_cells = (table * (table - 1) // 2).sum()
    sum_rows = (table.sum(axis=1) * (table.sum(axis=1) - 1) // 2).sum()
    sum_cols = (table.sum(axis=0) * (table.sum(axis=0) - 1) // 2).sum()
    n_pairs = n * (n - 1) // 2
    expected = sum_rows * sum_cols / n_pairs if n_pairs else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def misclassification_rate(truth, estimate) -> float:
    """Fraction of disagreements minimized over all label permutations."""
    table = _contingency(truth, estimate)
    k = max(table.shape)
    padded = np.zeros((k, k), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    n = padded.sum()
    best_agreement = max(
        sum(padded[perm[c], c] for c in range(k)) for perm in permutations(range(k))
    )
    return float((n - best_agreement) / n)


# ---------------------------------------------------------------------------
# replication study

@dataclass(frozen=True)
class ReplicateRow:
    replicate: int
    seed: int
    selected_clusters: int
    selected_family: str
    ari: float
    misclassification: float
    bic_by_cell: tuple  # ((G, family, bic), ...)
    survival_estimates: tuple  # per selected cluster: (beta..., baseline..., theta)
    failed: bool = False


@dataclass
class StudySummary:
    rows: list
    mean_ari: float
    sd_ari: float
    mean_misclassification: float
    sd_misclassification: float
    selection_counts: dict = field(default_factory=dict)


def replicate_study(
    config: DGPConfig,
    n_replicates: int,
    n_clusters_values,
    families,
    restarts: int = 1,
    seed: int = 0,
    n_jobs: int = 1,
    **options,
) -> StudySummary:
    """Simulate, grid-select and score ``n_replicates`` times."""
    rows = []
    for r in range(n_replicates):
        rep_seed = int(np.random.SeedSequence([seed, r]).generate_state(1)[0])
        dataset, truth, _ = simulate_dataset(config, rep_seed)
        grid = grid_search(
            dataset, n_clusters_values, families,
            restarts=restarts, seed=rep_seed, n_jobs=n_jobs, **options,
        )
        bic_cells = tuple((c.n_clusters, c.family, c.bic) for c in grid.cells)
        if grid.best is None:
            rows.append(ReplicateRow(r, rep_seed, 0, "", np.nan, np.nan, bic_cells, (), True))
            continue
        fit = grid.best.fit
        estimates = tuple(
            tuple(c.survival.natural_params()) for c in fit.params.clusters
        )
        rows.append(
            ReplicateRow(
                replicate=r,
                seed=rep_seed,
                selected_clusters=grid.best.n_clusters,
                selected_family=grid.best.family,
                ari=ari(truth, fit.assignment),
                misclassification=misclassification_rate(truth, fit.assignment),
                bic_by_cell=bic_cells,
                survival_estimates=estimates,
            )
        )
    scored = [row for row in rows if not row.failed]
    aris = np.array([row.ari for row in scored])
    miss = np.array([row.misclassification for row in scored])
    counts = {}
    for row in scored:
        counts[row.selected_clusters] = counts.get(row.selected_clusters, 0) + 1
    return StudySummary(
        rows=rows,
        mean_ari=float(aris.mean()) if scored else np.nan,
        sd_ari=float(aris.std(ddof=1)) if len(scored) > 1 else np.nan,
        mean_misclassification=float(miss.mean()) if scored else np.nan,
        sd_misclassification=float(miss.std(ddof=1)) if len(scored) > 1 else np.nan,
        selection_counts=counts,
    )
