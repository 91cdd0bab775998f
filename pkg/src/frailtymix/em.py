"""Classification-EM and Stochastic-EM for the frailty survival mixture.

Both algorithms alternate an E-step (posterior membership probabilities),
a hard-assignment step (MAP for CEM, multinomial sampling for SEM) and an
M-step that refits each cluster independently: closed-form weights and
covariate MLEs plus a warm-started survival maximum-likelihood fit.
SEM reports the ergodic mean of the post-burn-in parameter sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from . import covariates as cov
from . import survival as surv
from .data import Dataset

__all__ = [
    "ClusterParams",
    "ModelParams",
    "ModelFit",
    "DegenerateModelError",
    "kprototypes_init",
    "e_step",
    "c_step",
    "s_step",
    "m_step",
    "classification_loglik",
    "run_cem",
    "run_sem",
]

EPSILON = 1e-5
MAX_ITER_CEM = 200
SEM_BURN_IN = 50
SEM_ITERATIONS = 500
FREEZE_LIMIT = 10


class DegenerateModelError(RuntimeError):
    """A cluster stayed below the size/event floor for too many iterations."""


@dataclass(frozen=True)
class ClusterParams:
    weight: float
    gaussian: cov.GaussianParams | None
    multinomials: cov.MultinomialParams | None
    survival: surv.SurvivalParams


@dataclass(frozen=True)
class ModelParams:
    clusters: tuple

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.clusters])


@dataclass
class ModelFit:
    params: ModelParams
    assignment: np.ndarray
    posterior: np.ndarray
    loglik_trace: list
    final_loglik: float
    bic: float
    n_params: int
    algorithm: str
    family: str
    seed: int
    converged: bool
    flags: list = field(default_factory=list)
    group_labels: tuple = ()
    covariances: tuple = ()  # per-cluster unconstrained survival covariance


# ---------------------------------------------------------------------------
# initialization

def kprototypes_init(
    dataset: Dataset,
    n_clusters: int,
    seed: int,
    restarts: int = 10,
    max_iter: int = 100,
    gamma_w: float | None = None,
) -> np.ndarray:
    """k-prototypes partition on the marginal covariates.

    Continuous columns are standardized and compared with squared
    Euclidean distance; categorical columns add a mismatch count weighted
    by ``gamma_w`` (default: half the mean variance of the standardized
    continuous columns). Best of ``restarts`` random starts by total cost.
    """
    design = dataset.design
    U, V = design.U, design.V
    n = dataset.n_obs
    if n_clusters > n:
        raise ValueError("more clusters than observations")
    if U.shape[1] == 0 and V.shape[1] == 0:
        raise ValueError("k-prototypes needs at least one marginal covariate")
    if U.shape[1]:
        scale = U.std(axis=0)
        scale[scale == 0] = 1.0
        Z = (U - U.mean(axis=0)) / scale
    else:
        Z = np.zeros((n, 0))
    if gamma_w is None:
        gamma_w = 0.5 * float(Z.var(axis=0).mean()) if Z.shape[1] else 1.0

    rng = np.random.default_rng(seed)
    best_cost, best_assign = np.inf, None
    for _ in range(max(restarts, 1)):
        assign, cost = _kprototypes_single(Z, V, n_clusters, gamma_w, rng, max_iter)
        if cost < best_cost:
            best_cost, best_assign = cost, assign
    return best_assign


def _kp_distances(Z, V, centers, modes, gamma_w):
    dist = np.zeros((Z.shape[0], centers.shape[0]))
    for g in range(centers.shape[0]):
        if Z.shape[1]:
            dist[:, g] = np.sum((Z - centers[g]) ** 2, axis=1)
        if V.shape[1]:
            dist[:, g] += gamma_w * np.sum(V != modes[g], axis=1)
    return dist


def _kprototypes_single(Z, V, G, gamma_w, rng, max_iter):
    n = Z.shape[0]
    idx = rng.choice(n, size=G, replace=False)
    centers = Z[idx].copy()
    modes = V[idx].copy()
    assign = np.full(n, -1, dtype=np.intp)
    for _ in range(max_iter):
        dist = _kp_distances(Z, V, centers, modes, gamma_w)
        new_assign = dist.argmin(axis=1)
        repairs = 0
        while True:
            sizes = np.bincount(new_assign, minlength=G)
            empty = np.flatnonzero(sizes == 0)
            if empty.size == 0:
                break
            if repairs >= 5:
                raise RuntimeError("k-prototypes could not repair empty clusters")
            # re-seed the empty prototype from the farthest point
            chosen = dist[np.arange(n), new_assign]
            far = int(np.argmax(chosen))
            centers[empty[0]] = Z[far]
            modes[empty[0]] = V[far]
            dist = _kp_distances(Z, V, centers, modes, gamma_w)
            new_assign = dist.argmin(axis=1)
            repairs += 1
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for g in range(G):
            members = assign == g
            if Z.shape[1]:
                centers[g] = Z[members].mean(axis=0)
            for r in range(V.shape[1]):
                modes[g, r] = np.bincount(V[members, r]).argmax()
    dist = _kp_distances(Z, V, centers, modes, gamma_w)
    cost = float(dist[np.arange(n), assign].sum())
    return assign, cost


# ---------------------------------------------------------------------------
# EM steps

def _cluster_logdensity(dataset: Dataset, params: ClusterParams) -> np.ndarray:
    """Per-observation log of tau * survival marginal * phi * xi."""
    design = dataset.design
    out = np.full(dataset.n_obs, np.log(params.weight))
    out += surv.obs_marginal_logdensity(
        dataset.time, dataset.status, design.X, params.survival
    )
    if params.gaussian is not None:
        out += cov.log_gaussian_density(design.U, params.gaussian)
    if params.multinomials is not None:
        out += cov.log_multinomial_density(design.V, params.multinomials)
    return out


def e_step(dataset: Dataset, params: ModelParams) -> np.ndarray:
    """Posterior membership matrix with rows normalized via log-sum-exp."""
    logdens = np.column_stack(
        [_cluster_logdensity(dataset, c) for c in params.clusters]
    )
    norm = logsumexp(logdens, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise FloatingPointError("all components vanished for some observation")
    return np.exp(logdens - norm)


def c_step(posterior: np.ndarray) -> np.ndarray:
    """MAP assignment; ties break to the lowest cluster index."""
    return np.argmax(posterior, axis=1).astype(np.intp)


def s_step(posterior: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One multinomial draw per row from its posterior."""
    cum = np.cumsum(posterior, axis=1)
    cum /= cum[:, -1:]
    u = rng.random(posterior.shape[0])
    return (u[:, None] > cum).sum(axis=1).astype(np.intp)


def _fit_cluster(dataset, members, family, previous, compute_covariance):
    """MLEs for one cluster's covariate and survival blocks."""
    design = dataset.design
    y = dataset.time[members]
    delta = dataset.status[members]
    X = design.X[members]
    groups = dataset.group_index[members]
    gaussian = cov.mle_gaussian(design.U[members]) if design.U.shape[1] else None
    multinomials = (
        cov.mle_multinomial(design.V[members], [len(c) for c in design.v_categories])
        if design.V.shape[1]
        else None
    )
    init = previous.survival if previous is not None else None
    result = surv.fit_survival_mle(
        y, delta, X, groups, family, init=init, compute_covariance=compute_covariance
    )
    return gaussian, multinomials, result


def m_step(
    dataset: Dataset,
    assignment: np.ndarray,
    family: str,
    previous: ModelParams | None = None,
    compute_covariance: bool = False,
):
    """Independent per-cluster maximization given the hard partition.

    Returns (ModelParams, covariances, flags); clusters violating the
    survival-fit preconditions are frozen at their previous parameters and
    flagged.
    """
    G = int(assignment.max()) + 1 if previous is None else previous.n_clusters
    n = dataset.n_obs
    design = dataset.design
    m = design.X.shape[1]
    floor = surv.min_cluster_size(m, family)
    sizes = np.bincount(assignment, minlength=G)
    weights = np.maximum(sizes, 1e-12) / np.maximum(sizes, 1e-12).sum()
    clusters, covariances, flags = [], [], []
    for g in range(G):
        members = assignment == g
        events = int(dataset.status[members].sum())
        prev = previous.clusters[g] if previous is not None else None
        if sizes[g] < floor or events < 1:
            if prev is None:
                raise DegenerateModelError(
                    f"cluster {g + 1} starts below the size/event floor"
                )
            flags.append(f"cluster {g + 1} frozen (size {sizes[g]}, events {events})")
            clusters.append(replace(prev, weight=float(weights[g])))
            covariances.append(None)
            continue
        try:
            gaussian, multinomials, result = _fit_cluster(
                dataset, members, family, prev, compute_covariance
            )
        except (ValueError, FloatingPointError) as exc:
            if prev is None:
                raise
            flags.append(f"cluster {g + 1} frozen ({exc})")
            clusters.append(replace(prev, weight=float(weights[g])))
            covariances.append(None)
            continue
        if not result.converged:
            flags.append(f"cluster {g + 1} survival fit not converged")
        clusters.append(
            ClusterParams(float(weights[g]), gaussian, multinomials, result.params)
        )
        covariances.append(result.covariance if compute_covariance else None)
    return ModelParams(tuple(clusters)), tuple(covariances), flags


def classification_loglik(
    dataset: Dataset, params: ModelParams, assignment: np.ndarray
) -> float:
    """Hard-partition objective: survival cell terms plus per-observation
    mixing and covariate terms."""
    design = dataset.design
    total = 0.0
    for g, cluster in enumerate(params.clusters):
        members = assignment == g
        n_g = int(members.sum())
        if n_g == 0:
            continue
        total += surv.cluster_survival_loglik(
            dataset.time[members],
            dataset.status[members],
            design.X[members],
            dataset.group_index[members],
            cluster.survival,
        )
        total += n_g * np.log(cluster.weight)
        if cluster.gaussian is not None:
            total += float(np.sum(cov.log_gaussian_density(design.U[members], cluster.gaussian)))
        if cluster.multinomials is not None:
            total += float(
                np.sum(cov.log_multinomial_density(design.V[members], cluster.multinomials))
            )
    return total


# ---------------------------------------------------------------------------
# drivers

def _count_parameters(dataset: Dataset, G: int, family: str) -> int:
    from .selection import ModelConfig, count_parameters

    return count_parameters(ModelConfig.from_dataset(dataset, G, family))


def _finalize(dataset, params, assignment, posterior, trace, algorithm, family,
              seed, converged, flags, covariances):
    from .selection import bic as bic_value

    final = trace[-1]
    d = _count_parameters(dataset, params.n_clusters, family)
    return ModelFit(
        params=params,
        assignment=assignment,
        posterior=posterior,
        loglik_trace=list(trace),
        final_loglik=float(final),
        bic=float(bic_value(final, d, dataset.n_obs)),
        n_params=d,
        algorithm=algorithm,
        family=family,
        seed=seed,
        converged=converged,
        flags=flags,
        group_labels=dataset.group_labels,
        covariances=covariances,
    )


def _guarded_reassign(dataset, params, current, proposed, current_loglik):
    """Per-observation fallback for the rare case where the wholesale
    MAP reassignment lowers the coupled classification objective (the
    per-observation posterior ignores the frailty coupling of same-cell
    members). Moves are accepted one at a time, in row order, only when
    they do not decrease the objective, which restores the CEM ascent
    property."""
    assignment = current.copy()
    loglik = current_loglik
    for i in np.flatnonzero(proposed != current):
        trial = assignment.copy()
        trial[i] = proposed[i]
        trial_loglik = classification_loglik(dataset, params, trial)
        if trial_loglik >= loglik:
            assignment = trial
            loglik = trial_loglik
    return assignment


def run_cem(
    dataset: Dataset,
    n_clusters: int,
    family: str,
    seed: int,
    max_iter: int = MAX_ITER_CEM,
    epsilon: float = EPSILON,
    init_restarts: int = 10,
) -> ModelFit:
    """Classification EM: init -> {E, C, M} until the relative objective
    change falls below ``epsilon``."""
    assignment = kprototypes_init(dataset, n_clusters, seed, restarts=init_restarts)
    params, _, flags = m_step(dataset, assignment, family)
    trace = [classification_loglik(dataset, params, assignment)]
    all_flags = [f"iter 0: {f}" for f in flags]
    converged = False
    frozen_streak = 0
    posterior = None
    for it in range(1, max_iter + 1):
        posterior = e_step(dataset, params)
        proposed = c_step(posterior)
        if classification_loglik(dataset, params, proposed) >= trace[-1]:
            assignment = proposed
        else:
            assignment = _guarded_reassign(dataset, params, assignment, proposed, trace[-1])
        try:
            params, _, flags = m_step(dataset, assignment, family, previous=params)
        except DegenerateModelError as exc:
            all_flags.append(f"iter {it}: degenerate ({exc})")
            break
        all_flags.extend(f"iter {it}: {f}" for f in flags)
        frozen_streak = frozen_streak + 1 if any("frozen" in f for f in flags) else 0
        trace.append(classification_loglik(dataset, params, assignment))
        if frozen_streak >= FREEZE_LIMIT:
            all_flags.append(f"iter {it}: degenerate cluster (frozen {FREEZE_LIMIT}x)")
            break
        if abs(trace[-1] - trace[-2]) < epsilon * abs(trace[-2]):
            converged = True
            break
    if posterior is None:
        posterior = e_step(dataset, params)
    # refit with covariances at the final partition for downstream inference
    params, covariances, _ = m_step(
        dataset, assignment, family, previous=params, compute_covariance=True
    )
    trace.append(classification_loglik(dataset, params, assignment))
    return _finalize(
        dataset, params, assignment, posterior, trace, "CEM", family, seed,
        converged, all_flags, covariances,
    )


def _params_to_vector(params: ModelParams) -> np.ndarray:
    parts = []
    for c in params.clusters:
        parts.append([c.weight])
        if c.gaussian is not None:
            parts.append(c.gaussian.mean)
            parts.append(c.gaussian.cov.ravel())
        if c.multinomials is not None:
            parts.extend(c.multinomials.probs)
        parts.append(c.survival.natural_params())
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def _vector_to_params(vector: np.ndarray, template: ModelParams) -> ModelParams:
    clusters = []
    pos = 0

    def take(k):
        nonlocal pos
        out = vector[pos:pos + k]
        pos += k
        return out

    for c in template.clusters:
        weight = float(take(1)[0])
        gaussian = None
        if c.gaussian is not None:
            p = c.gaussian.mean.size
            mean = take(p)
            covm = take(p * p).reshape(p, p)
            gaussian = cov.GaussianParams(mean, 0.5 * (covm + covm.T))
        multinomials = None
        if c.multinomials is not None:
            probs = []
            for pr in c.multinomials.probs:
                vals = np.maximum(take(pr.size), cov.PROB_FLOOR)
                probs.append(vals / vals.sum())
            multinomials = cov.MultinomialParams(tuple(probs))
        m = c.survival.beta.size
        beta = take(m)
        from . import baselines

        base = baselines.family_from_name(
            c.survival.baseline.name, take(c.survival.baseline.n_params)
        )
        theta = float(take(1)[0])
        clusters.append(
            ClusterParams(weight, gaussian, multinomials,
                          surv.SurvivalParams(beta, base, max(theta, 1e-12)))
        )
    weights = np.array([c.weight for c in clusters])
    weights = weights / weights.sum()
    clusters = [replace(c, weight=float(w)) for c, w in zip(clusters, weights)]
    return ModelParams(tuple(clusters))


def _align_permutation(params: ModelParams, reference: ModelParams) -> np.ndarray:
    """Greedy label matching on (weight, Gaussian mean) distance."""
    G = params.n_clusters
    costs = np.empty((G, G))
    for g, c in enumerate(params.clusters):
        for h, r in enumerate(reference.clusters):
            cost = (c.weight - r.weight) ** 2
            if c.gaussian is not None and r.gaussian is not None:
                cost += float(np.sum((c.gaussian.mean - r.gaussian.mean) ** 2))
            costs[g, h] = cost
    perm = np.full(G, -1, dtype=np.intp)
    cost_view = costs.copy()
    for _ in range(G):
        g, h = np.unravel_index(np.argmin(cost_view), cost_view.shape)
        perm[h] = g
        cost_view[g, :] = np.inf
        cost_view[:, h] = np.inf
    return perm


def _permute_params(params: ModelParams, perm: np.ndarray) -> ModelParams:
    return ModelParams(tuple(params.clusters[g] for g in perm))


def run_sem(
    dataset: Dataset,
    n_clusters: int,
    family: str,
    seed: int,
    burn_in: int = SEM_BURN_IN,
    iterations: int = SEM_ITERATIONS,
    init_restarts: int = 10,
) -> ModelFit:
    """Stochastic EM: init -> {E, S, M}; the estimate is the ergodic mean
    of the post-burn-in parameter sequence (labels aligned greedily) and
    the final partition is the MAP assignment at the averaged parameters."""
    if burn_in >= iterations:
        raise ValueError("empty averaging window: burn_in must be < iterations")
    rng = np.random.default_rng(seed)
    assignment = kprototypes_init(dataset, n_clusters, seed, restarts=init_restarts)
    params, _, flags = m_step(dataset, assignment, family)
    trace = [classification_loglik(dataset, params, assignment)]
    all_flags = [f"iter 0: {f}" for f in flags]
    reference = None
    running_sum = None
    n_averaged = 0
    frozen_streak = 0
    for it in range(1, iterations + 1):
        posterior = e_step(dataset, params)
        assignment = s_step(posterior, rng)
        try:
            params, _, flags = m_step(dataset, assignment, family, previous=params)
        except DegenerateModelError as exc:
            all_flags.append(f"iter {it}: degenerate ({exc})")
            break
        all_flags.extend(f"iter {it}: {f}" for f in flags)
        frozen_streak = frozen_streak + 1 if any("frozen" in f for f in flags) else 0
        trace.append(classification_loglik(dataset, params, assignment))
        if frozen_streak >= FREEZE_LIMIT:
            all_flags.append(f"iter {it}: degenerate cluster (frozen {FREEZE_LIMIT}x)")
            break
        if it > burn_in:
            if reference is None:
                reference = params
                aligned = params
            else:
                aligned = _permute_params(params, _align_permutation(params, reference))
            vec = _params_to_vector(aligned)
            running_sum = vec if running_sum is None else running_sum + vec
            n_averaged += 1
    if n_averaged:
        params = _vector_to_params(running_sum / n_averaged, reference)
    posterior = e_step(dataset, params)
    assignment = c_step(posterior)
    design = dataset.design
    covariances = []
    for g, c in enumerate(params.clusters):
        members = assignment == g
        if members.sum() == 0:
            covariances.append(None)
            continue
        covariances.append(
            surv.covariance_at(
                dataset.time[members], dataset.status[members], design.X[members],
                dataset.group_index[members], family, c.survival,
            )
        )
    covariances = tuple(covariances)
    trace.append(classification_loglik(dataset, params, assignment))
    return _finalize(
        dataset, params, assignment, posterior, trace, "SEM", family, seed,
        n_averaged > 0, all_flags, covariances,
    )
