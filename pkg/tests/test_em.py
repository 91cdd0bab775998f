import numpy as np
import pytest

from frailtymix import (
    Dataset,
    Exponential,
    GaussianParams,
    MultinomialParams,
    Observation,
    SurvivalParams,
    VariableSpec,
    ari,
    c_step,
    classification_loglik,
    e_step,
    kprototypes_init,
    m_step,
    run_cem,
    run_sem,
    s_step,
)
from frailtymix.em import ClusterParams, ModelParams


def blob_dataset(rng, n_per=40, separation=10.0):
    """Two well-separated Gaussian blobs with survival filler."""
    schema = (VariableSpec("x", "continuous", in_marginal=True, in_regression=True),)
    obs, labels = [], []
    for g, center in enumerate((0.0, separation)):
        for _ in range(n_per):
            x = float(rng.normal(center, 1.0))
            t = float(rng.exponential(1.0))
            obs.append(Observation(t, 1, f"H{rng.integers(1, 4)}", (x,)))
            labels.append(g)
    return Dataset(schema, tuple(obs)), np.array(labels)


def two_cluster_params(weights=(0.5, 0.5)):
    base = Exponential(1.0)
    clusters = tuple(
        ClusterParams(
            w,
            GaussianParams([mu], [[1.0]]),
            None,
            SurvivalParams(np.array([0.0]), base, 0.5),
        )
        for w, mu in zip(weights, (0.0, 0.0))
    )
    return ModelParams(clusters)


class TestKPrototypes:
    def test_separated_blobs(self, rng):
        dataset, labels = blob_dataset(rng)
        assign = kprototypes_init(dataset, 2, seed=3)
        assert ari(labels, assign) == 1.0

    def test_single_cluster(self, rng):
        dataset, _ = blob_dataset(rng)
        assign = kprototypes_init(dataset, 1, seed=3)
        assert np.all(assign == 0)

    def test_constant_categorical_no_effect(self, rng):
        dataset, _ = blob_dataset(rng)
        schema = dataset.schema + (
            VariableSpec("flag", "categorical", ("a", "b"), in_marginal=True),
        )
        padded = Dataset(
            schema,
            tuple(
                Observation(o.time, o.status, o.group, o.values + ("a",))
                for o in dataset.observations
            ),
        )
        base = kprototypes_init(dataset, 2, seed=5)
        same = kprototypes_init(padded, 2, seed=5)
        np.testing.assert_array_equal(base, same)

    def test_deterministic(self, rng):
        dataset, _ = blob_dataset(rng)
        a = kprototypes_init(dataset, 3, seed=11)
        b = kprototypes_init(dataset, 3, seed=11)
        np.testing.assert_array_equal(a, b)

    def test_too_many_clusters(self, rng):
        dataset, _ = blob_dataset(rng, n_per=2)
        with pytest.raises(ValueError):
            kprototypes_init(dataset, 5, seed=1)


@pytest.fixture(scope="module")
def tiny_dataset():
    rng = np.random.default_rng(7)
    dataset, _ = blob_dataset(rng, n_per=30)
    return dataset


class TestESCSteps:
    def test_rows_sum_to_one(self, tiny_dataset):
        post = e_step(tiny_dataset, two_cluster_params())
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-10)

    def test_single_component(self, tiny_dataset):
        template = two_cluster_params().clusters[0]
        params = ModelParams(
            (ClusterParams(1.0, template.gaussian, template.multinomials, template.survival),)
        )
        post = e_step(tiny_dataset, params)
        np.testing.assert_array_equal(post, np.ones((tiny_dataset.n_obs, 1)))

    def test_identical_components_split_evenly(self, tiny_dataset):
        post = e_step(tiny_dataset, two_cluster_params())
        np.testing.assert_allclose(post, 0.5, atol=1e-12)

    def test_prior_domination(self, tiny_dataset):
        post = e_step(tiny_dataset, two_cluster_params((1 - 1e-12, 1e-12)))
        assert np.all(post[:, 0] > 1 - 1e-9)

    def test_c_step_argmax(self):
        post = np.array([[0.2, 0.5, 0.3], [0.9, 0.05, 0.05]])
        np.testing.assert_array_equal(c_step(post), [1, 0])

    def test_c_step_tie_break(self):
        assert c_step(np.array([[0.5, 0.5]]))[0] == 0

    def test_c_step_permutation_equivariance(self, rng):
        post = rng.dirichlet(np.ones(3), size=20)
        perm = np.array([2, 0, 1])
        base = c_step(post)
        permuted = c_step(post[:, perm])
        np.testing.assert_array_equal(perm[permuted], base)

    def test_s_step_degenerate_row(self):
        post = np.tile([1.0, 0.0, 0.0], (50, 1))
        draws = s_step(post, np.random.default_rng(0))
        assert np.all(draws == 0)

    def test_s_step_frequencies(self):
        post = np.tile([0.5, 0.5], (10_000, 1))
        draws = s_step(post, np.random.default_rng(123))
        assert abs(np.mean(draws == 0) - 0.5) < 0.02

    def test_s_step_seeded(self):
        post = np.tile([0.3, 0.7], (100, 1))
        a = s_step(post, np.random.default_rng(9))
        b = s_step(post, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)


class TestMStep:
    def test_single_cluster_weight(self, bench_data):
        dataset, _, _ = bench_data
        params, _, flags = m_step(dataset, np.zeros(dataset.n_obs, dtype=np.intp), "weibull")
        assert params.n_clusters == 1
        assert params.clusters[0].weight == 1.0
        assert flags == []

    def test_truth_partition_recovery(self, bench_data):
        dataset, truth, _ = bench_data
        params, _, _ = m_step(dataset, truth, "weibull")
        shapes = [c.survival.baseline.shape for c in params.clusters]
        np.testing.assert_allclose(shapes, 3.0, atol=0.3)
        means = np.array([c.gaussian.mean for c in params.clusters])
        np.testing.assert_allclose(means, [[1, -3], [3, 1], [5, 3]], atol=0.3)

    def test_small_cluster_frozen(self, bench_data):
        dataset, truth, _ = bench_data
        previous, _, _ = m_step(dataset, truth, "weibull")
        crippled = truth.copy()
        crippled[crippled == 2] = 1
        crippled[:3] = 2  # cluster 3 shrinks below the size floor
        params, _, flags = m_step(dataset, crippled, "weibull", previous=previous)
        assert any("frozen" in f for f in flags)
        # frozen cluster keeps its previous parameters, weight refreshed
        np.testing.assert_array_equal(
            params.clusters[2].survival.beta, previous.clusters[2].survival.beta
        )
        assert params.clusters[2].weight == pytest.approx(3 / dataset.n_obs)


class TestClassificationLoglik:
    def test_label_permutation_invariance(self, bench_data):
        dataset, truth, _ = bench_data
        params, _, _ = m_step(dataset, truth, "weibull")
        base = classification_loglik(dataset, params, truth)
        perm = np.array([2, 0, 1])
        permuted_params = ModelParams(tuple(params.clusters[g] for g in perm))
        relabeled = np.empty_like(truth)
        for new, old in enumerate(perm):
            relabeled[truth == old] = new
        value = classification_loglik(dataset, permuted_params, relabeled)
        assert value == pytest.approx(base, rel=1e-12)

    def test_single_cluster_reduction(self, bench_data):
        dataset, _, _ = bench_data
        assign = np.zeros(dataset.n_obs, dtype=np.intp)
        params, _, _ = m_step(dataset, assign, "weibull")
        from frailtymix import cluster_survival_loglik
        from frailtymix.covariates import log_gaussian_density, log_multinomial_density

        c = params.clusters[0]
        design = dataset.design
        expected = cluster_survival_loglik(
            dataset.time, dataset.status, design.X, dataset.group_index, c.survival
        )
        expected += float(np.sum(log_gaussian_density(design.U, c.gaussian)))
        expected += float(np.sum(log_multinomial_density(design.V, c.multinomials)))
        assert classification_loglik(dataset, params, assign) == pytest.approx(
            expected, rel=1e-12
        )

    def test_c_step_improves_decoupled_objective(self, rng):
        # with singleton groups the objective decouples over observations,
        # so the per-row argmax is exactly the best reassignment
        schema = (VariableSpec("x", "continuous", in_marginal=True, in_regression=True),)
        obs = tuple(
            Observation(float(rng.exponential(1.0)), 1, f"G{i}", (float(rng.normal()),))
            for i in range(40)
        )
        dataset = Dataset(schema, obs)
        params = ModelParams(
            tuple(
                ClusterParams(
                    0.5,
                    GaussianParams([mu], [[1.0]]),
                    None,
                    SurvivalParams(np.array([b]), Exponential(r), 0.4),
                )
                for mu, b, r in ((-1.0, 0.2, 1.0), (1.0, -0.2, 2.0))
            )
        )
        before = rng.integers(0, 2, size=40).astype(np.intp)
        after = c_step(e_step(dataset, params))
        assert classification_loglik(dataset, params, after) >= classification_loglik(
            dataset, params, before
        )


class TestRunCEM:
    def test_trace_monotone(self, bench_data):
        dataset, _, _ = bench_data
        fit = run_cem(dataset, 3, "weibull", seed=2)
        trace = np.asarray(fit.loglik_trace)
        dips = np.flatnonzero(np.diff(trace) < -1e-8)
        for k in dips:
            assert any(f.startswith(f"iter {k + 1}:") for f in fit.flags)

    def test_benchmark_accuracy(self, bench_data):
        dataset, truth, _ = bench_data
        fit = run_cem(dataset, 3, "weibull", seed=2)
        assert ari(truth, fit.assignment) >= 0.8

    def test_epsilon_infinite_stops_immediately(self, bench_data):
        dataset, _, _ = bench_data
        fit = run_cem(dataset, 3, "weibull", seed=2, epsilon=np.inf)
        # initial value, one EM iteration, final refit
        assert len(fit.loglik_trace) == 3
        assert fit.converged

    def test_bitwise_reproducible(self, bench_data):
        dataset, _, _ = bench_data
        a = run_cem(dataset, 2, "exponential", seed=5)
        b = run_cem(dataset, 2, "exponential", seed=5)
        assert a.loglik_trace == b.loglik_trace
        np.testing.assert_array_equal(a.assignment, b.assignment)

    def test_posterior_rows_normalized(self, bench_data):
        dataset, _, _ = bench_data
        fit = run_cem(dataset, 3, "weibull", seed=2)
        np.testing.assert_allclose(fit.posterior.sum(axis=1), 1.0, atol=1e-10)

    def test_bic_fields(self, bench_data):
        dataset, _, _ = bench_data
        fit = run_cem(dataset, 3, "weibull", seed=2)
        assert fit.n_params == 53
        assert fit.bic == pytest.approx(
            2 * fit.final_loglik - 53 * np.log(dataset.n_obs)
        )


class TestRunSEM:
    def test_deterministic(self, bench_data):
        dataset, _, _ = bench_data
        a = run_sem(dataset, 2, "exponential", seed=4, burn_in=3, iterations=8)
        b = run_sem(dataset, 2, "exponential", seed=4, burn_in=3, iterations=8)
        assert a.loglik_trace == b.loglik_trace
        np.testing.assert_array_equal(a.assignment, b.assignment)

    def test_empty_window_rejected(self, bench_data):
        dataset, _, _ = bench_data
        with pytest.raises(ValueError, match="empty averaging window"):
            run_sem(dataset, 2, "weibull", seed=4, burn_in=10, iterations=10)

    def test_agrees_with_cem(self, bench_data):
        dataset, truth, _ = bench_data
        cem = run_cem(dataset, 3, "weibull", seed=2)
        sem = run_sem(dataset, 3, "weibull", seed=2, burn_in=20, iterations=60)
        assert ari(cem.assignment, sem.assignment) >= 0.9
        # align SEM clusters to CEM by Gaussian means before comparing
        cem_means = np.array([c.gaussian.mean for c in cem.params.clusters])
        for s_cluster in sem.params.clusters:
            g = int(np.argmin(np.sum((cem_means - s_cluster.gaussian.mean) ** 2, axis=1)))
            c_cluster = cem.params.clusters[g]
            np.testing.assert_allclose(
                s_cluster.survival.beta, c_cluster.survival.beta, atol=0.2
            )
            assert s_cluster.survival.baseline.shape == pytest.approx(
                c_cluster.survival.baseline.shape, abs=0.4
            )
