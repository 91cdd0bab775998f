import numpy as np
import pytest
from scipy.stats import norm

from frailtymix import (
    Dataset,
    Exponential,
    ModelConfig,
    Observation,
    SurvivalParams,
    VariableSpec,
    bic,
    count_parameters,
    frailty_estimates,
    grid_search,
    hazard_curve,
    run_cem,
    survival_curve,
)
from frailtymix.baselines import Lognormal
from frailtymix.em import ClusterParams, ModelFit, ModelParams
from frailtymix.frailty import THETA_MIN


class TestCountParameters:
    def test_application_shape(self):
        config = ModelConfig(
            n_clusters=3, family="lognormal", n_regression=2, n_continuous=2,
            categories=(2, 2, 2),
        )
        assert count_parameters(config) == 44

    def test_simulation_shape(self):
        config = ModelConfig(
            n_clusters=3, family="weibull", n_regression=5, n_continuous=2,
            categories=(2, 3),
        )
        assert count_parameters(config) == 53

    def test_smallest_model(self):
        config = ModelConfig(n_clusters=1, family="exponential")
        assert count_parameters(config) == 3

    def test_from_dataset(self, bench_data):
        dataset, _, _ = bench_data
        config = ModelConfig.from_dataset(dataset, 3, "weibull")
        assert count_parameters(config) == 53

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            ModelConfig(n_clusters=0, family="weibull")
        with pytest.raises(ValueError):
            ModelConfig(n_clusters=2, family="weibull", restarts=0)


class TestBic:
    def test_zero(self):
        assert bic(0.0, 0, 100) == 0.0

    def test_arithmetic(self):
        assert bic(-100.0, 10, np.e**2) == pytest.approx(-220.0)

    def test_decreasing_in_d(self):
        values = [bic(-500.0, d, 1000) for d in range(1, 6)]
        assert np.all(np.diff(values) < 0)


class TestGridSearch:
    def test_single_cell_matches_run_cem(self, bench_data):
        dataset, _, _ = bench_data
        grid = grid_search(dataset, [3], ["weibull"], restarts=1, seed=10)
        from frailtymix.selection import _restart_seed

        direct = run_cem(dataset, 3, "weibull", _restart_seed(10, 0, 0, 0))
        assert grid.best.loglik == direct.final_loglik
        assert grid.best.bic == direct.bic

    def test_table_shape(self, bench_data):
        dataset, _, _ = bench_data
        grid = grid_search(
            dataset, [1, 2], ["exponential", "weibull"], restarts=1, seed=10
        )
        assert len(grid.cells) == 4
        assert [(c.n_clusters, c.family) for c in grid.cells] == [
            (1, "exponential"), (1, "weibull"), (2, "exponential"), (2, "weibull"),
        ]

    def test_best_is_argmax(self, bench_data):
        dataset, _, _ = bench_data
        grid = grid_search(dataset, [1, 2, 3], ["weibull"], restarts=1, seed=10)
        valid = [c.bic for c in grid.cells if not c.failed]
        assert grid.best.bic == max(valid)

    def test_failed_cell_excluded(self, rng):
        # 20 observations cannot sustain 4 survival fits above the size floor
        schema = (VariableSpec("x", "continuous", in_marginal=True, in_regression=True),)
        obs = tuple(
            Observation(float(rng.exponential(1.0)), 1, "H1", (float(rng.normal(g, 0.1)),))
            for g in range(4)
            for _ in range(5)
        )
        dataset = Dataset(schema, obs)
        grid = grid_search(dataset, [1, 4], ["weibull"], restarts=2, seed=3)
        by_G = {c.n_clusters: c for c in grid.cells}
        assert by_G[4].failed
        assert np.isnan(by_G[4].bic)
        assert grid.best.n_clusters == 1


@pytest.fixture(scope="module")
def lognormal_cluster():
    params = SurvivalParams(
        np.array([0.235]), Lognormal(-2.387, 1.754), 0.5
    )
    covariance = np.diag([0.01, 0.02, 0.015, 0.05])
    return params, covariance


class TestSurvivalCurve:
    def test_early_times_near_one(self, lognormal_cluster):
        params, covariance = lognormal_cluster
        curve = survival_curve(params, covariance, np.zeros(1), [1e-9, 1e-6])
        np.testing.assert_allclose(curve.value, 1.0, atol=1e-6)
        se = (curve.ci_high - curve.ci_low) / (2 * 1.959963984540054)
        assert np.all(se < 1e-6)

    def test_baseline_value(self, lognormal_cluster):
        params, covariance = lognormal_cluster
        curve = survival_curve(params, covariance, np.zeros(1), [1.0])
        z = (np.log(1.0) + 2.387) / 1.754
        assert curve.value[0] == pytest.approx(norm.sf(z), rel=1e-10)
        assert curve.value[0] == pytest.approx(0.0868, abs=5e-4)

    def test_monotone_and_banded(self, lognormal_cluster):
        params, covariance = lognormal_cluster
        t = np.linspace(0.05, 20.0, 60)
        curve = survival_curve(params, covariance, np.array([1.0]), t)
        assert np.all(np.diff(curve.value) <= 0)
        assert np.all(curve.ci_low <= curve.value)
        assert np.all(curve.value <= curve.ci_high)
        assert np.all(curve.ci_low >= 0.0)
        assert np.all(curve.ci_high <= 1.0)

    def test_missing_covariance_drops_bands(self, lognormal_cluster):
        params, _ = lognormal_cluster
        curve = survival_curve(params, None, np.zeros(1), [1.0, 2.0])
        assert not curve.has_bands
        assert curve.ci_low is None

    def test_bad_grid_rejected(self, lognormal_cluster):
        params, covariance = lognormal_cluster
        with pytest.raises(ValueError):
            survival_curve(params, covariance, np.zeros(1), [2.0, 1.0])
        with pytest.raises(ValueError):
            survival_curve(params, covariance, np.zeros(1), [-1.0, 1.0])

    def test_profile_length_checked(self, lognormal_cluster):
        params, covariance = lognormal_cluster
        with pytest.raises(ValueError):
            survival_curve(params, covariance, np.zeros(3), [1.0])

    def test_variance_matches_fd_propagation(self, lognormal_cluster, rng):
        # finite-difference oracle: perturb each natural parameter in the
        # band's scope and propagate through the natural covariance
        params, covariance = lognormal_cluster
        profile = np.array([0.7])
        t = np.linspace(0.2, 10.0, 10)
        curve = survival_curve(params, covariance, profile, t)

        def s_of(natural):
            p = SurvivalParams(natural[:1], Lognormal(natural[1], natural[2]), params.theta)
            risk = np.exp(profile @ p.beta)
            return np.exp(-p.baseline.cum_hazard(t) * risk)

        natural = params.natural_params()[:-1]
        grad = np.empty((3, t.size))
        for k in range(3):
            h = 1e-6 * (1 + abs(natural[k]))
            up, down = natural.copy(), natural.copy()
            up[k] += h
            down[k] -= h
            grad[k] = (s_of(up) - s_of(down)) / (2 * h)
        jac = np.array([1.0, 1.0, natural[2], params.theta])  # natural-scale map
        cov_nat = (covariance * np.outer(jac, jac))[:-1, :-1]
        variance = np.einsum("it,ij,jt->t", grad, cov_nat, grad)
        se = np.sqrt(variance)
        # one side of the band can clip at 0 or 1; the wider side is unclipped
        reported = np.maximum(
            curve.ci_high - curve.value, curve.value - curve.ci_low
        ) / 1.959963984540054
        np.testing.assert_allclose(reported, se, rtol=1e-5)


class TestHazardCurve:
    def test_null_profile_is_baseline(self, lognormal_cluster):
        params, _ = lognormal_cluster
        t = np.linspace(0.1, 5.0, 20)
        curve = hazard_curve(params, np.zeros(1), t)
        np.testing.assert_allclose(curve.value, params.baseline.hazard(t), rtol=1e-12)

    def test_covariate_scaling(self, lognormal_cluster):
        params, _ = lognormal_cluster
        t = np.linspace(0.1, 5.0, 20)
        off = hazard_curve(params, np.zeros(1), t)
        on = hazard_curve(params, np.ones(1), t)
        np.testing.assert_allclose(on.value / off.value, np.exp(0.235), rtol=1e-12)

    def test_proportionality_constant_in_t(self, lognormal_cluster):
        params, _ = lognormal_cluster
        t = np.linspace(0.5, 8.0, 15)
        ratio = hazard_curve(params, np.array([2.0]), t).value / hazard_curve(
            params, np.array([-1.0]), t
        ).value
        assert np.ptp(ratio) < 1e-12


def make_fit(dataset, theta, assignment):
    cluster = ClusterParams(
        1.0, None, None,
        SurvivalParams(np.zeros(0), Exponential(1.0), theta),
    )
    return ModelFit(
        params=ModelParams((cluster,)),
        assignment=assignment,
        posterior=np.ones((dataset.n_obs, 1)),
        loglik_trace=[0.0],
        final_loglik=0.0,
        bic=0.0,
        n_params=3,
        algorithm="CEM",
        family="exponential",
        seed=0,
        converged=True,
        group_labels=dataset.group_labels,
    )


class TestFrailtyEstimates:
    @staticmethod
    def survival_only_dataset():
        schema = (VariableSpec("x", "continuous", in_marginal=True),)
        obs = tuple(
            Observation(t, 1, group, (0.0,))
            for group, times in (("H1", (0.2, 0.3, 0.5)), ("H2", (1.0, 1.5, 0.7)))
            for t in times
        )
        return Dataset(schema, obs)

    def test_crafted_cell_is_risk(self):
        from frailtymix.frailty import posterior_frailty
        from frailtymix.selection import FrailtyRow  # noqa: F401

        post = posterior_frailty(0.2, 10, 2.0)
        assert post.mean == pytest.approx(2.1429, abs=1e-4)
        assert post.ci_low > 1.0  # classified as risk

    def test_rows_cover_populated_cells(self):
        dataset = self.survival_only_dataset()
        fit = make_fit(dataset, 0.5, np.zeros(dataset.n_obs, dtype=np.intp))
        rows = frailty_estimates(fit, dataset)
        assert [(r.group, r.cluster) for r in rows] == [("H1", 1), ("H2", 1)]
        assert all(r.events == 3 for r in rows)

    def test_theta_floor_all_neutral(self):
        dataset = self.survival_only_dataset()
        fit = make_fit(dataset, THETA_MIN, np.zeros(dataset.n_obs, dtype=np.intp))
        rows = frailty_estimates(fit, dataset)
        assert all(r.significance == "neutral" for r in rows)
        assert all(r.mean == 1.0 for r in rows)

    def test_empty_cells_omitted(self):
        dataset = self.survival_only_dataset()
        assignment = np.zeros(dataset.n_obs, dtype=np.intp)
        cluster = ClusterParams(
            0.5, None, None, SurvivalParams(np.zeros(0), Exponential(1.0), 0.5)
        )
        fit = make_fit(dataset, 0.5, assignment)
        fit.params = ModelParams((fit.params.clusters[0], cluster))
        rows = frailty_estimates(fit, dataset)
        assert all(r.cluster == 1 for r in rows)
