import math

import numpy as np
import pytest
from scipy.special import expit

from ordmlm import engine as E
from ordmlm.data import EncodedDataset
from ordmlm.engine import (
    ClusterData,
    FitError,
    ModelSpec,
    ParamVector,
    category_probs,
    cluster_log_integrand,
    cumulative_eta,
    find_cluster_mode,
    fit,
    fit_fixed_effects,
    ghq_cluster_loglik,
    total_ghq_minus2ll,
    total_minus2ll,
)
from ordmlm.simulate import CovariateModel, SimConfig, generate

def simulated(seed=12345, J=50, n=200, tau=0.2, beta=(0.12,), thresholds=(-2.0, 0.0, 0.3)):
    covs = tuple(
        CovariateModel(f"x{i}", (0.3213, 0.6274, 0.0513)) for i in range(len(beta))
    )
    cfg = SimConfig(
        true_params=ParamVector(np.asarray(thresholds), np.asarray(beta), tau),
        n_clusters=J,
        n_per_cluster=n,
        covariates=covs,
        seed=seed,
    )
    data, u = generate(cfg)
    return cfg, data, u


def random_cluster(rng, size=None, tau=None, beta=np.array([0.12])):
    thresholds = np.array([-2.0, 0.0, 0.3])
    size = size if size is not None else int(rng.integers(1, 11))
    tau = tau if tau is not None else float(rng.uniform(0.05, 1.0))
    params = ParamVector(thresholds, beta, tau)
    u = rng.normal(0, math.sqrt(tau))
    x = rng.integers(0, 3, (size, beta.size)).astype(float)
    cum = expit(thresholds[None, :] + x @ beta[:, None] + u)
    responses = 1 + (rng.random(size)[:, None] > cum).sum(axis=1)
    return params, ClusterData(responses, x)


def trapezoid_cluster_loglik(params, cluster, center, half_width, points=20001):
    """Brute-force marginal log-likelihood by trapezoid integration."""
    grid = np.linspace(center - half_width, center + half_width, points)
    vals = np.array([cluster_log_integrand(params, cluster, float(v))[0] for v in grid])
    peak = vals.max()
    return peak + math.log(np.trapezoid(np.exp(vals - peak), grid))


class TestCumulativeEta:
    def test_intercept_only(self, model1_params):
        assert cumulative_eta(model1_params, None, 0.0, 1) == pytest.approx(-1.95)

    def test_model3_second_threshold(self, model3_params):
        assert cumulative_eta(model3_params, [0, 0, 0], 0.0, 2) == pytest.approx(-0.48)

    def test_cancellation(self, model3_params):
        x = [1.0, 2.0, 0.5]
        shift = float(np.dot(x, model3_params.beta))
        u = -shift - model3_params.thresholds[2]
        assert cumulative_eta(model3_params, x, u, 3) == pytest.approx(0.0, abs=1e-12)

    def test_k_out_of_range(self, model3_params):
        with pytest.raises(ValueError):
            cumulative_eta(model3_params, [0, 0, 0], 0.0, 4)
        with pytest.raises(ValueError):
            cumulative_eta(model3_params, [0, 0, 0], 0.0, 0)


class TestCategoryProbs:
    def test_intercept_only_estimates(self, model1_params):
        probs = category_probs(model1_params, None, 0.0)
        np.testing.assert_allclose(
            probs, [0.1247, 0.3578, 0.0698, 0.4477], atol=5e-4
        )

    def test_direct_logistic(self):
        params = ParamVector(np.array([0.0, 1.0, 2.0]), np.zeros(0), 0.1)
        probs = category_probs(params)
        F1, F2 = expit(1.0), expit(2.0)
        np.testing.assert_allclose(probs, [0.5, F1 - 0.5, F2 - F1, 1 - F2], atol=1e-12)
        assert F1 == pytest.approx(0.731059, abs=1e-6)
        assert F2 == pytest.approx(0.880797, abs=1e-6)

    def test_model3_baseline(self, model3_params):
        probs = category_probs(model3_params, [0, 0, 0])
        np.testing.assert_allclose(probs, [0.0871, 0.2952, 0.0703, 0.5474], atol=5e-4)

    def test_sums_to_one_and_positive(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            K = int(rng.integers(2, 7))
            th = np.sort(rng.normal(0, 2, K - 1))
            th = th + np.arange(K - 1) * 1e-6
            params = ParamVector(th, rng.normal(0, 1, 2), 0.3)
            probs = category_probs(params, rng.normal(0, 1, 2), rng.normal(0, 2))
            assert abs(probs.sum() - 1.0) <= 1e-12
            assert (probs > 0).all()

    def test_nonincreasing_thresholds_rejected(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            ParamVector(np.array([0.0, 0.0]), np.zeros(0), 0.1)

    def test_dimension_mismatch(self, model3_params):
        with pytest.raises(ValueError, match="scores"):
            category_probs(model3_params, [0, 0])

    def test_reparameterization_invariance(self):
        # shifting thresholds and the slope of an always-1 score cancels
        base = ParamVector(np.array([-1.0, 0.2, 0.9]), np.array([0.3]), 0.1)
        shifted = ParamVector(base.thresholds + 0.7, np.array([0.3 - 0.7]), 0.1)
        np.testing.assert_allclose(
            category_probs(base, [1.0]), category_probs(shifted, [1.0]), atol=1e-15
        )


class TestClusterLogIntegrand:
    def test_empty_cluster(self):
        params = ParamVector(np.array([0.0]), np.zeros(0), 0.5)
        cluster = ClusterData(np.zeros(0, dtype=int), np.zeros((0, 0)))
        g0, d1, d2 = cluster_log_integrand(params, cluster, 0.0)
        assert g0 == pytest.approx(-0.5 * math.log(2 * math.pi * 0.5))
        assert d1 == pytest.approx(0.0)
        g1 = cluster_log_integrand(params, cluster, 0.7)[0]
        assert g1 == pytest.approx(g0 - 0.7**2 / (2 * 0.5))

    def test_single_observation_hand_value(self):
        # K=2, one response at level 1: g(0) = log F(theta_1) - log(2 pi tau)/2
        tau = 0.25
        params = ParamVector(np.array([0.4]), np.zeros(0), tau)
        cluster = ClusterData(np.array([1]), np.zeros((1, 0)))
        g0 = cluster_log_integrand(params, cluster, 0.0)[0]
        assert g0 == pytest.approx(
            math.log(expit(0.4)) - 0.5 * math.log(2 * math.pi * tau), abs=1e-12
        )

    def test_derivative_vanishes_at_mode(self):
        rng = np.random.default_rng(41)
        for _ in range(25):
            params, cluster = random_cluster(rng)
            state = find_cluster_mode(params, cluster)
            d1 = cluster_log_integrand(params, cluster, state.mode)[1]
            assert abs(d1) <= 1e-8

    def test_requires_positive_tau(self):
        params = ParamVector(np.array([0.0]), np.zeros(0), 0.0)
        cluster = ClusterData(np.array([1]), np.zeros((1, 0)))
        with pytest.raises(ValueError):
            cluster_log_integrand(params, cluster, 0.0)

    def test_derivatives_match_finite_differences(self):
        # first derivative: central differences of g; second derivative:
        # central differences of the analytic first derivative (a pure
        # second difference of g at step 1e-5 sits at float roundoff)
        rng = np.random.default_rng(8)
        step = 1e-5
        for _ in range(300):
            params, cluster = random_cluster(rng)
            u = float(rng.normal(0, 1.5))
            g, d1, d2 = cluster_log_integrand(params, cluster, u)
            gp, d1p, _ = cluster_log_integrand(params, cluster, u + step)
            gm, d1m, _ = cluster_log_integrand(params, cluster, u - step)
            fd1 = (gp - gm) / (2 * step)
            fd2 = (d1p - d1m) / (2 * step)
            assert abs(d1 - fd1) <= 1e-5 * max(1.0, abs(d1))
            assert abs(d2 - fd2) <= 1e-5 * max(1.0, abs(d2))


class TestFindClusterMode:
    def test_balanced_cluster_mode_zero(self):
        # equal counts at the extreme levels make the score vanish at u = 0
        params = ParamVector(np.array([0.0]), np.zeros(0), 0.4)
        cluster = ClusterData(np.array([1, 2, 1, 2]), np.zeros((4, 0)))
        state = find_cluster_mode(params, cluster)
        assert state.mode == pytest.approx(0.0, abs=1e-9)
        assert state.curvature < 0

    def test_laplace_vs_ghq_small_tau(self):
        # at tau = 0.05 the prior dominates and Laplace tracks quadrature
        rng = np.random.default_rng(2)
        for _ in range(50):
            params, cluster = random_cluster(rng, tau=0.05)
            state = find_cluster_mode(params, cluster)
            assert abs(state.loglik - ghq_cluster_loglik(params, cluster, 61)) <= 1e-3

    def test_laplace_accuracy_envelope_full_tau_range(self):
        # across tau up to 1 with <= 10 observations the Laplace value sits
        # within ~2e-2 of the quadrature oracle (the approximation itself is
        # no better than that there; see the acceptance suite)
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            params, cluster = random_cluster(rng)
            state = find_cluster_mode(params, cluster)
            worst = max(worst, abs(state.loglik - ghq_cluster_loglik(params, cluster, 61)))
        assert worst <= 2e-2

    def test_laplace_gap_shrinks_with_tau(self):
        cluster = ClusterData(np.array([1, 2, 2, 3, 4]), np.zeros((5, 0)))
        gaps = []
        for tau in (0.8, 0.4, 0.2, 0.1, 0.05, 0.01):
            params = ParamVector(np.array([-2.0, 0.0, 0.3]), np.zeros(0), tau)
            state = find_cluster_mode(params, cluster)
            gaps.append(abs(state.loglik - ghq_cluster_loglik(params, cluster, 61)))
        assert all(a >= b for a, b in zip(gaps, gaps[1:]))

    def test_single_binary_observation_against_trapezoid(self):
        # one K=2 observation, theta_1 = 0, tau = 0.25: the quadrature value
        # matches brute-force integration of F(u) N(u; 0, 0.25) over [-6, 6]
        # to far better than 1e-6; the Laplace value itself carries the
        # approximation's intrinsic ~8e-4 error
        tau = 0.25
        params = ParamVector(np.array([0.0]), np.zeros(0), tau)
        cluster = ClusterData(np.array([1]), np.zeros((1, 0)))
        u = np.linspace(-6.0, 6.0, 200001)
        integrand = expit(u) * np.exp(-(u**2) / (2 * tau)) / math.sqrt(2 * math.pi * tau)
        reference = math.log(np.trapezoid(integrand, u))
        ghq = ghq_cluster_loglik(params, cluster, 61)
        assert ghq == pytest.approx(reference, abs=1e-6)
        assert reference == pytest.approx(math.log(0.5), abs=1e-9)  # symmetry
        laplace = find_cluster_mode(params, cluster).loglik
        assert laplace == pytest.approx(reference, abs=1e-3)
        assert abs(laplace - reference) > 1e-5  # genuine Laplace error


class TestGhqClusterLoglik:
    def test_one_node_is_laplace(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            params, cluster = random_cluster(rng)
            state = find_cluster_mode(params, cluster)
            assert ghq_cluster_loglik(params, cluster, 1) == pytest.approx(
                state.loglik, abs=5e-13
            )

    def test_near_degenerate_tau(self):
        params = ParamVector(np.array([-0.4, 0.6]), np.zeros(0), 1e-8)
        cluster = ClusterData(np.array([1, 2, 3]), np.zeros((3, 0)))
        probs = category_probs(params)
        expected = float(np.log(probs[:3]).sum())
        prior_free = ghq_cluster_loglik(params, cluster, 61)
        assert prior_free == pytest.approx(expected, abs=1e-6)

    def test_against_trapezoid(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            params, cluster = random_cluster(rng)
            state = find_cluster_mode(params, cluster)
            sigma = (-state.curvature) ** -0.5
            reference = trapezoid_cluster_loglik(params, cluster, state.mode, 8 * sigma)
            assert abs(ghq_cluster_loglik(params, cluster, 61) - reference) <= 1e-8

    def test_node_validation(self):
        params = ParamVector(np.array([0.0]), np.zeros(0), 0.2)
        cluster = ClusterData(np.array([1]), np.zeros((1, 0)))
        for bad in (0, 2, 10, 201, -3):
            with pytest.raises(ValueError):
                ghq_cluster_loglik(params, cluster, bad)


class TestTotalMinus2ll:
    def test_boundary_equals_independent_deviance(self):
        n = 1000
        data = EncodedDataset(
            responses=np.array([1, 2] * (n // 2)),
            design=np.zeros((n, 0)),
            cluster_index=np.zeros(n, dtype=int),
            n_clusters=1,
            n_levels=2,
            covariate_names=(),
            covariate_categories=(),
            cluster_labels=("c",),
        )
        params = ParamVector(np.array([0.0]), np.zeros(0), 0.0)
        assert total_minus2ll(params, data) == pytest.approx(-2 * n * math.log(0.5))

    def test_engine_matches_per_cluster_ops(self):
        _, data, _ = simulated(seed=9, J=12, n=30)
        params = ParamVector(np.array([-1.8, 0.1, 0.5]), np.array([0.1]), 0.3)
        total = 0.0
        for j in range(data.n_clusters):
            members = data.cluster_index == j
            cluster = ClusterData(data.responses[members], data.design[members])
            total += find_cluster_mode(params, cluster).loglik
        assert total_minus2ll(params, data) == pytest.approx(-2 * total, abs=1e-9)

    def test_laplace_vs_ghq_totals(self):
        # J=50 clusters of 100: the Laplace total deviance sits within 0.15
        # of 61-node quadrature (about 1e-5 in relative terms); the gap is
        # one-signed and shrinks with tau00
        _, data, _ = simulated(seed=99, J=50, n=100, tau=0.2)
        params = ParamVector(np.array([-2.0, 0.0, 0.3]), np.array([0.12]), 0.2)
        lap = total_minus2ll(params, data)
        ghq = total_ghq_minus2ll(params, data, 61)
        assert abs(lap - ghq) <= 0.15
        assert abs(lap - ghq) / abs(ghq) <= 2e-5

    def test_deviance_decreases_with_added_covariate(self):
        cfg, data, _ = simulated(seed=21, J=25, n=80, beta=(0.4, -0.3))
        spec_small = ModelSpec(n_levels=4, covariates=("x0",), n_clusters=25)
        spec_big = ModelSpec(n_levels=4, covariates=("x0", "x1"), n_clusters=25)
        small = fit(spec_small, data)
        big = fit(
            spec_big,
            data,
            init=ParamVector(
                small.estimates.thresholds,
                np.append(small.estimates.beta, 0.0),
                max(small.estimates.tau00, 0.01),
            ),
        )
        assert big.minus2ll <= small.minus2ll + 1e-9


class TestOuterGradient:
    def test_matches_finite_differences(self):
        _, data, _ = simulated(seed=13, J=15, n=40)
        core = E._LaplaceCore(data, ("x0",))
        params = ParamVector(np.array([-1.9, 0.1, 0.4]), np.array([0.10]), 0.15)
        _, gt, gb, gtau = core.loglik_and_grad(params)
        analytic = np.concatenate([gt, gb, [gtau]])
        eps = 1e-6
        fd = []
        for i in range(3):
            for sign in (+1, -1):
                th = params.thresholds.copy()
                th[i] += sign * eps
                fd.append(core.loglik(ParamVector(th, params.beta, params.tau00)))
        for sign in (+1, -1):
            fd.append(
                core.loglik(ParamVector(params.thresholds, params.beta + sign * eps, params.tau00))
            )
        for sign in (+1, -1):
            fd.append(
                core.loglik(ParamVector(params.thresholds, params.beta, params.tau00 + sign * eps))
            )
        fd = np.array(fd).reshape(5, 2)
        fd_grad = (fd[:, 0] - fd[:, 1]) / (2 * eps)
        np.testing.assert_allclose(analytic, fd_grad, rtol=2e-6, atol=2e-6)


class TestFit:
    def test_recovers_simulated_truth_within_3_se(self):
        cfg, data, _ = simulated(seed=12345, J=50, n=200)
        result = fit(cfg.model_spec(), data)
        assert result.converged
        truth = np.concatenate([[-2.0, 0.0, 0.3], [0.12], [0.2]])
        est = np.concatenate(
            [result.estimates.thresholds, result.estimates.beta, [result.estimates.tau00]]
        )
        se = np.concatenate([result.se_thresholds, result.se_beta, [result.se_tau00]])
        np.testing.assert_array_less(np.abs(est - truth), 3.0 * se)

    def test_tau_zero_truth_lands_at_boundary(self):
        cfg, data, _ = simulated(seed=11, J=50, n=40, tau=0.0)
        mixed = fit(cfg.model_spec(), data)
        fixed = fit_fixed_effects(cfg.model_spec(), data)
        assert mixed.estimates.tau00 <= 0.05
        # profile deviance at tau00 = 0 within the 5% chi-square cutoff
        assert fixed.minus2ll - mixed.minus2ll <= 3.84

    def test_initialization_independence(self):
        cfg, data, _ = simulated(seed=3, J=30, n=100)
        spec = cfg.model_spec()
        a = fit(spec, data, init=ParamVector(np.array([-1.0, 0.5, 1.0]), np.array([0.5]), 0.05))
        b = fit(spec, data, init=ParamVector(np.array([-3.0, -0.5, 0.1]), np.array([-0.3]), 0.8))
        assert abs(a.minus2ll - b.minus2ll) <= 1e-6

    def test_unobserved_level_rejected(self):
        data = EncodedDataset(
            responses=np.array([1, 2, 2, 4, 1, 4] * 5),
            design=np.zeros((30, 0)),
            cluster_index=np.arange(30) % 3,
            n_clusters=3,
            n_levels=4,
            covariate_names=(),
            covariate_categories=(),
            cluster_labels=("a", "b", "c"),
        )
        with pytest.raises(FitError, match=r"\[3\]"):
            fit(ModelSpec(n_levels=4, covariates=(), n_clusters=3), data)

    def test_max_iter_flag(self):
        cfg, data, _ = simulated(seed=4, J=20, n=50)
        result = fit(cfg.model_spec(), data, max_iter=2)
        assert not result.converged

    def test_non_finite_likelihood_at_init_rejected(self):
        cfg, data, _ = simulated(seed=4, J=10, n=30)
        absurd = ParamVector(np.array([-2.0, 0.0, 0.3]), np.array([1e200]), 0.1)
        with np.errstate(all="ignore"), pytest.raises(FitError):
            fit(cfg.model_spec(), data, init=absurd)

    def test_unknown_covariate_rejected(self):
        cfg, data, _ = simulated(seed=4, J=10, n=30)
        with pytest.raises(FitError, match="mystery"):
            fit(ModelSpec(n_levels=4, covariates=("mystery",), n_clusters=10), data)

    def test_level_mismatch_rejected(self):
        cfg, data, _ = simulated(seed=4, J=10, n=30)
        with pytest.raises(FitError, match="levels"):
            fit(ModelSpec(n_levels=3, covariates=("x0",), n_clusters=10), data)

    def test_parameter_rows_shape(self):
        cfg, data, _ = simulated(seed=5, J=10, n=60)
        result = fit(cfg.model_spec(), data)
        rows = result.parameter_rows()
        names = [r[0] for r in rows]
        assert names == ["threshold_1", "threshold_2", "threshold_3", "x0", "tau00"]

    def test_threshold_order_enforced_in_estimates(self):
        cfg, data, _ = simulated(seed=6, J=10, n=60)
        result = fit(cfg.model_spec(), data)
        assert np.all(np.diff(result.estimates.thresholds) > 0)
