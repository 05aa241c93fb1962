import json
import math

import numpy as np
import pytest

from pfode.errors import ConfigError, DomainError, NumericError
from pfode.metrics import w2_gaussian
from pfode.sampler import (
    SamplerConfig,
    euler_step,
    exp_integrator_step,
    make_rng,
    prior_law,
    propagate_affine,
    reference_ode,
    run_sampler,
    sample_prior,
)
from pfode.schedules import (
    CustomSchedule,
    VEExponential,
    VEPolynomial,
    VPConstant,
    VPLinear,
    VPPolynomial,
    quadrature_drift,
    quadrature_phi,
)
from pfode.targets import GaussianTarget, ScoreOracle
from pfode.bounds import mu_integral

SCHEDULES = [VEExponential(1, 1), VEPolynomial(1, 1, 1), VPConstant(2), VPLinear(1, 0.1), VPPolynomial(1, 0.1, 2)]
sids = [repr(s) for s in SCHEDULES]


class ZeroScore:
    def __init__(self, d):
        self.target = type("T", (), {"d": d})()

    def __call__(self, x, t, k=1):
        return np.zeros_like(np.asarray(x, dtype=float))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"K": 0}, {"K": 2.5}, {"K": True}, {"T": 0.0}, {"T": math.inf}, {"n_samples": 0}])
    def test_rejects(self, kw):
        base = {"T": 1.0, "K": 10}
        with pytest.raises(ConfigError):
            SamplerConfig(**{**base, **kw})

    def test_eta(self):
        assert SamplerConfig(T=6.0, K=600).eta == pytest.approx(0.01, rel=1e-15)


class TestPrior:
    def test_covariance(self):
        sched = VPConstant(2.0)
        x = sample_prior(sched, 4.0, 2, make_rng(1), n=100_000)
        v = 1 - math.exp(-8)
        cov = np.cov(x, rowvar=False)
        se_diag = v * math.sqrt(2 / 100_000)
        se_off = v / math.sqrt(100_000)
        assert np.all(np.abs(np.diag(cov) - v) <= 3 * se_diag)
        assert abs(cov[0, 1]) <= 3 * se_off

    def test_vp_limit(self):
        assert prior_law(VPLinear(1, 1), 30.0, 3).cov[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_seeded(self):
        a = sample_prior(VPConstant(1), 2.0, 3, make_rng(42), n=10)
        b = sample_prior(VPConstant(1), 2.0, 3, make_rng(42), n=10)
        np.testing.assert_array_equal(a, b)

    def test_positive_T(self):
        with pytest.raises(DomainError):
            sample_prior(VPConstant(1), 0.0, 2, make_rng(0))


class TestExponentialIntegratorStep:
    def test_stationary_fixed_point(self):
        sched = VPConstant(1.7)
        oracle = ScoreOracle(GaussianTarget.isotropic(2), sched)
        u = np.array([[0.3, -1.2], [2.0, 0.1]])
        for k in range(1, 11):
            np.testing.assert_allclose(exp_integrator_step(sched, oracle, 1.0, k, 0.1, u), u, atol=1e-15)

    def test_no_drift_no_score(self):
        u = np.array([0.4, -0.6])
        out = exp_integrator_step(VEExponential(1, 1), ZeroScore(2), 1.0, 3, 0.25, u)
        np.testing.assert_array_equal(out, u)

    def test_ve_step_against_quadrature(self):
        sched = VEExponential(1.0, 1.0)
        target = GaussianTarget([1.0, -0.5], np.diag([0.5, 2.0]))
        oracle = ScoreOracle(target, sched)
        T, K, k = 1.0, 4, 2
        eta = T / K
        lo, hi = T - k * eta, T - (k - 1) * eta
        u = np.array([0.7, 1.3])
        amp = math.exp(quadrature_drift(sched, lo, hi))
        coef = quadrature_phi(sched, lo, hi)
        expected = amp * u + 0.5 * coef * target.score(u, hi, sched)
        np.testing.assert_allclose(exp_integrator_step(sched, oracle, T, k, eta, u), expected, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("sched", SCHEDULES, ids=sids)
    def test_general_step_against_quadrature(self, sched):
        target = GaussianTarget([1.0, -0.5], np.diag([0.5, 2.0]))
        oracle = ScoreOracle(target, sched, M=0.1)
        T, K, k = 2.0, 8, 5
        eta = T / K
        lo, hi = T - k * eta, T - (k - 1) * eta
        u = np.array([0.7, 1.3])
        expected = math.exp(quadrature_drift(sched, lo, hi)) * u + 0.5 * quadrature_phi(sched, lo, hi) * oracle(u, hi, k)
        np.testing.assert_allclose(exp_integrator_step(sched, oracle, T, k, eta, u), expected, rtol=1e-10)

    def test_step_range(self):
        sched = VPConstant(1)
        with pytest.raises(DomainError):
            exp_integrator_step(sched, ZeroScore(1), 1.0, 11, 0.1, np.zeros(1))

    def test_non_finite_score(self):
        def bad(x, t, k=1):
            return np.full_like(x, np.nan)

        bad.target = GaussianTarget.isotropic(1)
        with pytest.raises(NumericError, match="k=3"):
            exp_integrator_step(VPConstant(1), bad, 1.0, 3, 0.1, np.zeros(1))


class TestEuler:
    def test_matches_exponential_when_coefficients_are_constant(self):
        sched = CustomSchedule(lambda t: 0.0, lambda t: 1.3, horizon=2.0)
        target = GaussianTarget([0.5], [[2.0]])
        oracle = ScoreOracle(target, sched)
        u = np.array([[0.2], [-1.5]])
        np.testing.assert_allclose(
            euler_step(sched, oracle, 2.0, 3, 0.2, u), exp_integrator_step(sched, oracle, 2.0, 3, 0.2, u), rtol=1e-12
        )

    def test_difference_is_second_order(self):
        sched = VPConstant(2.0)
        target = GaussianTarget([3.0], [[0.5]])
        oracle = ScoreOracle(target, sched)
        u = np.array([1.1])
        gaps = []
        for K in (10, 20, 40, 80):
            eta = 1.0 / K
            gaps.append(float(np.abs(euler_step(sched, oracle, 1.0, 1, eta, u) - exp_integrator_step(sched, oracle, 1.0, 1, eta, u))[0]))
        assert all(g > 0 for g in gaps)
        assert all(a / b >= 3.5 for a, b in zip(gaps, gaps[1:]))

    def test_exact_on_stationary_target(self):
        sched = VPConstant(2.0)
        oracle = ScoreOracle(GaussianTarget.isotropic(1), sched)
        u = np.array([1.0])
        residuals = []
        for K in (10, 20, 40):
            eta = 1.0 / K
            residuals.append(abs(float(euler_step(sched, oracle, 1.0, 1, eta, u)[0]) - 1.0))
        # score = -x and f = g^2 / 2 cancel exactly, so Euler is exact here too
        assert max(residuals) <= 1e-15

    def test_differs_from_exponential_integrator(self):
        # off stationarity the one-step disagreement is O(eta^2)
        sched = VPLinear(1.0, 1.0)
        oracle = ScoreOracle(GaussianTarget.isotropic(1, 4.0), sched)
        u = np.array([1.0])
        res = [abs(float(euler_step(sched, oracle, 1.0, 1, 1.0 / K, u)[0]) - float(exp_integrator_step(sched, oracle, 1.0, 1, 1.0 / K, u)[0])) for K in (10, 20)]
        assert res[0] > 0 and res[0] / res[1] >= 3.5


class TestRunSampler:
    def test_deterministic(self):
        sched = VPLinear(1, 0.1)
        oracle = ScoreOracle(GaussianTarget([1.0, 0.0], np.eye(2)), sched, M=0.05, policy="rotating")
        config = SamplerConfig(T=2.0, K=50, seed=3, n_samples=500)
        a = run_sampler(sched, oracle, config, checkpoints=[10])
        b = run_sampler(sched, oracle, config, checkpoints=[10])
        for k in a.samples:
            np.testing.assert_array_equal(a.samples[k], b.samples[k])
        assert json.dumps(a.to_dict(include_wall_time=False)) == json.dumps(b.to_dict(include_wall_time=False))

    def test_stationary_in_law(self):
        sched = VPConstant(2.0)
        run = run_sampler(sched, ScoreOracle(GaussianTarget.isotropic(2), sched), SamplerConfig(T=3.0, K=30, seed=1, n_samples=100))
        np.testing.assert_allclose(run.terminal, run.samples[0], atol=1e-14)

    def test_terminal_mean_against_affine(self):
        sched = VPConstant(2.0)
        target = GaussianTarget([3.0], [[0.5]])
        config = SamplerConfig(T=6.0, K=600, seed=7, n_samples=100_000)
        run = run_sampler(sched, ScoreOracle(target, sched), config)
        law = propagate_affine(sched, target, config, keep=()).terminal
        se = math.sqrt(law.cov[0, 0] / config.n_samples)
        assert abs(run.terminal.mean() - law.mean[0]) <= 3 * se

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            run_sampler(VPConstant(1), ZeroScore(1), SamplerConfig(T=1.0, K=2), method="heun")

    def test_csv(self, tmp_path):
        sched = VPConstant(2.0)
        run = run_sampler(sched, ScoreOracle(GaussianTarget.isotropic(2), sched), SamplerConfig(T=1.0, K=5, n_samples=7))
        path = tmp_path / "s.csv"
        run.write_samples_csv(path)
        back = np.loadtxt(path, delimiter=",", skiprows=1)
        np.testing.assert_array_equal(back, run.terminal)


class TestAffinePropagation:
    def test_stationary_covariance(self):
        # the flow is frozen, so every step keeps the prior covariance v(T) I
        run = propagate_affine(VPConstant(2.0), GaussianTarget.isotropic(3), SamplerConfig(T=4.0, K=40))
        prior = prior_law(VPConstant(2.0), 4.0, 3)
        for law in run.laws.values():
            np.testing.assert_allclose(law.cov, prior.cov, rtol=1e-13)
            np.testing.assert_allclose(law.mean, 0.0, atol=1e-15)

    @pytest.mark.parametrize("policy", ["fixed", "rotating"])
    def test_against_monte_carlo(self, policy):
        sched = VPLinear(1.0, 0.3)
        target = GaussianTarget([1.0, -2.0], [[0.6, 0.25], [0.25, 1.2]])
        oracle = ScoreOracle(target, sched, M=0.2, policy=policy)
        K, n = 40, 100_000
        config = SamplerConfig(T=3.0, K=K, seed=12, n_samples=n)
        checks = (1, K // 2, K)
        mc = run_sampler(sched, oracle, config, checkpoints=checks)
        exact = propagate_affine(sched, target, config, oracle=oracle, keep=checks)
        for k in checks:
            S = exact.laws[k].cov
            z = np.abs(mc.samples[k].mean(axis=0) - exact.laws[k].mean) / np.sqrt(np.diag(S) / n)
            zc = np.abs(np.cov(mc.samples[k], rowvar=False) - S) / np.sqrt((np.outer(np.diag(S), np.diag(S)) + S**2) / n)
            assert z.max() <= 4 and zc.max() <= 4

    def test_discretization_error_is_first_order(self):
        sched = VPLinear(1.0, 0.5)
        target = GaussianTarget([2.0, 0.0], np.diag([0.5, 1.5]))
        ref = reference_ode(sched, target, 3.0).law
        gaps = [w2_gaussian(propagate_affine(sched, target, SamplerConfig(T=3.0, K=K), keep=()).terminal, ref).value for K in (25, 50, 100, 200, 400)]
        # first order in eta: halving the step halves the gap
        assert all(1.8 <= a / b <= 2.2 for a, b in zip(gaps, gaps[1:]))

    def test_needs_gaussian(self):
        from pfode.targets import Convolved1DTarget

        with pytest.raises(DomainError):
            propagate_affine(VPConstant(1), Convolved1DTarget("quadratic"), SamplerConfig(T=1.0, K=2))


class TestReferenceODE:
    def test_stationary(self):
        ref = reference_ode(VPConstant(2.0), GaussianTarget.isotropic(2), 5.0)
        np.testing.assert_allclose(ref.law.cov, prior_law(VPConstant(2.0), 5.0, 2).cov, rtol=1e-9)
        np.testing.assert_allclose(ref.law.mean, 0.0, atol=1e-12)

    @pytest.mark.parametrize("sched", SCHEDULES, ids=sids)
    def test_contraction(self, sched):
        target = GaussianTarget([3.0, 0.0], np.diag([0.7, 1.0]))
        T = 2.0
        w = w2_gaussian(reference_ode(sched, target, T).law, target.marginal_law(sched, 0.0)).value
        assert w <= math.exp(-mu_integral(sched, target.m0, T)) * target.l2_norm + 1e-8

    @pytest.mark.parametrize("sched", SCHEDULES, ids=sids)
    def test_prior_error(self, sched):
        target = GaussianTarget([3.0, 0.0], np.diag([0.7, 1.0]))
        for T in (0.5, 2.0):
            w = w2_gaussian(target.marginal_law(sched, T), prior_law(sched, T, 2)).value
            assert w <= math.exp(-float(sched.cumulative_drift(T))) * target.l2_norm + 1e-12

    def test_tolerance_refinement(self):
        sched = VPLinear(1.0, 0.5)
        target = GaussianTarget([2.0, 0.0], np.diag([0.5, 1.5]))
        best = reference_ode(sched, target, 3.0, tol=1e-13).law
        gaps = [w2_gaussian(reference_ode(sched, target, 3.0, tol=tol).law, best).value for tol in (1e-4, 1e-6, 1e-8, 1e-10)]
        assert all(b <= a + 1e-13 for a, b in zip(gaps, gaps[1:]))

    def test_samples_for_non_gaussian(self):
        from pfode.targets import Convolved1DTarget

        ref = reference_ode(VPConstant(2.0), Convolved1DTarget("quadratic"), 2.0, tol=1e-8, n_samples=50, seed=1)
        assert ref.samples.shape == (50, 1)
        # quadratic potential is the standard Gaussian: stationary, so samples stay put
        prior = sample_prior(VPConstant(2.0), 2.0, 1, make_rng(1), 50)
        np.testing.assert_allclose(ref.samples, prior, atol=1e-6)

    def test_bad_tolerance(self):
        with pytest.raises(DomainError):
            reference_ode(VPConstant(1), GaussianTarget.isotropic(1), 1.0, tol=0.0)
