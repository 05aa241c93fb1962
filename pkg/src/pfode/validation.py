"""Cross-module invariant checks used by ``pfode validate``.

Each check returns a :class:`CheckResult`; the suite itself never raises on a
failed invariant, so a table can always be printed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bounds import BoundEngine, BoundInputs, mu_integral, mu_integral_quadrature
from .errors import DomainError
from .metrics import w2_gaussian
from .sampler import SamplerConfig, prior_law, propagate_affine, reference_ode
from .schedules import NoiseSchedule, quadrature_phi, quadrature_variance
from .targets import GaussianTarget

__all__ = ["CheckResult", "CorruptedPhi", "run_suite", "CHECK_NAMES"]

CHECK_NAMES = (
    "closed_form_phi",
    "closed_form_variance",
    "closed_form_mu_integral",
    "prior_error",
    "contraction",
    "fixed_point",
    "gamma_range",
    "score_error_linearity",
    "bound_validity",
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool | None  # None: not applicable
    value: float | None
    threshold: float | None
    detail: str = ""

    @property
    def status(self) -> str:
        return "skip" if self.passed is None else ("pass" if self.passed else "FAIL")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "value": self.value,
            "threshold": self.threshold,
            "detail": self.detail,
        }


class CorruptedPhi(NoiseSchedule):
    """Test hook: delegates to ``base`` but scales the step coefficient phi.

    Everything else (f, g, variance, step integrals of f and g^2) is left
    intact, so only checks that look at phi or at sampler output see it.
    """

    def __init__(self, base: NoiseSchedule, factor: float = 1.01):
        self.base = base
        self.factor = float(factor)
        self.family = base.family
        self.variance_preserving = base.variance_preserving
        self.variance_exploding = base.variance_exploding
        self.quadrature = base.quadrature

    @property
    def params(self):
        return {**self.base.params, "phi_factor": self.factor}

    def __getattr__(self, name):
        # only reached for attributes not found on the wrapper
        return getattr(self.base, name)

    def f(self, t):
        return self.base.f(t)

    def g2(self, t):
        return self.base.g2(t)

    def g2_and_variance(self, t):
        return self.base.g2_and_variance(t)

    def cumulative_drift(self, t):
        return self.base.cumulative_drift(t)

    def drift_between(self, lo, width):
        return self.base.drift_between(lo, width)

    def diffusion_between(self, lo, width):
        return self.base.diffusion_between(lo, width)

    def variance(self, t):
        return self.base.variance(t)

    def phi_between(self, lo, width):
        return self.factor * np.asarray(self.base.phi_between(lo, width))


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def _check_phi(sched, T, K):
    eta = T / K
    steps = sorted({1, 2, K // 2 or 1, K})
    worst = 0.0
    for k in steps:
        lo = T - k * eta
        worst = max(worst, _rel(float(sched.phi_between(lo, eta)), quadrature_phi(sched, lo, lo + eta)))
    return CheckResult("closed_form_phi", worst <= 1e-9, worst, 1e-9, f"steps {steps}")


def _check_variance(sched, T):
    worst = max(_rel(float(sched.variance(t)), quadrature_variance(sched, t)) for t in (0.25 * T, 0.5 * T, T))
    return CheckResult("closed_form_variance", worst <= 1e-9, worst, 1e-9)


def _check_mu(sched, m0, T):
    err = _rel(mu_integral(sched, m0, T), mu_integral_quadrature(sched, m0, T))
    return CheckResult("closed_form_mu_integral", err <= 1e-10, err, 1e-10)


def _is_stationary(target, sched) -> bool:
    if not (sched.variance_preserving and isinstance(target, GaussianTarget)):
        return False
    return bool(np.allclose(target.mean, 0.0, atol=0) and np.allclose(target.cov, np.eye(target.d), rtol=0, atol=1e-14))


def run_suite(
    sched: NoiseSchedule,
    target,
    T: float,
    K: int,
    M: float = 0.0,
    policy: str = "fixed",
    reference_tol: float = 1e-10,
) -> list[CheckResult]:
    """Run every applicable invariant for one (schedule, target, T, K, M)."""
    if not isinstance(target, GaussianTarget):
        raise DomainError("the validation suite needs a Gaussian target (exact laws)")
    config = SamplerConfig(T=T, K=K)
    results = [_check_phi(sched, T, K), _check_variance(sched, T), _check_mu(sched, target.m0, T)]

    init = math.exp(-mu_integral(sched, target.m0, T)) * target.l2_norm
    p_T = target.marginal_law(sched, T)
    prior = prior_law(sched, T, target.d)
    w_prior = w2_gaussian(p_T, prior).value
    bound_prior = math.exp(-float(sched.cumulative_drift(T))) * target.l2_norm
    results.append(
        CheckResult("prior_error", w_prior <= bound_prior + 1e-12, w_prior, bound_prior, "W2(p_T, prior) vs exp(-Lambda(T)) ||x0||")
    )

    ref = reference_ode(sched, target, T, tol=reference_tol)
    w_ref = w2_gaussian(ref.law, target.marginal_law(sched, 0.0)).value
    results.append(CheckResult("contraction", w_ref <= init + 1e-8, w_ref, init + 1e-8, "continuous flow from the prior"))

    exact_run = propagate_affine(sched, target, config)
    if _is_stationary(target, sched):
        drift = max(w2_gaussian(law, prior).value for law in exact_run.laws.values())
        results.append(CheckResult("fixed_point", drift <= 1e-12, drift, 1e-12, "max_k W2(law(u_k), law(u_0))"))
    else:
        results.append(CheckResult("fixed_point", None, None, None, "target is not stationary for this schedule"))

    inputs = BoundInputs.from_target(target, sched, T=T, K=K, M=M)
    engine = BoundEngine(inputs)
    report = engine.evaluate(K, store_per_step=False)
    if report.gate_passed:
        ok = 0 < report.gamma_min and report.gamma_max <= 1
        results.append(CheckResult("gamma_range", ok, report.gamma_min, 0.0, f"gamma in [{report.gamma_min:.6g}, {report.gamma_max:.6g}]"))
    else:
        results.append(CheckResult("gamma_range", None, None, None, "step size above eta_bar"))

    if M > 0:
        doubled = BoundEngine(inputs.with_(M=2 * M)).evaluate(K, store_per_step=False)
        ratio = doubled.E2 / report.E2
        results.append(CheckResult("score_error_linearity", abs(ratio - 2) <= 1e-12, ratio, 2.0, "E2(2M) / E2(M)"))
    else:
        zero = report.E2 == 0.0
        results.append(CheckResult("score_error_linearity", zero, report.E2, 0.0, "E2 at M = 0"))

    if report.gate_passed:
        run = exact_run if M == 0 else propagate_affine(sched, target, config, M=M, policy=policy, keep=())
        w_k = w2_gaussian(run.terminal, target.marginal_law(sched, 0.0)).value
        results.append(
            CheckResult("bound_validity", w_k <= report.total + 1e-9, w_k, report.total, "exact W2 of the K-th iterate vs bound")
        )
    else:
        results.append(CheckResult("bound_validity", None, None, None, "step size above eta_bar"))
    return results
