"""Probability-flow ODE samplers.

The reverse-time ODE started from the Gaussian prior N(0, v(T) I) is

    dy/dt = f(T - t) y + g(T - t)^2 score(y, T - t) / 2.

:func:`exp_integrator_step` solves the linear part exactly over a step and
freezes the score at the step's left endpoint. :func:`euler_step` is the
plain Euler baseline. For Gaussian targets the exponential-integrator
iteration is affine in the state, so :func:`propagate_affine` carries the
exact law of every iterate, and :func:`reference_ode` integrates the
continuous flow to a tight tolerance.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConfigError, DomainError, NumericError
from .metrics import GaussianLaw
from .schedules import NoiseSchedule
from .targets import GaussianTarget, ScoreOracle

__all__ = [
    "SamplerConfig",
    "SamplerRun",
    "ReferenceSolution",
    "make_rng",
    "sample_prior",
    "prior_law",
    "step_window",
    "exp_integrator_step",
    "euler_step",
    "run_sampler",
    "propagate_affine",
    "reference_ode",
]


@dataclass(frozen=True)
class SamplerConfig:
    T: float
    K: int
    seed: int = 0
    n_samples: int = 1

    def __post_init__(self):
        if not (isinstance(self.T, (int, float)) and math.isfinite(self.T) and self.T > 0):
            raise ConfigError(f"T must be a positive finite number, got {self.T!r}")
        if isinstance(self.K, bool) or not isinstance(self.K, (int, np.integer)) or self.K < 1:
            raise ConfigError(f"K must be an integer >= 1, got {self.K!r}")
        if isinstance(self.n_samples, bool) or not isinstance(self.n_samples, (int, np.integer)) or self.n_samples < 1:
            raise ConfigError(f"n_samples must be an integer >= 1, got {self.n_samples!r}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "K", int(self.K))

    @property
    def eta(self) -> float:
        return self.T / self.K

    def to_dict(self) -> dict:
        return {"T": self.T, "K": self.K, "eta": self.eta, "seed": self.seed, "n_samples": self.n_samples}


@dataclass
class SamplerRun:
    """Result of a sampler run.

    ``laws`` maps step index to the exact law (affine mode); ``samples`` maps
    step index to an (n, d) array (Monte Carlo mode). Step 0 is the prior.
    """

    config: SamplerConfig
    mode: str
    method: str = "exponential"
    laws: dict[int, GaussianLaw] = field(default_factory=dict)
    samples: dict[int, np.ndarray] = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def terminal(self):
        K = self.config.K
        return self.laws[K] if self.mode == "affine_exact" else self.samples[K]

    def to_dict(self, include_wall_time: bool = True) -> dict:
        out = {"config": self.config.to_dict(), "mode": self.mode, "method": self.method}
        if self.mode == "affine_exact":
            out["checkpoints"] = {str(k): law.to_dict() for k, law in sorted(self.laws.items())}
        else:
            out["checkpoints"] = {
                str(k): {
                    "n": int(x.shape[0]),
                    "mean": x.mean(axis=0).tolist(),
                    "cov": np.atleast_2d(np.cov(x, rowvar=False)).tolist() if x.shape[0] > 1 else None,
                }
                for k, x in sorted(self.samples.items())
            }
        if include_wall_time:
            out["wall_time"] = self.wall_time
        return out

    def write_samples_csv(self, path, k: int | None = None):
        x = self.samples[self.config.K if k is None else k]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(x.shape[1])])
            writer.writerows([[repr(float(v)) for v in row] for row in x])


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator; ``seed`` may be an int or a SeedSequence."""
    return np.random.Generator(np.random.Philox(seed))


def prior_law(sched: NoiseSchedule, T: float, d: int) -> GaussianLaw:
    return GaussianLaw(np.zeros(d), float(sched.variance(T)) * np.eye(d))


def sample_prior(sched: NoiseSchedule, T: float, d: int, rng: np.random.Generator, n: int | None = None):
    """Draw from N(0, v(T) I_d); a (d,) vector, or (n, d) if ``n`` is given."""
    if not T > 0:
        raise DomainError(f"T must be positive, got {T}")
    shape = (d,) if n is None else (n, d)
    return math.sqrt(float(sched.variance(T))) * rng.standard_normal(shape)


def step_window(T: float, K: int, k: int):
    """Forward-time window [lo, lo + eta] covered by reverse step k."""
    if not 1 <= k <= K:
        raise DomainError(f"step index k={k} outside 1..{K}")
    return T * (K - k) / K, T / K


def _check_step(k: int, T: float, eta: float):
    K = round(T / eta)
    if not (1 <= k <= K) or abs(K * eta - T) > 1e-9 * T:
        raise DomainError(f"step index k={k} outside 1..K for T={T}, eta={eta}")
    return K


def _checked_score(oracle, u, tau, k):
    s = oracle(u, tau, k)
    if not np.all(np.isfinite(s)):
        raise NumericError(f"non-finite score at step k={k} (time {tau})")
    return s


def exp_integrator_step(sched: NoiseSchedule, oracle, T: float, k: int, eta: float, u_prev):
    """u_k = A_k u_{k-1} + phi_k score(u_{k-1}, T - (k-1) eta) / 2."""
    K = _check_step(k, T, eta)
    lo, width = step_window(T, K, k)
    u_prev = np.asarray(u_prev, dtype=float)
    amp = float(np.exp(sched.drift_between(lo, width)))
    coef = float(sched.phi_between(lo, width))
    return amp * u_prev + 0.5 * coef * _checked_score(oracle, u_prev, T * (K - k + 1) / K, k)


def euler_step(sched: NoiseSchedule, oracle, T: float, k: int, eta: float, u_prev):
    """u_k = u_{k-1} + eta [f u_{k-1} + g^2 score / 2], all at time T - (k-1) eta."""
    K = _check_step(k, T, eta)
    tau = T * (K - k + 1) / K
    u_prev = np.asarray(u_prev, dtype=float)
    s = _checked_score(oracle, u_prev, tau, k)
    return u_prev + eta * (float(sched.f(tau)) * u_prev + 0.5 * float(sched.g2(tau)) * s)


def run_sampler(
    sched: NoiseSchedule,
    oracle: ScoreOracle,
    config: SamplerConfig,
    method: str = "exponential",
    checkpoints=(),
) -> SamplerRun:
    """Monte Carlo run from ``n_samples`` prior draws; keeps the prior, the
    terminal cloud and any requested intermediate steps."""
    if method not in ("exponential", "euler"):
        raise ConfigError(f"unknown method {method!r}")
    step = exp_integrator_step if method == "exponential" else euler_step
    start = time.perf_counter()
    T, K, eta = config.T, config.K, config.eta
    u = sample_prior(sched, T, oracle.target.d, make_rng(config.seed), config.n_samples)
    keep = {0, K, *(int(k) for k in checkpoints)}
    samples = {0: u.copy()}
    for k in range(1, K + 1):
        u = step(sched, oracle, T, k, eta, u)
        if k in keep:
            samples[k] = u.copy()
    return SamplerRun(config, "monte_carlo", method, samples=samples, wall_time=time.perf_counter() - start)


def propagate_affine(
    sched: NoiseSchedule,
    target: GaussianTarget,
    config: SamplerConfig,
    M: float = 0.0,
    policy: str = "fixed",
    direction=None,
    oracle: ScoreOracle | None = None,
    keep: str | tuple = "all",
) -> SamplerRun:
    """Exact law of every exponential-integrator iterate for a Gaussian target.

    The iteration is run in the eigenbasis of the target covariance, where
    the prior covariance and every step matrix are diagonal.
    """
    if not target.is_gaussian:
        raise DomainError("affine propagation needs a Gaussian target")
    if oracle is None:
        oracle = ScoreOracle(target, sched, M, direction, policy)
    start = time.perf_counter()
    T, K = config.T, config.K
    Q = target.eigvecs
    mean = np.zeros(target.d)
    var = np.full(target.d, float(sched.variance(T)))
    wanted = None if keep == "all" else {0, K, *keep}

    def law():
        return GaussianLaw(Q @ mean, (Q * var) @ Q.T)

    laws = {0: law()}
    c = np.arange(K - 1, -1, -1)  # forward-window index of step k = 1..K
    lo, width = T * c / K, T / K
    tau = T * (c + 1) / K
    amp = np.exp(sched.drift_between(lo, width)) + np.zeros(K)
    coef = sched.phi_between(lo, width) + np.zeros(K)
    lam = target.marginal_eigvals(sched, tau)
    alpha = np.exp(-sched.cumulative_drift(tau))
    gain = amp[:, None] - 0.5 * coef[:, None] / lam
    pert = np.array([Q.T @ oracle.perturbation(k) for k in range(1, K + 1)]) if oracle.M else np.zeros((K, target.d))
    shift = 0.5 * coef[:, None] * (alpha[:, None] * target.mean_eig / lam + pert)
    for k in range(1, K + 1):
        mean = gain[k - 1] * mean + shift[k - 1]
        var = gain[k - 1] ** 2 * var
        if wanted is None or k in wanted:
            laws[k] = law()
    return SamplerRun(config, "affine_exact", "exponential", laws=laws, wall_time=time.perf_counter() - start)


@dataclass
class ReferenceSolution:
    """Continuous-flow solution: a law for Gaussian targets, samples otherwise."""

    law: GaussianLaw | None
    samples: np.ndarray | None
    error_estimate: float
    tol: float
    n_rhs: int


def _solve(rhs, y0, T, tol):
    sol = solve_ivp(rhs, (0.0, T), y0, method="DOP853", rtol=tol, atol=tol * 1e-2)
    if not sol.success:
        raise NumericError(f"reference ODE failed: {sol.message}")
    return sol.y[:, -1], sol.nfev


def reference_ode(
    sched: NoiseSchedule,
    target,
    T: float,
    tol: float = 1e-10,
    samples: np.ndarray | None = None,
    n_samples: int = 1000,
    seed: int = 0,
) -> ReferenceSolution:
    """Integrate the probability-flow ODE over [0, T] with an adaptive 8th-order
    Runge-Kutta method.

    Gaussian targets: in the target eigenbasis each coordinate solves
    y' = (f - g^2 / (2 lambda_i)) y + g^2 alpha mu_i / (2 lambda_i), so
    y_T = Phi_i y_0 + c_i and the terminal law is N(c, v(T) diag(Phi^2)).
    The pair (Phi, c) is integrated. Other targets: the given (or freshly drawn)
    prior samples are transported jointly.

    ``error_estimate`` is the discrepancy against a rerun at tol / 10.
    """
    if not tol > 0:
        raise DomainError(f"tol must be positive, got {tol}")
    if target.is_gaussian:
        d = target.d

        def rhs(t, y):
            tau = T - t
            lam = target.marginal_eigvals(sched, tau)
            f, g2 = float(sched.f(tau)), float(sched.g2(tau))
            alpha = float(np.exp(-sched.cumulative_drift(tau)))
            rate = f - 0.5 * g2 / lam
            return np.concatenate([rate * y[:d], rate * y[d:] + 0.5 * g2 * alpha * target.mean_eig / lam])

        y0 = np.concatenate([np.ones(d), np.zeros(d)])
        y, nfev = _solve(rhs, y0, T, tol)
        y_fine, _ = _solve(rhs, y0, T, tol / 10)
        Q = target.eigvecs
        v_T = float(sched.variance(T))
        law = GaussianLaw(Q @ y[d:], (Q * (v_T * y[:d] ** 2)) @ Q.T)
        err = float(np.max(np.abs(y - y_fine)))
        return ReferenceSolution(law, None, err, tol, nfev)

    if samples is None:
        samples = sample_prior(sched, T, target.d, make_rng(seed), n_samples)
    shape = samples.shape

    def rhs(t, y):
        tau = T - t
        x = y.reshape(shape)
        return (float(sched.f(tau)) * x + 0.5 * float(sched.g2(tau)) * target.score(x, tau, sched)).ravel()

    y, nfev = _solve(rhs, samples.ravel(), T, tol)
    y_fine, _ = _solve(rhs, samples.ravel(), T, tol / 10)
    return ReferenceSolution(None, y.reshape(shape), float(np.max(np.abs(y - y_fine))), tol, nfev)
