"""Strongly log-concave data distributions and their time-t scores.

Two target types are provided:

* :class:`GaussianTarget`, whose forward marginals stay Gaussian so every
  score and law is available in closed form;
* :class:`Convolved1DTarget`, a one-dimensional density exp(-V) whose time-t
  score is computed by quadrature over the Gaussian convolution.

:class:`ScoreOracle` wraps a target and optionally adds a deterministic
perturbation of norm exactly ``M`` to the exact score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate as _integrate
from scipy import optimize
from scipy.interpolate import CubicSpline

from .errors import ConfigError, DomainError, NumericError
from .metrics import GaussianLaw, sup_l2_norm
from .schedules import NoiseSchedule

__all__ = [
    "GaussianTarget",
    "Potential",
    "POTENTIALS",
    "Convolved1DTarget",
    "ScoreOracle",
    "L1Estimate",
    "target_from_config",
    "marginal_law",
    "exact_score",
    "strong_concavity_at",
    "lipschitz_L",
    "time_lipschitz_L1",
    "gaussian_time_lipschitz",
    "perturbed_score",
]


def _alpha_v(sched: NoiseSchedule, t):
    return np.exp(-sched.cumulative_drift(t)), sched.variance(t)


class GaussianTarget:
    """N(mean, cov) with cov symmetric positive definite."""

    is_gaussian = True

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DomainError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise DomainError("target mean and covariance must be finite")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise DomainError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        eigvals, eigvecs = np.linalg.eigh(cov)
        if eigvals[0] <= 0:
            raise DomainError(f"covariance must be positive definite (min eigenvalue {eigvals[0]:.3e})")
        self.mean = mean
        self.cov = cov
        self.eigvals = eigvals
        self.eigvecs = eigvecs
        self.mean_eig = eigvecs.T @ mean

    @classmethod
    def isotropic(cls, d: int, variance: float = 1.0, mean=None):
        mean = np.zeros(d) if mean is None else np.broadcast_to(np.asarray(mean, dtype=float), (d,))
        return cls(mean, variance * np.eye(d))

    @property
    def d(self) -> int:
        return self.mean.size

    @property
    def m0(self) -> float:
        return float(1.0 / self.eigvals[-1])

    @property
    def L0(self) -> float:
        return float(1.0 / self.eigvals[0])

    @property
    def minimizer(self) -> np.ndarray:
        return self.mean

    @property
    def second_moment(self) -> float:
        return float(self.mean @ self.mean + np.trace(self.cov))

    @property
    def l2_norm(self) -> float:
        return math.sqrt(self.second_moment)

    @property
    def grad_log_p0_origin(self) -> float:
        """||grad log p0(0)|| = ||cov^{-1} mean||."""
        return float(np.linalg.norm(self.mean_eig / self.eigvals))

    def to_config(self) -> dict:
        return {"kind": "gaussian", "mean": self.mean.tolist(), "covariance": self.cov.tolist()}

    def marginal_eigvals(self, sched: NoiseSchedule, t):
        """Eigenvalues of the time-t covariance, in the eigenbasis of the initial one."""
        alpha, v = _alpha_v(sched, t)
        return np.multiply.outer(alpha**2, self.eigvals) + np.asarray(v)[..., None]

    def marginal_law(self, sched: NoiseSchedule, t: float) -> GaussianLaw:
        if t < 0:
            raise DomainError(f"time must be nonnegative, got {t}")
        if t == 0:
            return GaussianLaw(self.mean.copy(), self.cov.copy())
        alpha, v = (float(z) for z in _alpha_v(sched, t))
        return GaussianLaw(alpha * self.mean, alpha**2 * self.cov + v * np.eye(self.d))

    def precision(self, sched: NoiseSchedule, t: float) -> np.ndarray:
        lam = self.marginal_eigvals(sched, t)
        return (self.eigvecs / lam) @ self.eigvecs.T

    def score_affine(self, sched: NoiseSchedule, t: float):
        """(G, c) with score(x) = G x + c at time t."""
        alpha = float(np.exp(-sched.cumulative_drift(t)))
        prec = self.precision(sched, t)
        return -prec, prec @ (alpha * self.mean)

    def score(self, x, t: float, sched: NoiseSchedule) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        alpha = float(np.exp(-sched.cumulative_drift(t)))
        lam = self.marginal_eigvals(sched, t)
        z = (x - alpha * self.mean) @ self.eigvecs
        return -(z / lam) @ self.eigvecs.T

    def score_time_derivative(self, x, tau: float, sched: NoiseSchedule) -> np.ndarray:
        """d/dtau of the score at forward time tau."""
        x = np.asarray(x, dtype=float)
        a_diag, offset = self._derivative_parts(tau, sched)
        z = x @ self.eigvecs
        return (z * a_diag - offset) @ self.eigvecs.T

    def _derivative_parts(self, tau, sched):
        # score = -P (x - m); dP = 2 f P - g^2 P^2, dm = -f m
        # d score = A x - (A + f P) m with A = g^2 P^2 - 2 f P, all diagonal in the eigenbasis
        tau = np.asarray(tau, dtype=float)
        lam = self.marginal_eigvals(sched, tau)
        f = np.asarray(sched.f(tau))[..., None]
        g2 = np.asarray(sched.g2(tau))[..., None]
        alpha = np.exp(-sched.cumulative_drift(tau))[..., None]
        a_diag = g2 / lam**2 - 2 * f / lam
        offset = (a_diag + f / lam) * alpha * self.mean_eig
        return a_diag, offset

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.d))
        return self.mean + (z * np.sqrt(self.eigvals)) @ self.eigvecs.T


@dataclass(frozen=True)
class Potential:
    """A convex potential V with V'' in [m0, L0] everywhere."""

    name: str
    V: Callable
    dV: Callable
    d2V: Callable
    m0: float
    L0: float


def _logcosh(x):
    x = np.abs(x)
    return x + np.log1p(np.exp(-2 * x)) - math.log(2.0)


POTENTIALS = {
    "quadratic_logcosh": Potential(
        "quadratic_logcosh",
        V=lambda x: 0.5 * x * x + _logcosh(x),
        dV=lambda x: x + np.tanh(x),
        d2V=lambda x: 1.0 + 1.0 / np.cosh(np.clip(x, -350, 350)) ** 2,
        m0=1.0,
        L0=2.0,
    ),
    "quadratic": Potential(
        "quadratic",
        V=lambda x: 0.5 * x * x,
        dV=lambda x: 1.0 * x,
        d2V=lambda x: np.ones_like(np.asarray(x, dtype=float)),
        m0=1.0,
        L0=1.0,
    ),
}

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)
_WINDOW_SIGMAS = 12.0
_WINDOW_PANELS = 16
_SPLINE_THRESHOLD = 4096
_SPLINE_POINTS = 2049


class Convolved1DTarget:
    """One-dimensional target with density proportional to exp(-V(x)).

    The time-t score is obtained from the posterior of x0 given x_t. Its
    log-density is strictly concave with curvature at least
    alpha^2 / v + m0, so a window of 12 of those standard deviations around
    the posterior mode captures the integrals to far below double precision.
    The window is integrated by composite Gauss-Legendre, vectorized over x.
    """

    is_gaussian = False
    d = 1

    def __init__(self, potential: str | Potential = "quadratic_logcosh", check_grid: int = 200001):
        if isinstance(potential, str):
            if potential not in POTENTIALS:
                raise ConfigError(f"unknown potential {potential!r}; expected one of {sorted(POTENTIALS)}")
            potential = POTENTIALS[potential]
        self.potential = potential
        grid = np.linspace(-50.0, 50.0, check_grid)
        curv = potential.d2V(grid)
        if potential.m0 <= 0 or np.any(curv < potential.m0 - 1e-12) or np.any(curv > potential.L0 + 1e-12):
            raise DomainError(f"potential {potential.name!r}: V'' leaves [m0, L0] on the check grid")
        self.minimizer = float(optimize.brentq(potential.dV, -1e3, 1e3, xtol=1e-15))
        self._v_min = float(potential.V(self.minimizer))
        w = lambda x: math.exp(-(float(potential.V(x)) - self._v_min))
        z = _integrate.quad(w, -np.inf, np.inf, epsabs=0, epsrel=1e-13, limit=500)[0]
        m1 = _integrate.quad(lambda x: x * w(x), -np.inf, np.inf, epsabs=1e-15, epsrel=1e-13, limit=500)[0]
        m2 = _integrate.quad(lambda x: x * x * w(x), -np.inf, np.inf, epsabs=0, epsrel=1e-13, limit=500)[0]
        self.normalization = z * math.exp(-self._v_min)
        self.mean = m1 / z
        self.second_moment = m2 / z

    @property
    def m0(self) -> float:
        return self.potential.m0

    @property
    def L0(self) -> float:
        return self.potential.L0

    @property
    def l2_norm(self) -> float:
        return math.sqrt(self.second_moment)

    @property
    def grad_log_p0_origin(self) -> float:
        return abs(float(self.potential.dV(0.0)))

    def to_config(self) -> dict:
        return {"kind": "convolved1d", "potential": self.potential.name}

    def log_density(self, x):
        return -(self.potential.V(np.asarray(x, dtype=float)) - self._v_min) - math.log(
            self.normalization * math.exp(self._v_min)
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact draws by rejection from N(minimizer, 1/m0).

        Strong convexity gives V(y) >= V(y*) + m0 (y - y*)^2 / 2, so the
        proposal dominates the density.
        """
        pot, out, filled = self.potential, np.empty(n), 0
        scale = 1.0 / math.sqrt(pot.m0)
        while filled < n:
            m = max(2 * (n - filled), 64)
            y = self.minimizer + scale * rng.standard_normal(m)
            log_acc = -(pot.V(y) - self._v_min) + 0.5 * pot.m0 * (y - self.minimizer) ** 2
            keep = y[np.log(rng.random(m)) < log_acc][: n - filled]
            out[filled : filled + keep.size] = keep
            filled += keep.size
        return out[:, None]

    def score(self, x, t: float, sched: NoiseSchedule) -> np.ndarray:
        """Score of the time-t marginal at points ``x`` (shape (n, 1), (n,) or scalar)."""
        x = np.asarray(x, dtype=float)
        shape = x.shape
        flat = x.ravel()
        if flat.size > _SPLINE_THRESHOLD and t > 0:
            lo, hi = flat.min(), flat.max()
            pad = 1e-3 * max(hi - lo, 1.0)
            knots = np.linspace(lo - pad, hi + pad, _SPLINE_POINTS)
            out = CubicSpline(knots, self._score_direct(knots, t, sched))(flat)
        else:
            out = self._score_direct(flat, t, sched)
        return out.reshape(shape)

    def _score_direct(self, x: np.ndarray, t: float, sched: NoiseSchedule, chunk: int = 4096) -> np.ndarray:
        pot = self.potential
        if t == 0:
            return -pot.dV(x)
        alpha, v = (float(z) for z in _alpha_v(sched, t))
        out = np.empty_like(x)
        for start in range(0, x.size, chunk):
            xs = x[start : start + chunk]
            mode = self._posterior_mode(xs, alpha, v)
            half = _WINDOW_SIGMAS / math.sqrt(alpha**2 / v + pot.m0)
            edges = np.linspace(-half, half, _WINDOW_PANELS + 1)
            mid = 0.5 * (edges[:-1] + edges[1:])
            offsets = (mid[:, None] + 0.5 * np.diff(edges)[:, None] * _GL_NODES).ravel()
            weights = np.tile(_GL_WEIGHTS, _WINDOW_PANELS)
            y = mode[:, None] + offsets
            resid = xs[:, None] - alpha * y
            logw = -(resid**2 / (2 * v) + pot.V(y))
            logw -= logw.max(axis=1, keepdims=True)
            w = weights * np.exp(logw)
            norm = w.sum(axis=1)
            if alpha**2 > v:
                # small t: E[-V'(x0) | x_t] / alpha avoids cancelling x against alpha E[x0]
                out[start : start + xs.size] = (w * -pot.dV(y)).sum(axis=1) / norm / alpha
            else:
                out[start : start + xs.size] = -(w * resid).sum(axis=1) / norm / v
        if not np.all(np.isfinite(out)):
            raise NumericError(f"Convolved1D score: non-finite value at t={t}")
        return out

    def _posterior_mode(self, x, alpha, v, max_iter: int = 100):
        pot = self.potential
        y = alpha * x / (alpha**2 + pot.m0 * v)
        for _ in range(max_iter):
            h = alpha * (alpha * y - x) / v + pot.dV(y)
            step = h / (alpha**2 / v + pot.d2V(y))
            y = y - step
            if np.all(np.abs(step) <= 1e-14 * (1 + np.abs(y))):
                return y
        raise NumericError("Convolved1D score: posterior mode iteration did not converge")


def target_from_config(config: dict):
    """Build a target from a config map.

    Gaussian: ``{"kind": "gaussian", "mean": [...], "covariance": [[...]]}`` or
    ``{"kind": "gaussian", "d": 2, "isotropic": 1.0, "mean": [...]}``.
    One-dimensional: ``{"kind": "convolved1d", "potential": "quadratic_logcosh"}``.
    """
    config = dict(config)
    kind = config.pop("kind", "gaussian")
    if kind == "gaussian":
        allowed = {"mean", "covariance", "isotropic", "d"}
        extra = set(config) - allowed
        if extra:
            raise ConfigError(f"unknown target keys: {sorted(extra)}")
        if "covariance" in config and "isotropic" in config:
            raise ConfigError("give either 'covariance' or 'isotropic', not both")
        try:
            if "covariance" in config:
                cov = np.asarray(config["covariance"], dtype=float)
                d = cov.shape[0]
                mean = config.get("mean", np.zeros(d))
                return GaussianTarget(np.broadcast_to(np.asarray(mean, dtype=float), (d,)).copy(), cov)
            d = int(config.get("d", np.size(config.get("mean", [0.0]))))
            mean = np.broadcast_to(np.asarray(config.get("mean", 0.0), dtype=float), (d,)).copy()
            return GaussianTarget.isotropic(d, float(config.get("isotropic", 1.0)), mean)
        except (DomainError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid Gaussian target: {exc}") from exc
    if kind == "convolved1d":
        extra = set(config) - {"potential"}
        if extra:
            raise ConfigError(f"unknown target keys: {sorted(extra)}")
        return Convolved1DTarget(config.get("potential", "quadratic_logcosh"))
    raise ConfigError(f"unknown target kind {kind!r}")


# functional interface


def marginal_law(target: GaussianTarget, sched: NoiseSchedule, t: float) -> GaussianLaw:
    return target.marginal_law(sched, t)


def exact_score(target, sched: NoiseSchedule, x, t: float) -> np.ndarray:
    return target.score(x, t, sched)


def strong_concavity_at(target, sched: NoiseSchedule, t):
    """a(t) = 1 / (exp(-2 Lambda(t)) / m0 + v(t)), the log-concavity of p_t."""
    out = 1.0 / (np.exp(-2 * sched.cumulative_drift(t)) / target.m0 + sched.variance(t))
    return float(out) if np.ndim(out) == 0 else out


def lipschitz_L(target, sched: NoiseSchedule, t):
    """min(1/v(t), exp(2 Lambda(t)) L0), with L(0) = L0."""
    t = np.asarray(t, dtype=float)
    v = sched.variance(t)
    grow = np.exp(2 * sched.cumulative_drift(t)) * target.L0
    with np.errstate(divide="ignore"):
        inv_v = np.where(v > 0, 1.0 / np.where(v > 0, v, 1.0), np.inf)
    out = np.minimum(inv_v, grow)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class L1Estimate:
    """Time-Lipschitz constant of the score with a provenance label."""

    value: float
    provenance: str
    radius: float | None = None
    n_probes: int | None = None
    n_times: int | None = None
    details: dict = field(default_factory=dict)

    def __float__(self):
        return self.value


def _sup_on_grid(func, T: float, n_grid: int = 2001) -> float:
    grid = np.linspace(0.0, T, n_grid)
    vals = func(grid)
    i = int(np.argmax(vals))
    best = float(vals[i])
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    if hi > lo:
        res = optimize.minimize_scalar(
            lambda s: -float(func(np.array([s]))[0]), bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-12 * max(T, 1.0)},
        )
        best = max(best, -float(res.fun))
    return best


def gaussian_time_lipschitz(target: GaussianTarget, sched: NoiseSchedule, T: float) -> L1Estimate:
    """Certified L1 for a Gaussian target.

    With d score/d tau = A x - c, ||A x - c|| <= max(||A||, ||c||) (1 + ||x||),
    so the supremum over [0, T] of max(||A||, ||c||) is a valid constant.
    """

    def envelope(tau):
        a_diag, offset = target._derivative_parts(tau, sched)
        return np.maximum(np.abs(a_diag).max(axis=-1), np.linalg.norm(offset, axis=-1))

    with np.errstate(over="ignore", invalid="ignore"):
        value = _sup_on_grid(envelope, T)
    if not math.isfinite(value):
        raise NumericError(f"analytic L1 is not finite on [0, {T}] (schedule overflow)")
    return L1Estimate(value, "analytic", n_times=2001)


def _probe_points(d: int, radius: float, sample_budget: int, seed: int) -> np.ndarray:
    # directions are fixed by the seed and radii are powers of 2^(1/4), so the
    # probe set for radius R is contained in the one for 2R
    rng = np.random.Generator(np.random.Philox(seed))
    dirs = rng.standard_normal((sample_budget, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.vstack([dirs, np.eye(d), -np.eye(d)])
    j_max = math.floor(4 * math.log2(radius)) if radius > 0 else -41
    radii = 2.0 ** (np.arange(-40, j_max + 1) / 4.0)
    pts = (radii[:, None, None] * dirs[None]).reshape(-1, d)
    return np.vstack([np.zeros((1, d)), pts])


def time_lipschitz_L1(
    target,
    sched: NoiseSchedule,
    T: float,
    eta: float,
    K: int,
    sample_budget: int = 64,
    seed: int = 0,
    radius: float | None = None,
) -> L1Estimate:
    """Estimate L1 on probe points of the ball of radius 3 omega(T).

    Gaussian targets use the analytic tau-derivative of the score on a dense
    time grid. Other targets use finite differences across each sampler step,
    comparing the score at sub-step times against the step's left endpoint.
    """
    if sample_budget < 1:
        raise DomainError("sample_budget must be at least 1")
    if K < 1 or abs(K * eta - T) > 1e-9 * T:
        raise DomainError(f"need K eta = T, got K={K}, eta={eta}, T={T}")
    if radius is None:
        radius = 3.0 * sup_l2_norm(target, sched, T)
    x = _probe_points(target.d, radius, sample_budget, seed)
    scale = 1.0 + np.linalg.norm(x, axis=1)
    if target.is_gaussian:
        taus = np.unique(np.concatenate([np.linspace(0.0, T, 2001), T - eta * np.arange(K + 1)]))
        taus = taus[(taus >= 0) & (taus <= T)]
        best = 0.0
        for tau in taus:
            rate = np.linalg.norm(target.score_time_derivative(x, tau, sched), axis=1) / scale
            best = max(best, float(rate.max()))
        return L1Estimate(best, "estimated", radius, x.shape[0], taus.size)
    best = 0.0
    fractions = (0.25, 0.5, 0.75, 1.0)
    for k in range(1, K + 1):
        tau_left = T - (k - 1) * eta
        base = target.score(x, tau_left, sched)
        for frac in fractions:
            tau = max(tau_left - frac * eta, 0.0)
            diff = np.linalg.norm(np.atleast_2d(target.score(x, tau, sched) - base).reshape(x.shape[0], -1), axis=1)
            best = max(best, float((diff / (eta * scale)).max()))
    return L1Estimate(best, "estimated", radius, x.shape[0], K * len(fractions))


class ScoreOracle:
    """Exact score, optionally plus a perturbation of norm exactly ``M``.

    ``policy="fixed"`` adds ``M * direction`` at every call. ``policy="rotating"``
    cycles through coordinate axes with the step index k (for d = 1 the sign
    alternates). Either way the perturbation is deterministic and affine.
    """

    def __init__(self, target, sched: NoiseSchedule, M: float = 0.0, direction=None, policy: str = "fixed"):
        if not (M >= 0 and math.isfinite(M)):
            raise DomainError(f"perturbation size M must be finite and nonnegative, got {M}")
        if policy not in ("fixed", "rotating"):
            raise ConfigError(f"unknown perturbation policy {policy!r}")
        self.target = target
        self.sched = sched
        self.M = float(M)
        self.policy = policy
        if direction is None:
            direction = np.eye(target.d)[0]
        direction = np.asarray(direction, dtype=float).ravel()
        if direction.size != target.d or np.linalg.norm(direction) == 0:
            raise DomainError("perturbation direction must be a nonzero vector of length d")
        self.direction = direction / np.linalg.norm(direction)

    @property
    def mode(self) -> str:
        return "exact" if self.M == 0 else "perturbed"

    def perturbation(self, k: int) -> np.ndarray:
        if self.M == 0:
            return np.zeros(self.target.d)
        if self.policy == "fixed":
            u = self.direction
        elif self.target.d == 1:
            u = np.array([(-1.0) ** (k - 1)])
        else:
            u = np.eye(self.target.d)[(k - 1) % self.target.d]
        return self.M * u

    def exact(self, x, t: float) -> np.ndarray:
        return self.target.score(x, t, self.sched)

    def __call__(self, x, t: float, k: int = 1) -> np.ndarray:
        out = self.exact(x, t)
        if self.M:
            out = out + self.perturbation(k)
        return out


def perturbed_score(oracle: ScoreOracle, x, t: float, k: int = 1) -> np.ndarray:
    return oracle(x, t, k)
