"""Forward noise schedules and their time-integral transforms.

A schedule is the pair (f, g) of the forward SDE

    dx = -f(t) x dt + g(t) dB,

and everything downstream only needs a handful of integrals of it:

* ``cumulative_drift(t)``      Lambda(t) = int_0^t f
* ``variance(t)``              v(t) = int_0^t exp(-2 int_s^t f) g(s)^2 ds
* ``drift_between(lo, w)``     int_lo^{lo+w} f
* ``diffusion_between(lo, w)`` int_lo^{lo+w} g^2
* ``phi_between(lo, w)``       int_lo^{lo+w} exp(Lambda(tau) - Lambda(lo)) g(tau)^2 dtau

Steps are addressed as ``(lo, width)`` rather than ``(lo, hi)`` so the closed
forms can be written without cancellation when the width is tiny.

The five named families provide closed forms. :class:`CustomSchedule` falls
back to adaptive quadrature, which also serves as the oracle in tests.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate as _integrate

from .errors import ConfigError, DomainError, NumericError

__all__ = [
    "QuadratureConfig",
    "NoiseSchedule",
    "VEExponential",
    "VEPolynomial",
    "VPConstant",
    "VPLinear",
    "VPPolynomial",
    "CustomSchedule",
    "from_config",
    "integrate",
    "mean_decay",
    "forward_variance",
    "step_amplification",
    "phi",
    "quadrature_drift",
    "quadrature_variance",
    "quadrature_diffusion",
    "quadrature_phi",
]


@dataclass(frozen=True)
class QuadratureConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-13
    max_subdivisions: int = 200

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ConfigError("quadrature tolerances must be positive")
        if self.max_subdivisions < 1:
            raise ConfigError("max_subdivisions must be at least 1")


DEFAULT_QUADRATURE = QuadratureConfig()


def integrate(
    func: Callable[[float], float],
    lo: float,
    hi: float,
    config: QuadratureConfig = DEFAULT_QUADRATURE,
    name: str = "integral",
    points=None,
) -> float:
    """Adaptive quadrature of a scalar function on ``[lo, hi]``.

    Raises :class:`NumericError` naming ``name`` if the subdivision limit is
    hit before the requested tolerance is met.
    """
    if hi == lo:
        return 0.0
    out = _integrate.quad(
        func,
        lo,
        hi,
        epsabs=config.abs_tol,
        epsrel=config.rel_tol,
        limit=config.max_subdivisions,
        points=points,
        full_output=1,
    )
    value, err = out[0], out[1]
    if not math.isfinite(value):
        raise NumericError(f"{name}: non-finite quadrature result on [{lo}, {hi}]")
    if len(out) > 3:
        tol = max(config.abs_tol, config.rel_tol * abs(value))
        if err > 10 * tol:
            raise NumericError(
                f"{name}: quadrature did not converge on [{lo}, {hi}] "
                f"(error estimate {err:.3e}, tolerance {tol:.3e})"
            )
    return value


def _positive_param(name: str, value) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise DomainError(f"parameter {name} must be a real number, got {value!r}") from None
    if not math.isfinite(value) or value <= 0:
        raise DomainError(f"parameter {name} must be finite and positive, got {value}")
    return value


class NoiseSchedule:
    """Base class: generic transforms by quadrature on top of ``f`` and ``g2``.

    Subclasses for the named families override the transforms with closed
    forms. All methods accept scalars or numpy arrays.
    """

    family = "custom"
    variance_preserving = False
    variance_exploding = False

    quadrature = DEFAULT_QUADRATURE

    def f(self, t):
        raise NotImplementedError

    def g2(self, t):
        raise NotImplementedError

    def g(self, t):
        return np.sqrt(self.g2(t))

    @property
    def params(self) -> dict:
        return {}

    def to_config(self) -> dict:
        return {"family": self.family, **self.params}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
        return f"{type(self).__name__}({args})"

    def __eq__(self, other):
        return type(self) is type(other) and self.params == other.params

    def __hash__(self):
        return hash((type(self).__name__, tuple(sorted(self.params.items()))))

    # generic transforms (quadrature)

    def cumulative_drift(self, t):
        return _map_cumulative(lambda a, b: quadrature_drift(self, a, b), t)

    def drift_between(self, lo, width):
        return _vectorize2(lambda a, w: quadrature_drift(self, a, a + w), lo, width)

    def diffusion_between(self, lo, width):
        return _vectorize2(lambda a, w: quadrature_diffusion(self, a, a + w), lo, width)

    def phi_between(self, lo, width):
        return _vectorize2(lambda a, w: quadrature_phi(self, a, a + w), lo, width)

    def variance(self, t):
        return _variance_recursive(self, t)

    def g2_and_variance(self, t):
        """(g^2(t), v(t)); families override this to share transcendental calls."""
        return self.g2(t), self.variance(t)


class _VESchedule(NoiseSchedule):
    """f = 0; subclasses supply g2 and its antiderivative."""

    variance_exploding = True

    def f(self, t):
        return np.zeros_like(np.asarray(t, dtype=float)) + 0.0

    def cumulative_drift(self, t):
        return np.zeros_like(np.asarray(t, dtype=float)) + 0.0

    def drift_between(self, lo, width):
        return np.zeros(np.broadcast(np.asarray(lo), np.asarray(width)).shape) + 0.0

    def variance(self, t):
        return self.diffusion_between(np.zeros_like(np.asarray(t, dtype=float)), t)

    def phi_between(self, lo, width):
        return self.diffusion_between(lo, width)


class _VPSchedule(NoiseSchedule):
    """f = beta/2, g^2 = beta; subclasses supply beta and its step integral."""

    variance_preserving = True

    def beta(self, t):
        raise NotImplementedError

    def beta_between(self, lo, width):
        raise NotImplementedError

    def f(self, t):
        return 0.5 * self.beta(t)

    def g2(self, t):
        return self.beta(t)

    def cumulative_drift(self, t):
        t = np.asarray(t, dtype=float)
        return 0.5 * self.beta_between(np.zeros_like(t), t)

    def drift_between(self, lo, width):
        return 0.5 * self.beta_between(lo, width)

    def diffusion_between(self, lo, width):
        return self.beta_between(lo, width)

    def variance(self, t):
        t = np.asarray(t, dtype=float)
        return -np.expm1(-self.beta_between(np.zeros_like(t), t))

    def phi_between(self, lo, width):
        return 2.0 * np.expm1(0.5 * self.beta_between(lo, width))


def _power_step(base, lo, width, a, power):
    """((b + a(lo+w))^p - (b + a lo)^p), written without cancellation."""
    start = base + a * np.asarray(lo, dtype=float)
    return start**power * np.expm1(power * np.log1p(a * np.asarray(width, dtype=float) / start))


class VEExponential(_VESchedule):
    """g(t) = a exp(b t), f = 0."""

    family = "ve_exp"

    def __init__(self, a: float = 1.0, b: float = 1.0):
        self.a = _positive_param("a", a)
        self.b = _positive_param("b", b)

    @property
    def params(self):
        return {"a": self.a, "b": self.b}

    def g2(self, t):
        return self.a**2 * np.exp(2 * self.b * np.asarray(t, dtype=float))

    def diffusion_between(self, lo, width):
        lo = np.asarray(lo, dtype=float)
        width = np.asarray(width, dtype=float)
        return self.a**2 * np.exp(2 * self.b * lo) * np.expm1(2 * self.b * width) / (2 * self.b)

    def g2_and_variance(self, t):
        grow = np.expm1(2 * self.b * np.asarray(t, dtype=float))
        return self.a**2 * (1.0 + grow), self.a**2 * grow / (2 * self.b)


class VEPolynomial(_VESchedule):
    """g(t) = (b + a t)^c, f = 0.

    The complexity analysis for this family needs c >= 1/2; smaller exponents
    are accepted and flagged by :attr:`outside_complexity_regime`.
    """

    family = "ve_poly"

    def __init__(self, a: float = 1.0, b: float = 1.0, c: float = 1.0):
        self.a = _positive_param("a", a)
        self.b = _positive_param("b", b)
        self.c = _positive_param("c", c)
        if self.outside_complexity_regime:
            warnings.warn(
                f"VE-polynomial exponent c={self.c} < 1/2: iteration-complexity "
                "statements do not cover this regime",
                stacklevel=2,
            )

    @property
    def outside_complexity_regime(self) -> bool:
        return self.c < 0.5

    @property
    def params(self):
        return {"a": self.a, "b": self.b, "c": self.c}

    def g2(self, t):
        return (self.b + self.a * np.asarray(t, dtype=float)) ** (2 * self.c)

    def diffusion_between(self, lo, width):
        p = 2 * self.c + 1
        return _power_step(self.b, lo, width, self.a, p) / (self.a * p)

    def g2_and_variance(self, t):
        p = 2 * self.c + 1
        log_ratio = np.log1p(self.a * np.asarray(t, dtype=float) / self.b)
        g2 = self.b ** (2 * self.c) * np.exp(2 * self.c * log_ratio)
        return g2, self.b**p * np.expm1(p * log_ratio) / (self.a * p)


class VPConstant(_VPSchedule):
    """beta(t) = b."""

    family = "vp_const"

    def __init__(self, b: float = 1.0):
        self.b = _positive_param("b", b)

    @property
    def params(self):
        return {"b": self.b}

    def beta(self, t):
        return np.full(np.shape(t), self.b) + 0.0

    def beta_between(self, lo, width):
        return self.b * (np.asarray(width, dtype=float) + 0.0 * np.asarray(lo, dtype=float))


class VPLinear(_VPSchedule):
    """beta(t) = b + a t."""

    family = "vp_linear"

    def __init__(self, a: float = 1.0, b: float = 1.0):
        self.a = _positive_param("a", a)
        self.b = _positive_param("b", b)

    @property
    def params(self):
        return {"a": self.a, "b": self.b}

    def beta(self, t):
        return self.b + self.a * np.asarray(t, dtype=float)

    def beta_between(self, lo, width):
        lo = np.asarray(lo, dtype=float)
        width = np.asarray(width, dtype=float)
        return width * (self.b + self.a * (lo + 0.5 * width))


class VPPolynomial(_VPSchedule):
    """beta(t) = (b + a t)^rho."""

    family = "vp_poly"

    def __init__(self, a: float = 1.0, b: float = 1.0, rho: float = 1.0):
        self.a = _positive_param("a", a)
        self.b = _positive_param("b", b)
        self.rho = _positive_param("rho", rho)

    @property
    def params(self):
        return {"a": self.a, "b": self.b, "rho": self.rho}

    def beta(self, t):
        return (self.b + self.a * np.asarray(t, dtype=float)) ** self.rho

    def beta_between(self, lo, width):
        p = self.rho + 1
        return _power_step(self.b, lo, width, self.a, p) / (self.a * p)


class CustomSchedule(NoiseSchedule):
    """User-supplied scalar functions f(t) >= 0 and g(t) > 0.

    The functions are checked for sign violations on 1000 points of
    ``[0, horizon]``. All transforms go through adaptive quadrature.
    """

    family = "custom"

    def __init__(
        self,
        f: Callable[[float], float],
        g: Callable[[float], float],
        horizon: float = 10.0,
        quadrature: QuadratureConfig = DEFAULT_QUADRATURE,
        name: str = "custom",
    ):
        self._f = f
        self._g = g
        self.horizon = _positive_param("horizon", horizon)
        self.quadrature = quadrature
        self.name = name
        self.validate(self.horizon)

    @property
    def params(self):
        return {"name": self.name, "horizon": self.horizon}

    def __eq__(self, other):
        return self is other

    __hash__ = object.__hash__

    def validate(self, T: float, n_points: int = 1000):
        grid = np.linspace(0.0, T, n_points)
        fv = np.array([float(self._f(t)) for t in grid])
        gv = np.array([float(self._g(t)) for t in grid])
        if not (np.all(np.isfinite(fv)) and np.all(np.isfinite(gv))):
            raise DomainError(f"custom schedule {self.name!r}: non-finite f or g on [0, {T}]")
        if np.any(fv < 0):
            t_bad = grid[np.argmax(fv < 0)]
            raise DomainError(f"custom schedule {self.name!r}: f({t_bad}) < 0")
        if np.any(gv <= 0):
            t_bad = grid[np.argmax(gv <= 0)]
            raise DomainError(f"custom schedule {self.name!r}: g({t_bad}) <= 0")

    def f(self, t):
        return _apply_scalar(self._f, t)

    def g(self, t):
        return _apply_scalar(self._g, t)

    def g2(self, t):
        return self.g(t) ** 2


def _apply_scalar(func, t):
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return float(func(float(t)))
    return np.array([float(func(float(s))) for s in t.ravel()]).reshape(t.shape)


def _vectorize2(func, a, b):
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    if a.ndim == 0:
        return func(float(a), float(b))
    out = np.array([func(float(x), float(y)) for x, y in zip(a.ravel(), b.ravel())])
    return out.reshape(a.shape)


def _map_cumulative(increment, t):
    """Evaluate int_0^t of something at many t by summing interval increments."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return increment(0.0, float(t))
    pts, inverse = np.unique(t.ravel(), return_inverse=True)
    knots = np.concatenate([[0.0], pts])
    steps = [increment(a, b) for a, b in zip(knots[:-1], knots[1:])]
    return np.cumsum(steps)[inverse].reshape(t.shape)


def _variance_recursive(sched: NoiseSchedule, t):
    """v at many times via v(t2) = exp(-2 int f) v(t1) + int_t1^t2 (...)."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return quadrature_variance(sched, float(t))
    pts, inverse = np.unique(t.ravel(), return_inverse=True)
    knots = np.concatenate([[0.0], pts])
    out = np.empty(len(pts))
    v = 0.0
    for i, (a, b) in enumerate(zip(knots[:-1], knots[1:])):
        decay = quadrature_drift(sched, a, b)
        v = math.exp(-2 * decay) * v + _variance_increment(sched, a, b)
        out[i] = v
    return out[inverse].reshape(t.shape)


# quadrature oracles; these never use a subclass's closed forms


def quadrature_drift(sched: NoiseSchedule, s: float, t: float, config: QuadratureConfig | None = None):
    """int_s^t f by adaptive quadrature."""
    config = config or sched.quadrature
    return integrate(lambda u: float(sched.f(u)), s, t, config, "drift integral")


def quadrature_diffusion(sched: NoiseSchedule, s: float, t: float, config: QuadratureConfig | None = None):
    """int_s^t g^2 by adaptive quadrature."""
    config = config or sched.quadrature
    return integrate(lambda u: float(sched.g2(u)), s, t, config, "diffusion integral")


def _variance_increment(sched, s, t, config=None):
    config = config or sched.quadrature

    def integrand(u):
        return math.exp(-2 * quadrature_drift(sched, u, t, config)) * float(sched.g2(u))

    return integrate(integrand, s, t, config, "forward variance")


def quadrature_variance(sched: NoiseSchedule, t: float, config: QuadratureConfig | None = None):
    """v(t) = int_0^t exp(-2 int_s^t f) g(s)^2 ds by nested adaptive quadrature."""
    return _variance_increment(sched, 0.0, t, config)


def quadrature_phi(sched: NoiseSchedule, lo: float, hi: float, config: QuadratureConfig | None = None):
    """int_lo^hi exp(int_lo^tau f) g(tau)^2 dtau by nested adaptive quadrature."""
    config = config or sched.quadrature

    def integrand(u):
        return math.exp(quadrature_drift(sched, lo, u, config)) * float(sched.g2(u))

    return integrate(integrand, lo, hi, config, "phi")


# functional interface


def mean_decay(sched: NoiseSchedule, s: float, t: float) -> float:
    """exp(-int_s^t f), the factor by which the forward mean shrinks on [s, t]."""
    if not (0 <= s <= t) or not math.isfinite(t):
        raise DomainError(f"mean_decay needs 0 <= s <= t, got s={s}, t={t}")
    return float(np.exp(-sched.drift_between(s, t - s)))


def forward_variance(sched: NoiseSchedule, t: float) -> float:
    if not (t >= 0) or not math.isfinite(t):
        raise DomainError(f"forward_variance needs t >= 0, got {t}")
    return float(sched.variance(t))


def _step_window(T: float, k: int, eta: float):
    if not (T > 0 and eta > 0):
        raise DomainError(f"need T > 0 and eta > 0, got T={T}, eta={eta}")
    K = round(T / eta)
    if not (1 <= k <= K) or abs(K * eta - T) > 1e-9 * T:
        raise DomainError(f"step index k={k} outside 1..K for T={T}, eta={eta}")
    return max(T - k * eta, 0.0), eta


def step_amplification(sched: NoiseSchedule, T: float, k: int, eta: float) -> float:
    """exp of the drift integral over reverse step k (forward window [T-k eta, T-(k-1) eta])."""
    lo, width = _step_window(T, k, eta)
    return float(np.exp(sched.drift_between(lo, width)))


def phi(sched: NoiseSchedule, T: float, k: int, eta: float) -> float:
    """Score coefficient of reverse step k of the exponential integrator."""
    lo, width = _step_window(T, k, eta)
    return float(sched.phi_between(lo, width))


_FAMILIES = {
    "ve_exp": (VEExponential, ("a", "b")),
    "ve_poly": (VEPolynomial, ("a", "b", "c")),
    "vp_const": (VPConstant, ("b",)),
    "vp_linear": (VPLinear, ("a", "b")),
    "vp_poly": (VPPolynomial, ("a", "b", "rho")),
}

FAMILY_NAMES = tuple(_FAMILIES)


def from_config(config: dict) -> NoiseSchedule:
    """Build a named-family schedule from ``{"family": ..., **params}``.

    Unknown keys and missing parameters raise :class:`ConfigError`.
    """
    if not isinstance(config, dict) or "family" not in config:
        raise ConfigError("schedule config needs a 'family' key")
    family = config["family"]
    if family not in _FAMILIES:
        raise ConfigError(f"unknown schedule family {family!r}; expected one of {FAMILY_NAMES}")
    cls, names = _FAMILIES[family]
    extra = set(config) - {"family", *names}
    if extra:
        raise ConfigError(f"unknown keys for {family}: {sorted(extra)}")
    missing = [n for n in names if n not in config]
    if missing:
        raise ConfigError(f"missing parameters for {family}: {missing}")
    try:
        return cls(**{n: config[n] for n in names})
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
