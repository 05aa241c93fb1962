"""Evaluation of the W2 error bound for the exponential-integrator sampler.

For a schedule (f, g), a target with log-concavity m0 and smoothness L0, a
time-Lipschitz constant L1 of the score and a score error M, the bound reads

    W2(law(u_K), p0) <= exp(-int_0^T mu) ||x0||  +  E1  +  E2.

Write Lambda(t) = int_0^t f and D(t) = exp(-2 Lambda(t)) / m0 + v(t). Then
a(t) = 1 / D(t) is the log-concavity of p_t, mu(t) = g(t)^2 a(t) / 2 and
log D has derivative g^2 a - 2 f. The quantities below are evaluated on those
terms.

Step k of the reverse iteration covers the forward window
[lo, hi] = [T - k eta, T - (k-1) eta]. Products of the contraction factors
gamma_j over later steps are accumulated in log space while steps are
swept in increasing forward time, so a report costs O(K).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from .errors import DomainError, NumericError
from .schedules import NoiseSchedule, integrate
from .targets import gaussian_time_lipschitz

__all__ = [
    "BoundInputs",
    "BoundReport",
    "BoundEngine",
    "MinKResult",
    "mu",
    "mu_integral",
    "mu_integral_quadrature",
    "init_error",
    "eta_bar",
    "per_step_quantities",
    "theorem_bound",
    "select_T",
    "min_K_for_accuracy",
    "check_lower_bound_hypotheses",
    "lower_bound_scan",
]

EXP_OVERFLOW = 700.0


@dataclass(frozen=True)
class BoundInputs:
    """Everything the bound depends on.

    ``L1=None`` with a Gaussian ``target`` means: use the certified analytic
    constant on [0, T]. ``T`` and ``K`` may be left unset for
    :func:`min_K_for_accuracy`.
    """

    sched: NoiseSchedule
    m0: float
    L0: float
    x0_l2: float
    grad0: float
    d: int
    L1: float | None = 0.0
    L1_provenance: str = "supplied"
    M: float = 0.0
    T: float | None = None
    K: int | None = None
    target: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not (self.m0 > 0 and self.L0 >= self.m0):
            raise DomainError(f"need 0 < m0 <= L0, got m0={self.m0}, L0={self.L0}")
        if not (self.x0_l2 >= 0 and self.grad0 >= 0 and self.d >= 1):
            raise DomainError("target constants must be nonnegative and d >= 1")
        if not self.M >= 0:
            raise DomainError(f"M must be nonnegative, got {self.M}")
        if self.L1 is not None and not self.L1 >= 0:
            raise DomainError(f"L1 must be nonnegative, got {self.L1}")
        if self.T is not None and not self.T > 0:
            raise DomainError(f"T must be positive, got {self.T}")
        if self.K is not None and (int(self.K) != self.K or self.K < 1):
            raise DomainError(f"K must be a positive integer, got {self.K}")

    @classmethod
    def from_target(cls, target, sched: NoiseSchedule, T=None, K=None, M: float = 0.0, L1=None):
        """Read the target constants off ``target``.

        ``L1`` may be a number (provenance "supplied"), an ``L1Estimate`` (its
        own provenance), or None (analytic for Gaussian targets).
        """
        provenance = "supplied"
        if L1 is not None and hasattr(L1, "provenance"):
            provenance, L1 = L1.provenance, float(L1.value)
        elif L1 is None:
            if not target.is_gaussian:
                raise DomainError("non-Gaussian targets need an explicit or estimated L1")
            provenance = "analytic"
        return cls(
            sched=sched,
            m0=float(target.m0),
            L0=float(target.L0),
            x0_l2=float(target.l2_norm),
            grad0=float(target.grad_log_p0_origin),
            d=int(target.d),
            L1=None if L1 is None else float(L1),
            L1_provenance=provenance,
            M=float(M),
            T=None if T is None else float(T),
            K=None if K is None else int(K),
            target=target,
        )

    @property
    def eta(self) -> float:
        return self.T / self.K

    def with_(self, **changes) -> "BoundInputs":
        return replace(self, **changes)

    def resolved(self) -> "BoundInputs":
        """Fill in the analytic L1 for the current T if it was left unset."""
        if self.L1 is not None:
            return self
        if self.T is None or self.target is None:
            raise DomainError("L1 unset and no Gaussian target/T to derive it from")
        est = gaussian_time_lipschitz(self.target, self.sched, self.T)
        return replace(self, L1=est.value, L1_provenance=est.provenance)

    def to_dict(self) -> dict:
        return {
            "schedule": self.sched.to_config(),
            "m0": self.m0,
            "L0": self.L0,
            "x0_l2": self.x0_l2,
            "grad_log_p0_origin": self.grad0,
            "d": self.d,
            "L1": self.L1,
            "L1_provenance": self.L1_provenance,
            "M": self.M,
            "T": self.T,
            "K": self.K,
            "eta": None if self.T is None or self.K is None else self.eta,
        }


# pointwise quantities


def _D(sched, m0, t):
    return np.exp(-2 * sched.cumulative_drift(t)) / m0 + sched.variance(t)


def _L(sched, L0, t):
    v = sched.variance(t)
    grow = np.exp(2 * sched.cumulative_drift(t)) * L0
    with np.errstate(divide="ignore"):
        return np.minimum(np.where(v > 0, 1.0 / np.where(v > 0, v, 1.0), np.inf), grow)


def mu(sched: NoiseSchedule, m0: float, t):
    """Contraction rate mu(t) = m0 g^2 / (2 (exp(-2 Lambda) + m0 v))."""
    out = 0.5 * sched.g2(t) / _D(sched, m0, t)
    return float(out) if np.ndim(out) == 0 else out


def mu_integral(sched: NoiseSchedule, m0: float, T: float) -> float:
    """int_0^T mu in closed form: (1/2) log(1 + m0 v(T) exp(2 Lambda(T))).

    For VP schedules v exp(2 Lambda) = exp(B) - 1 with B = int beta; for VE
    schedules it is v itself.
    """
    lam = float(sched.cumulative_drift(T))
    if sched.variance_preserving:
        B = 2 * lam
        if B < EXP_OVERFLOW:
            return 0.5 * math.log1p(m0 * math.expm1(B))
        return 0.5 * (B + math.log(m0 + (1 - m0) * math.exp(-B)))
    v = float(sched.variance(T))
    if 2 * lam < EXP_OVERFLOW:
        return 0.5 * math.log1p(m0 * v * math.exp(2 * lam))
    return lam + 0.5 * math.log(math.exp(-2 * lam) + m0 * v)


def mu_integral_quadrature(sched: NoiseSchedule, m0: float, T: float, config=None) -> float:
    """int_0^T mu by adaptive quadrature of the defining formula (oracle)."""
    kw = {} if config is None else {"config": config}
    return integrate(lambda t: mu(sched, m0, t), 0.0, T, name="mu integral", **kw)


def init_error(inputs: BoundInputs, T: float | None = None) -> float:
    T = inputs.T if T is None else T
    return math.exp(-mu_integral(inputs.sched, inputs.m0, T)) * inputs.x0_l2


def _grid_extreme(func, T: float, n_grid: int, find_max: bool) -> float:
    """Extreme value of ``func`` on [0, T]: grid, then bounded Brent refinement."""
    grid = np.linspace(0.0, T, n_grid)
    vals = np.asarray(func(grid), dtype=float)
    sign = -1.0 if find_max else 1.0
    i = int(np.argmin(sign * vals))
    best = float(vals[i])
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    if hi > lo:
        res = optimize.minimize_scalar(
            lambda s: sign * float(func(np.array([s]))[0]),
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": 1e-13 * max(T, 1.0)},
        )
        cand = sign * float(res.fun)
        best = max(best, cand) if find_max else min(best, cand)
    return best


@dataclass(frozen=True)
class StepSizeGate:
    eta_bar: float
    eta_bar_1: float
    eta_bar_2: float


def eta_bar(inputs: BoundInputs, n_grid: int = 10_000) -> StepSizeGate:
    """Largest step size covered by the bound: min(eta_bar_1, eta_bar_2).

    Each minimization over t in [0, T] is a 10^4-point grid search followed by
    golden-section/Brent refinement around the grid optimum.
    """
    inp = inputs.resolved()
    sched, m0, L0, L1, T = inp.sched, inp.m0, inp.L0, inp.L1, inp.T

    def ratio1(t):
        g2 = sched.g2(t)
        a = 1.0 / _D(sched, m0, t)
        L = _L(sched, L0, t)
        return (0.25 * g2 * a) / (0.25 * g2**2 * L**2 + 0.5 * L1 * g2)

    def ratio2(t):
        return _D(sched, m0, t) / (0.5 * sched.g2(t))

    f_max = _grid_extreme(lambda t: np.broadcast_to(sched.f(t), np.shape(t)), T, n_grid, True)
    first = math.log(2.0) / f_max if f_max > 0 else math.inf
    eta1 = min(first, _grid_extreme(ratio1, T, n_grid, False))
    eta2 = _grid_extreme(ratio2, T, n_grid, False)
    return StepSizeGate(min(eta1, eta2), eta1, eta2)


@dataclass
class BoundReport:
    inputs: BoundInputs
    eta_bar: float
    eta_bar_1: float
    eta_bar_2: float
    mu_integral: float
    init_error: float
    E1: float
    E2: float
    total: float
    theta_T: float
    omega_T: float
    gate_passed: bool
    L1_provenance: str
    gamma_min: float
    gamma_max: float
    per_step: dict | None = None
    quadrature_nodes: int = 0

    @property
    def status(self) -> str:
        return "ok" if self.gate_passed else "outside theorem hypotheses"

    def to_dict(self) -> dict:
        out = {
            "inputs": self.inputs.to_dict(),
            "eta_bar": self.eta_bar,
            "eta_bar_1": self.eta_bar_1,
            "eta_bar_2": self.eta_bar_2,
            "mu_integral": self.mu_integral,
            "init_error": self.init_error,
            "E1": self.E1,
            "E2": self.E2,
            "total": self.total,
            "theta_T": self.theta_T,
            "omega_T": self.omega_T,
            "gate_passed": self.gate_passed,
            "status": self.status,
            "L1_provenance": self.L1_provenance,
            "gamma_min": self.gamma_min,
            "gamma_max": self.gamma_max,
        }
        if self.per_step is not None:
            out["per_step"] = {k: np.asarray(v).tolist() for k, v in self.per_step.items()}
        return out


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_legendre01(n: int):
    if n not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(n)
        _GL_CACHE[n] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[n]


class BoundEngine:
    """Per-(schedule, target, L1, T) state shared by reports at different K.

    The K-independent pieces (eta_bar, theta, omega, mu integral, the switch
    time of the two branches of L) are computed once.
    """

    chunk_steps = 1 << 16
    node_candidates = (2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64)
    node_rel_tol = 1e-13

    def __init__(self, inputs: BoundInputs):
        if inputs.T is None:
            raise DomainError("BoundEngine needs T")
        inputs = inputs.resolved()
        self.inputs = inputs
        sched, T = inputs.sched, inputs.T
        self.gate = eta_bar(inputs)
        self.mu_integral = mu_integral(sched, inputs.m0, T)
        self.init_error = math.exp(-self.mu_integral) * inputs.x0_l2
        self.omega = self._omega()
        self.theta = self._theta()
        self.switch = self._branch_switch()

    # K-independent pieces

    def _omega(self, n_grid: int = 1000) -> float:
        inp, sched = self.inputs, self.inputs.sched

        def l2(t):
            return np.sqrt(np.exp(-2 * sched.cumulative_drift(t)) * inp.x0_l2**2 + inp.d * sched.variance(t))

        return _grid_extreme(l2, inp.T, n_grid, True)

    def _theta(self, n_grid: int = 1000) -> float:
        # exp(-(1/2) int_{T-t}^T m) = sqrt(D(T-t) / D(T)) since m = (log D)'
        inp, sched, T = self.inputs, self.inputs.sched, self.inputs.T
        D_T = float(_D(sched, inp.m0, T))
        sup_ratio = _grid_extreme(lambda s: np.sqrt(_D(sched, inp.m0, s) / D_T), T, n_grid, True)
        return math.exp(-float(sched.cumulative_drift(T))) * inp.x0_l2 * sup_ratio

    def _branch_switch(self) -> float | None:
        """Time where 1/v = exp(2 Lambda) L0; None if outside (0, T)."""
        inp, sched, T = self.inputs, self.inputs.sched, self.inputs.T

        def h(t):
            v = float(sched.variance(t))
            if v <= 0:
                return -math.inf
            return math.log(v) + 2 * float(sched.cumulative_drift(t)) + math.log(inp.L0)

        if h(T) <= 0:
            return None
        lo = T
        while h(lo) > 0:
            lo *= 0.5
            if lo < 1e-300:
                return None
        return optimize.brentq(h, lo, min(2 * lo, T), xtol=1e-15 * T, rtol=4 * np.finfo(float).eps)

    # per-step integrals

    def _panel_integrals(self, lo, width, hi_step, lo_step, n):
        """Node-quadrature of the four non-closed-form integrals on panels.

        A panel [lo, lo + width] lies inside a step [lo_step, hi_step]; the
        exponential weights are measured from the step ends.
        """
        inp, sched = self.inputs, self.inputs.sched
        x, w = _gauss_legendre01(n)
        tau = lo[:, None] + width[:, None] * x
        g2, v = sched.g2_and_variance(tau)
        with np.errstate(divide="ignore"):
            inv_v = 1.0 / v  # v = 0 only at tau = 0, where 1/v = inf is the right branch
        if sched.variance_exploding:
            # no drift: every exponential weight is 1
            gL = g2 * np.minimum(inv_v, inp.L0)
            psi = np.dot(gL * gL, w) * width
            return psi, np.dot(g2 / (1.0 / inp.m0 + v), w) * width, psi, np.dot(gL, w) * width
        rise = sched.drift_between(lo_step[:, None], tau - lo_step[:, None])  # Lambda(tau) - Lambda(lo_step)
        fall = sched.drift_between(tau, hi_step[:, None] - tau)  # Lambda(hi_step) - Lambda(tau)
        lam = sched.cumulative_drift(tau)
        a = 1.0 / (np.exp(-2 * lam) / inp.m0 + v)
        gL = g2 * np.minimum(inv_v, np.exp(2 * lam) * inp.L0)
        gL2 = gL * gL
        psi = (np.exp(2 * rise) * gL2) @ w * width
        a_int = (np.exp(-fall) * g2 * a) @ w * width
        return psi, a_int, gL2 @ w * width, gL @ w * width

    def _step_integrals(self, lo, eta, n):
        """(psi, int e^{-fall} g^2 a, int g^4 L^2, int g^2 L) for steps starting at ``lo``."""
        width = np.full_like(lo, eta)
        hi = lo + eta
        out = list(self._panel_integrals(lo, width, hi, lo, n))
        s = self.switch
        if s is not None:
            inside = np.nonzero((lo < s) & (s < hi))[0]
            if inside.size:
                i = inside
                left = self._panel_integrals(lo[i], s - lo[i], hi[i], lo[i], n)
                right = self._panel_integrals(np.full(i.size, s), hi[i] - s, hi[i], lo[i], n)
                for j in range(4):
                    out[j][i] = left[j] + right[j]
        return out

    def _choose_nodes(self, K: int) -> int:
        """Smallest Gauss-Legendre order whose result agrees with twice the order
        to ``node_rel_tol`` on a sample of steps (ends, interior, branch switch)."""
        T, eta = self.inputs.T, self.inputs.T / K
        c = np.unique(np.concatenate([[0, 1, 2, K - 2, K - 1], np.linspace(0, K - 1, 33).astype(int)]))
        c = c[(c >= 0) & (c < K)]
        if self.switch is not None:
            c = np.unique(np.append(c, min(int(self.switch / eta), K - 1)))
        lo = T * c / K
        for n in self.node_candidates:
            coarse = self._step_integrals(lo, eta, n)
            fine = self._step_integrals(lo, eta, 2 * n)
            ok = all(
                np.all(np.abs(a - b) <= self.node_rel_tol * np.abs(b) + 1e-300) for a, b in zip(coarse, fine)
            )
            if ok:
                return n
        raise NumericError("per-step quadrature did not settle at 128 Gauss-Legendre nodes")

    def _chunk(self, c, K, n):
        inp, sched, T = self.inputs, self.inputs.sched, self.inputs.T
        eta = T / K
        lo = T * c / K
        G = np.broadcast_to(sched.diffusion_between(lo, eta), lo.shape).astype(float)
        if sched.variance_exploding:
            F, phi_k = np.zeros_like(G), G
        else:
            F = np.broadcast_to(sched.drift_between(lo, eta), lo.shape).astype(float)
            phi_k = np.broadcast_to(sched.phi_between(lo, eta), lo.shape).astype(float)
        psi, a_int, gL2_int, gL_int = self._step_integrals(lo, eta, n)
        delta_int = 0.5 * a_int - 0.25 * eta * gL2_int
        gamma = 1.0 - delta_int + 0.5 * inp.L1 * eta * G
        nu = (self.theta + self.omega) * (F + 0.5 * gL_int) + (inp.L1 * T + inp.grad0) * 0.5 * G
        local1 = 0.5 * inp.L1 * eta * (1 + inp.x0_l2 + self.omega) * phi_k + 0.5 * math.sqrt(eta) * nu * np.sqrt(psi)
        lam_lo = sched.cumulative_drift(lo)
        return dict(lo=lo, F=F, G=G, phi=phi_k, psi=psi, delta=delta_int, gamma=gamma, nu=nu, local1=local1, lam_lo=lam_lo)

    def evaluate(self, K: int, store_per_step: bool | None = None, nodes: int | None = None) -> BoundReport:
        inp = self.inputs
        if int(K) != K or K < 1:
            raise DomainError(f"K must be a positive integer, got {K}")
        K = int(K)
        T = inp.T
        if store_per_step is None:
            store_per_step = K <= 100_000
        n = nodes or self._choose_nodes(K)

        log_prefix = 0.0  # sum of log|gamma| over steps with smaller forward time
        sign_prefix = 1.0
        e1_parts, s2_parts = [], []
        g_min, g_max = math.inf, -math.inf
        store = {key: [] for key in ("k", "phi", "psi", "gamma", "delta_integral", "nu")} if store_per_step else None
        for start in range(0, K, self.chunk_steps):
            c = np.arange(start, min(start + self.chunk_steps, K))
            q = self._chunk(c, K, n)
            gamma = q["gamma"]
            if not np.all(np.isfinite(gamma)) or not np.all(np.isfinite(q["local1"])):
                raise NumericError("non-finite per-step quantity (gamma or local error)")
            g_min = min(g_min, float(gamma.min()))
            g_max = max(g_max, float(gamma.max()))
            with np.errstate(divide="ignore"):
                lg = np.log(np.abs(gamma))
            neg = (gamma < 0).astype(np.int64)
            excl_log = log_prefix + np.concatenate([[0.0], np.cumsum(lg)[:-1]])
            excl_neg = np.concatenate([[0], np.cumsum(neg)[:-1]])
            sign = sign_prefix * np.where(excl_neg % 2 == 1, -1.0, 1.0)
            with np.errstate(over="ignore", invalid="ignore"):
                # huge ungated products overflow to inf: the bound is vacuous there
                weight = sign * np.exp(excl_log + q["lam_lo"])
                e1_parts.append(float(np.sum(weight * q["local1"])))
                s2_parts.append(float(np.sum(weight * 0.5 * q["phi"])))
            log_prefix += float(np.sum(lg))
            if neg.sum() % 2:
                sign_prefix = -sign_prefix
            if store is not None:
                store["k"].append(K - c)
                store["phi"].append(q["phi"])
                store["psi"].append(q["psi"])
                store["gamma"].append(gamma)
                store["delta_integral"].append(q["delta"])
                store["nu"].append(q["nu"])

        per_step = None
        if store is not None:
            # report in step order k = 1..K
            per_step = {key: np.concatenate(v)[::-1] for key, v in store.items()}
        return self._report(K, math.fsum(e1_parts), math.fsum(s2_parts), g_min, g_max, per_step, n)

    def _report(self, K, E1, S2, g_min, g_max, per_step, n) -> BoundReport:
        inp = self.inputs
        E2 = inp.M * S2
        gate_passed = inp.T / K <= self.gate.eta_bar
        return BoundReport(
            inputs=inp.with_(K=K),
            eta_bar=self.gate.eta_bar,
            eta_bar_1=self.gate.eta_bar_1,
            eta_bar_2=self.gate.eta_bar_2,
            mu_integral=self.mu_integral,
            init_error=self.init_error,
            E1=E1,
            E2=E2,
            total=self.init_error + E1 + E2,
            theta_T=self.theta,
            omega_T=self.omega,
            gate_passed=bool(gate_passed),
            L1_provenance=inp.L1_provenance,
            gamma_min=g_min,
            gamma_max=g_max,
            per_step=per_step,
            quadrature_nodes=n,
        )


def per_step_quantities(inputs: BoundInputs, k: int) -> dict:
    """phi_k, psi_k, gamma_k, int delta_k and nu_k for a single step k."""
    if not 1 <= k <= inputs.K:
        raise DomainError(f"step index k={k} outside 1..{inputs.K}")
    engine = BoundEngine(inputs)
    K = inputs.K
    n = engine._choose_nodes(K)
    q = engine._chunk(np.array([K - k]), K, n)
    return {
        "k": k,
        "phi": float(q["phi"][0]),
        "psi": float(q["psi"][0]),
        "gamma": float(q["gamma"][0]),
        "delta_integral": float(q["delta"][0]),
        "nu": float(q["nu"][0]),
    }


def theorem_bound(inputs: BoundInputs, store_per_step: bool | None = None) -> BoundReport:
    if inputs.T is None or inputs.K is None:
        raise DomainError("theorem_bound needs both T and K")
    return BoundEngine(inputs).evaluate(inputs.K, store_per_step)


# complexity searches


def select_T(inputs: BoundInputs, eps: float) -> float:
    """T with init_error(T) = eps / 2."""
    target_log = math.log(eps / 2)
    x0 = inputs.x0_l2
    if x0 <= eps / 2:
        raise DomainError(f"accuracy eps={eps} already met by the initialization error at T=0")

    def h(T):
        return math.log(x0) - mu_integral(inputs.sched, inputs.m0, T) - target_log

    hi = 1.0
    while h(hi) > 0:
        hi *= 2
        if hi > 1e8:
            raise NumericError("T-selection: initialization error does not decay")
    lo = hi / 2
    while h(lo) < 0 and lo > 1e-12:
        lo /= 2
    return optimize.brentq(h, lo, hi, xtol=1e-14, rtol=1e-14)


@dataclass
class MinKResult:
    K: int | None
    T: float
    eta: float | None
    eps: float
    reachable: bool
    total: float
    report: BoundReport
    evaluations: int

    def to_dict(self) -> dict:
        r = self.report
        return {
            "K_star": self.K,
            "T": self.T,
            "eta": self.eta,
            "eps": self.eps,
            "reachable": self.reachable,
            "eta_bar": r.eta_bar,
            "init_error": r.init_error,
            "E1": r.E1,
            "E2": r.E2,
            "total": r.total,
            "evaluations": self.evaluations,
        }


def min_K_for_accuracy(
    inputs: BoundInputs,
    eps: float,
    K_max: int = 10**9,
    T: float | None = None,
) -> MinKResult:
    """Smallest K <= K_max with the gate passed and total <= eps.

    T defaults to the value where the initialization error equals eps / 2.
    The search starts at the smallest gated K and jumps towards the crossing
    predicted by a log-log fit of (total - init_error) against K until the
    bound is met. Secant steps inside the bracket, with a geometric-mean
    fallback, then pin the integer. It relies on the total being
    non-increasing in K.
    """
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    T = inputs.T if T is None and inputs.T is not None else T
    if T is None:
        T = select_T(inputs, eps)
    engine = BoundEngine(inputs.with_(T=T, K=None))
    K_gate = max(1, math.ceil(T / engine.gate.eta_bar * (1 - 1e-15)))
    while T / K_gate > engine.gate.eta_bar:
        K_gate += 1
    evals = 0
    cache: dict[int, BoundReport] = {}

    def total(K):
        nonlocal evals
        if K not in cache:
            evals += 1
            cache[K] = engine.evaluate(K, store_per_step=False)
        return cache[K].total

    if K_gate > K_max:
        rep = engine.evaluate(K_max, store_per_step=False)
        return MinKResult(None, T, None, eps, False, rep.total, rep, 1)
    floor = engine.init_error
    goal = eps - floor
    if total(K_gate) <= eps:
        return MinKResult(K_gate, T, T / K_gate, eps, True, cache[K_gate].total, cache[K_gate], evals)
    if goal <= 0:
        # the discretization terms are nonnegative, so no K can succeed
        rep = cache[K_gate] if K_gate == K_max else engine.evaluate(K_max, store_per_step=False)
        return MinKResult(None, T, None, eps, False, rep.total, rep, evals + 1)

    def excess(K):
        return total(K) - floor

    def log_secant(K1, K2):
        """Root of log(excess) - log(goal) by a line through two points in log-log."""
        e1, e2 = excess(K1), excess(K2)
        if not (e1 > 0 and e2 > 0 and e1 != e2 and K1 != K2):
            return None
        slope = (math.log(e2) - math.log(e1)) / (math.log(K2) - math.log(K1))
        if slope >= 0:
            return None
        return math.exp(math.log(K2) + (math.log(goal) - math.log(e2)) / slope)

    # growth: jump to the predicted crossing (power -1 until two points exist)
    lo, hi = K_gate, None
    prev = None
    while hi is None:
        guess = log_secant(prev, lo) if prev is not None else None
        if guess is None:
            guess = lo * excess(lo) / goal if excess(lo) > 0 else 2.0 * lo
        nxt = int(min(max(guess * 1.02, 1.25 * lo), 64.0 * lo, K_max))
        if nxt <= lo:
            nxt = min(lo + 1, K_max)
        if total(nxt) <= eps:
            hi = nxt
        elif nxt == K_max:
            return MinKResult(None, T, None, eps, False, cache[nxt].total, cache[nxt], evals)
        else:
            prev, lo = lo, nxt

    # refinement: secant through the two latest points, kept inside the bracket
    recent = [lo, hi]
    last_guess = None
    while hi - lo > 1:
        guess = log_secant(recent[-2], recent[-1])
        if guess is None or not lo < guess < hi:
            guess = math.sqrt(lo * hi)
        converged = last_guess is not None and abs(guess - last_guess) < 1.0
        last_guess = guess
        cand = min(max(int(math.ceil(guess)), lo + 1), hi - 1)
        if total(cand) <= eps:
            hi = cand
            if converged and cand - 1 > lo and total(cand - 1) > eps:
                lo = cand - 1
        else:
            lo = cand
            if converged and cand + 1 < hi and total(cand + 1) <= eps:
                hi = cand + 1
        recent.append(cand)
    rep = cache[hi]
    return MinKResult(hi, T, T / hi, eps, True, rep.total, rep, evals)


def check_lower_bound_hypotheses(inputs: BoundInputs, T: float, n_grid: int = 2000) -> dict:
    """Numerical checks of the lower-bound hypotheses on a grid of [0, T].

    * min over the grid of g^2 L is positive;
    * v stays bounded away from zero on the second half of the grid;
    * max_{s<=t} mu(s) <= c1 (int_0^t mu) + c2 with the smallest constants
      fitting the grid for rho = 1 (recorded, not proven).
    """
    sched = inputs.sched
    t = np.linspace(0.0, T, n_grid)
    gl = sched.g2(t) * _L(sched, inputs.L0, t)
    mu_t = np.asarray(mu(sched, inputs.m0, t))
    running_max = np.maximum.accumulate(mu_t)
    cum = np.array([mu_integral(sched, inputs.m0, s) for s in t])
    c2 = float(mu_t[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        c1 = float(np.nanmax(np.where(cum > 0, (running_max - c2) / cum, 0.0)))
    v_tail = float(np.min(sched.variance(t[n_grid // 2 :])))
    ok = bool(gl.min() > 0 and v_tail > 0 and math.isfinite(c1))
    return {"ok": ok, "min_g2L": float(gl.min()), "min_tail_variance": v_tail, "c1": c1, "c2": c2, "rho": 1.0}


def lower_bound_scan(make_inputs, schedules: dict, eps_grid, d_grid, K_max: int = 10**9) -> list[dict]:
    """Tabulate K*(eps, d) for each schedule.

    ``make_inputs(sched, d)`` returns the :class:`BoundInputs` (without T, K)
    for dimension d. Each row carries the normalized ratio
    K* eps / (sqrt(d) (1 + log(sqrt(d) / eps))^2). Schedules failing the
    hypothesis checks are reported with ``excluded=True`` and skipped.
    """
    rows = []
    for name, sched in schedules.items():
        for d in d_grid:
            base = make_inputs(sched, d)
            for eps in eps_grid:
                T = select_T(base, eps)
                hyp = check_lower_bound_hypotheses(base.with_(T=T), T)
                if not hyp["ok"]:
                    rows.append({"schedule": name, "d": d, "eps": eps, "excluded": True, "hypotheses": hyp})
                    continue
                res = min_K_for_accuracy(base, eps, K_max=K_max, T=T)
                ratio = None
                if res.K is not None:
                    ratio = res.K * eps / (math.sqrt(d) * (1 + math.log(math.sqrt(d) / eps)) ** 2)
                rows.append(
                    {"schedule": name, "d": d, "eps": eps, "excluded": False, "T": T, "K_star": res.K, "ratio": ratio}
                )
    return rows
