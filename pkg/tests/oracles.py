"""Brute-force reference implementations used only by the tests.

Nothing here reuses the library's step integrals or log-space products: every
integral is a plain midpoint sum in reverse time and every product is formed
directly.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate


def bound_oracle(sched, m0, L0, x0_l2, grad0, d, L1, M, T, K, sub=10_000, sup_grid=200_001):
    """Per-step quantities and the three error terms by midpoint sums.

    ``sub`` midpoint nodes per step; pointwise f, g^2, v and Lambda come from
    the schedule (those are cross-checked against quadrature elsewhere).
    """
    eta = T / K
    h = eta / sub
    # reverse-time nodes, shape (K, sub); row k-1 is step k
    t = (np.arange(K)[:, None] * eta) + (np.arange(sub)[None, :] + 0.5) * h
    tau = T - t
    f = np.broadcast_to(sched.f(tau), tau.shape)
    g2 = sched.g2(tau)
    v = sched.variance(tau)
    lam = sched.cumulative_drift(tau)
    L = np.minimum(1.0 / v, np.exp(2 * lam) * L0)
    D = np.exp(-2 * lam) / m0 + v

    fh = f * h
    to_end = np.cumsum(fh[:, ::-1], axis=1)[:, ::-1] - 0.5 * fh  # int_t^{k eta} f(T - s) ds
    from_start = np.cumsum(fh, axis=1) - 0.5 * fh  # int_{(k-1) eta}^t f(T - s) ds

    phi = (np.exp(to_end) * g2).sum(axis=1) * h
    psi = (np.exp(2 * to_end) * g2**2 * L**2).sum(axis=1) * h
    delta = 0.5 * np.exp(-from_start) * g2 / D - 0.25 * eta * g2**2 * L**2
    delta_int = delta.sum(axis=1) * h
    g2_int = g2.sum(axis=1) * h
    gamma = 1.0 - delta_int + 0.5 * L1 * eta * g2_int

    # theta and omega as suprema over a fine grid of [0, T]
    s = np.linspace(0.0, T, sup_grid)
    omega = float(np.sqrt(np.exp(-2 * sched.cumulative_drift(s)) * x0_l2**2 + d * sched.variance(s)).max())
    u = T - s  # forward time as s runs over reverse time
    lam_u = sched.cumulative_drift(u)
    m = sched.g2(u) / (np.exp(-2 * lam_u) / m0 + sched.variance(u)) - 2 * np.broadcast_to(sched.f(u), u.shape)
    int_m = integrate.cumulative_trapezoid(m, s, initial=0.0)
    theta = float((np.exp(-0.5 * int_m)).max() * math.exp(-float(sched.cumulative_drift(T))) * x0_l2)

    F = fh.sum(axis=1)
    nu = (theta + omega) * ((f + 0.5 * g2 * L).sum(axis=1) * h) + (L1 * T + grad0) * 0.5 * g2_int

    later_drift = np.concatenate([np.cumsum(F[::-1])[::-1][1:], [0.0]])  # int_{k eta}^{K eta} f(T - t) dt
    E1 = E2 = 0.0
    for k in range(1, K + 1):
        prod = float(np.prod(gamma[k:]))
        w = prod * math.exp(later_drift[k - 1])
        E1 += w * (0.5 * L1 * eta * (1 + x0_l2 + omega) * phi[k - 1] + 0.5 * math.sqrt(eta) * nu[k - 1] * math.sqrt(psi[k - 1]))
        E2 += w * 0.5 * M * phi[k - 1]

    mu_int = float((0.5 * m0 * g2 / (np.exp(-2 * lam) + m0 * v)).sum() * h)
    init = math.exp(-mu_int) * x0_l2
    return {
        "phi": phi,
        "psi": psi,
        "gamma": gamma,
        "delta_integral": delta_int,
        "nu": nu,
        "theta": theta,
        "omega": omega,
        "init_error": init,
        "E1": E1,
        "E2": E2,
        "total": init + E1 + E2,
    }


def convolved_score_oracle(V, alpha, v, x, half_width=40.0, n=400_001):
    """Score of the law of alpha x0 + sqrt(v) z, x0 ~ exp(-V), by differentiating
    the log of a grid convolution with a centred difference."""
    y = np.linspace(-half_width, half_width, n)
    logp0 = -V(y)
    logp0 -= logp0.max()

    def log_density(z):
        e = logp0 - (z - alpha * y) ** 2 / (2 * v)
        top = e.max()
        return top + math.log(np.trapezoid(np.exp(e - top), y))

    step = 1e-4
    return (log_density(x + step) - log_density(x - step)) / (2 * step)
