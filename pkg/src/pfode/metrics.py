"""2-Wasserstein distances and second-moment utilities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import DomainError

__all__ = [
    "GaussianLaw",
    "W2Result",
    "w2_gaussian",
    "w2_sorted_1d",
    "w2_sliced",
    "l2_norm_of",
    "sup_l2_norm",
    "psd_sqrt",
]

EIG_CLAMP = 1e-12


@dataclass(frozen=True, eq=False)
class GaussianLaw:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DomainError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def d(self) -> int:
        return self.mean.size

    def second_moment(self) -> float:
        """E||x||^2."""
        return float(self.mean @ self.mean + np.trace(self.cov))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass(frozen=True)
class W2Result:
    value: float
    method: str
    std_error: float | None = None
    n_projections: int | None = None
    seed: int | None = None
    label: str = field(default="exact")

    def __float__(self):
        return self.value


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric square root, clamping round-off negative eigenvalues to zero."""
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    tol = EIG_CLAMP * max(1.0, float(np.max(np.abs(w))))
    if np.any(w < -tol):
        raise DomainError(f"matrix is not positive semidefinite (eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def w2_gaussian(a: GaussianLaw, b: GaussianLaw) -> W2Result:
    """Closed-form W2 between two Gaussian laws (Bures metric plus mean shift)."""
    if a.d != b.d:
        raise DomainError(f"dimension mismatch: {a.d} vs {b.d}")
    root_b = psd_sqrt(b.cov)
    cross = psd_sqrt(root_b @ a.cov @ root_b)
    shift = a.mean - b.mean
    sq = float(shift @ shift + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return W2Result(float(np.sqrt(max(sq, 0.0))), "gaussian_closed_form")


def w2_sorted_1d(a, b) -> W2Result:
    """Exact W2 between two equal-size 1D empirical measures."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise DomainError("empty sample set")
    if a.size != b.size:
        raise DomainError(f"sample counts differ: {a.size} vs {b.size}")
    diff = np.sort(a) - np.sort(b)
    return W2Result(float(np.sqrt(np.mean(diff**2))), "sorted_1d")


def w2_sliced(a, b, n_projections: int = 256, seed: int = 0) -> W2Result:
    """Sliced W2 over random unit directions.

    This lower-bounds the true W2 and is labelled as a proxy. The standard
    error is propagated from the spread of the per-direction squared distances.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] == 0:
        raise DomainError("zero-dimensional samples")
    if a.shape != b.shape:
        raise DomainError(f"sample shapes differ: {a.shape} vs {b.shape}")
    if n_projections < 1:
        raise DomainError("n_projections must be at least 1")
    streams = np.random.SeedSequence(seed).spawn(n_projections)
    sq = np.empty(n_projections)
    for j, ss in enumerate(streams):
        direction = np.random.Generator(np.random.Philox(ss)).standard_normal(a.shape[1])
        direction /= np.linalg.norm(direction)
        sq[j] = w2_sorted_1d(a @ direction, b @ direction).value ** 2
    value = float(np.sqrt(sq.mean()))
    if n_projections > 1 and value > 0:
        se = float(sq.std(ddof=1) / np.sqrt(n_projections) / (2 * value))
    else:
        se = 0.0
    return W2Result(value, "sliced", se, n_projections, seed, "lower-bound proxy")


def l2_norm_of(target, sched, t) -> np.ndarray | float:
    """sqrt(E||x_t||^2) for the forward process started at ``target``."""
    t = np.asarray(t, dtype=float)
    decay = np.exp(-2.0 * sched.cumulative_drift(t))
    out = np.sqrt(decay * target.second_moment + target.d * sched.variance(t))
    return float(out) if out.ndim == 0 else out


def sup_l2_norm(target, sched, T: float, n_grid: int = 1000) -> float:
    """Supremum of :func:`l2_norm_of` over [0, T] (grid plus local refinement)."""
    return _grid_sup(lambda t: l2_norm_of(target, sched, t), T, n_grid)


def _grid_sup(func, T: float, n_grid: int) -> float:
    grid = np.linspace(0.0, T, n_grid)
    values = np.asarray(func(grid), dtype=float)
    i = int(np.argmax(values))
    best = float(values[i])
    if 0 < i < n_grid - 1:
        res = optimize.minimize_scalar(
            lambda s: -float(func(s)), bounds=(grid[i - 1], grid[i + 1]), method="bounded",
            options={"xatol": 1e-12 * max(T, 1.0)},
        )
        best = max(best, -float(res.fun))
    return best
