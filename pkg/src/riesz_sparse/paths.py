"""Time grids, sampled paths, stochastic integrals and subordinate pairs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .rng import stream

DEFAULT_SPEED = 2.0

TRANSFORM_KINDS = ("constant-unit", "rotating", "random-ball")


@dataclass(frozen=True)
class TimeGrid:
    t_max: float
    n_steps: int

    def __post_init__(self):
        if not (self.t_max > 0 and math.isfinite(self.t_max)):
            raise ValueError(f"t_max must be positive, got {self.t_max}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.t_max / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t_max, self.n_steps * factor)


def make_time_grid(t_max: float, n_steps: int) -> TimeGrid:
    return TimeGrid(float(t_max), n_steps)


@dataclass(frozen=True)
class ScalarPath:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_steps + 1,):
            raise ValueError(f"expected {self.grid.n_steps + 1} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("path values must be finite")
        object.__setattr__(self, "values", v)

    def as_vector(self) -> "VectorPath":
        return VectorPath(self.grid, self.values[:, None])

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)


@dataclass(frozen=True)
class VectorPath:
    """Path of d-vectors, ``values`` has shape (n_steps + 1, d)."""
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n_steps + 1:
            raise ValueError(f"expected ({self.grid.n_steps + 1}, d) values, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("path values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=1)


def _as_vector(path) -> VectorPath:
    return path.as_vector() if isinstance(path, ScalarPath) else path


@dataclass(frozen=True)
class MartingalePair:
    X: ScalarPath
    Y: VectorPath
    transform: np.ndarray  # (n_steps, d); row k multiplies the k-th increment of X
    x0: float

    def __post_init__(self):
        if self.X.grid != self.Y.grid:
            raise ValueError("X and Y must share a grid")
        if np.any(self.X.values < 0):
            raise ValueError("X must be non-negative")
        if np.any(np.linalg.norm(self.transform, axis=1) > 1 + 1e-12):
            raise ValueError("transform vectors must lie in the closed unit ball")

    @property
    def grid(self) -> TimeGrid:
        return self.X.grid


def sample_brownian(grid: TimeGrid, d: int = 1, speed: float = DEFAULT_SPEED,
                    seed: int = 0, path_index: int = 0) -> VectorPath:
    """Brownian path from 0 with ``E|B_t^i|^2 = speed * t`` per component."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if not speed > 0:
        raise ValueError("speed must be positive")
    g = stream(seed, path_index)
    inc = g.standard_normal((grid.n_steps, d)) * math.sqrt(speed * grid.dt)
    values = np.zeros((grid.n_steps + 1, d))
    np.cumsum(inc, axis=0, out=values[1:])
    return VectorPath(grid, values)


def stochastic_integral(integrand, driver) -> VectorPath:
    """Left-point (Ito) sums of ``integrand`` against a scalar ``driver``."""
    integrand = _as_vector(integrand)
    if integrand.grid != driver.grid:
        raise ValueError("integrand and driver live on different grids")
    dv = np.diff(driver.values)
    out = np.zeros_like(integrand.values)
    np.cumsum(integrand.values[:-1] * dv[:, None], axis=0, out=out[1:])
    return VectorPath(integrand.grid, out)


def quadratic_variation(path) -> ScalarPath:
    """Running sum of squared increment norms, starting from 0."""
    path = _as_vector(path)
    inc = np.sum(path.increments ** 2, axis=1)
    out = np.zeros(path.grid.n_steps + 1)
    np.cumsum(inc, out=out[1:])
    return ScalarPath(path.grid, out)


@dataclass(frozen=True)
class SubordinationCheck:
    holds: bool
    min_margin: float       # worst value of <X>_k - <Y>_k
    min_step_margin: float  # worst one-step change of that difference


def check_diff_subordination(X, Y, tol: float = 0.0) -> SubordinationCheck:
    X = _as_vector(X)
    Y = _as_vector(Y)
    if X.grid != Y.grid:
        raise ValueError("X and Y live on different grids")
    margin = quadratic_variation(X).values - quadratic_variation(Y).values
    steps = np.diff(margin)
    m = float(margin.min())
    s = float(steps.min()) if steps.size else 0.0
    return SubordinationCheck(m >= -tol and s >= -tol, m, s)


# -- compiled path generation shared with the ensemble kernels ---------------

@nb.njit(nogil=True, cache=True)
def _transform(kind, k, t, omega, d, g, out):
    if kind == 0:
        for j in range(d):
            out[j] = 0.0
        out[0] = 1.0
    elif kind == 1:
        th = omega * t
        for j in range(d):
            out[j] = 0.0
        if d == 1:
            out[0] = math.cos(th)
        elif d == 2:
            out[0] = math.cos(th)
            out[1] = math.sin(th)
        else:
            ph = th / 3.0
            out[0] = math.cos(th) * math.cos(ph)
            out[1] = math.sin(th) * math.cos(ph)
            out[2] = math.sin(ph)
    else:
        nrm = 0.0
        for j in range(d):
            out[j] = g.standard_normal()
            nrm += out[j] * out[j]
        u = g.random()
        if d == 1:
            r = u
        elif d == 2:
            r = math.sqrt(u)
        else:
            r = u ** (1.0 / d)
        nrm = math.sqrt(nrm)
        if nrm == 0.0:
            for j in range(d):
                out[j] = 0.0
        else:
            for j in range(d):
                out[j] *= r / nrm


@nb.njit(nogil=True, cache=True)
def _pair_path(g, n_steps, dt, speed, x0, kind, omega, X, A, dY):
    """Fill X (n+1), A (n, d) and dY (n, d) for one absorbed-at-zero pair.

    Per step the draws are: one normal for the driver, then the transform's.
    """
    d = A.shape[1]
    sig = math.sqrt(speed * dt)
    X[0] = x0
    for k in range(n_steps):
        dw = sig * g.standard_normal()
        _transform(kind, k, k * dt, omega, d, g, A[k])
        xk = X[k]
        if xk > 0.0:
            xn = xk + dw
            if xn < 0.0:
                xn = 0.0
        else:
            xn = xk
        X[k + 1] = xn
        dx = xn - xk
        for j in range(d):
            dY[k, j] = A[k, j] * dx


def synth_martingale_pair(grid: TimeGrid, d: int, x0: float, driver_seed: int,
                          transform_kind: str = "constant-unit",
                          speed: float = DEFAULT_SPEED, omega: float = 2 * math.pi,
                          path_index: int = 0) -> MartingalePair:
    """Non-negative martingale ``X`` absorbed at 0 and ``Y`` with dY = a dX.

    ``omega`` is the angular rate of the rotating transform.
    """
    if not x0 > 0:
        raise ValueError("x0 must be positive")
    if d < 1:
        raise ValueError("d must be >= 1")
    kind = TRANSFORM_KINDS.index(transform_kind)
    n = grid.n_steps
    X = np.empty(n + 1)
    A = np.empty((n, d))
    dY = np.empty((n, d))
    _pair_path(stream(driver_seed, path_index), n, grid.dt, speed, float(x0),
               kind, omega, X, A, dY)
    Y = np.zeros((n + 1, d))
    np.cumsum(dY, axis=0, out=Y[1:])
    return MartingalePair(ScalarPath(grid, X), VectorPath(grid, Y), A, float(x0))
