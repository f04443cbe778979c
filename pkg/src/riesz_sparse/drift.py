"""Drift matrices and the linear equation dZ = V Z dt + dY."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .paths import TimeGrid, VectorPath, _as_vector
from .rng import stream

V_KINDS = ("zero", "scaled-identity", "random-gram")

# eigenvalues above this (relative to the largest magnitude) count as positive
_PSD_RTOL = 1e-12


@dataclass(frozen=True)
class DriftMatrixProcess:
    """Symmetric non-positive matrices V_k, one per grid point."""
    grid: TimeGrid
    matrices: np.ndarray  # (n_steps + 1, d, d)

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=float)
        if m.ndim != 3 or m.shape[0] != self.grid.n_steps + 1 or m.shape[1] != m.shape[2]:
            raise ValueError(f"expected ({self.grid.n_steps + 1}, d, d) matrices, got {m.shape}")
        if not np.array_equal(m, np.swapaxes(m, 1, 2)):
            raise ValueError("drift matrices must be symmetric")
        ev = np.linalg.eigvalsh(m)
        scale = max(1.0, float(np.abs(ev).max()))
        if ev.max() > _PSD_RTOL * scale:
            raise ValueError(f"drift matrices must be negative semidefinite "
                             f"(max eigenvalue {ev.max():.3g})")
        object.__setattr__(self, "matrices", m)

    @property
    def d(self) -> int:
        return self.matrices.shape[1]

    def max_norm(self) -> float:
        return float(np.abs(np.linalg.eigvalsh(self.matrices)).max())


@dataclass(frozen=True)
class SemimartingalePath:
    Z: VectorPath
    V: DriftMatrixProcess
    Y: VectorPath
    z0: np.ndarray


@nb.njit(nogil=True, cache=True)
def _euler_drift(V, dY, z0, dt, start, out):
    """Euler recursion Z_{k+1} = Z_k + V_k Z_k dt + dY_k from index ``start``.

    Indices up to ``start`` hold ``z0``.  An empty ``dY`` (0 rows) means the
    homogeneous equation.
    """
    n = out.shape[0] - 1
    d = out.shape[1]
    forced = dY.shape[0] > 0
    for k in range(start + 1):
        for i in range(d):
            out[k, i] = z0[i]
    for k in range(start, n):
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += V[k, i, j] * out[k, j]
            nxt = out[k, i] + acc * dt
            if forced:
                nxt += dY[k, i]
            out[k + 1, i] = nxt


@nb.njit(nogil=True, cache=True)
def _gram_trig(omega, dt, n1):
    ct = np.empty(n1)
    st = np.empty(n1)
    for k in range(n1):
        ct[k] = math.cos(omega * k * dt)
        st[k] = math.sin(omega * k * dt)
    return ct, st


@nb.njit(nogil=True, cache=True)
def _fill_gram(scale, G0, G1, ct, st, V):
    """V_k = -scale G_k G_k^T with G_k = G0 ct_k + G1 st_k, expanded as
    ct^2 G0 G0^T + st^2 G1 G1^T + ct st (G0 G1^T + G1 G0^T) and mirrored."""
    d = V.shape[1]
    P0 = np.zeros((d, d))
    P1 = np.zeros((d, d))
    P01 = np.zeros((d, d))
    for i in range(d):
        for j in range(i, d):
            a0 = 0.0
            a1 = 0.0
            a01 = 0.0
            for l in range(d):
                a0 += G0[i, l] * G0[j, l]
                a1 += G1[i, l] * G1[j, l]
                a01 += G0[i, l] * G1[j, l] + G1[i, l] * G0[j, l]
            P0[i, j] = a0
            P1[i, j] = a1
            P01[i, j] = a01
    for k in range(V.shape[0]):
        c = ct[k]
        s = st[k]
        cc = c * c
        ss = s * s
        cs = c * s
        for i in range(d):
            for j in range(i, d):
                v = -scale * (cc * P0[i, j] + ss * P1[i, j] + cs * P01[i, j])
                V[k, i, j] = v
                V[k, j, i] = v


@nb.njit(nogil=True, cache=True)
def _fill_V(kind, c, scale, omega, G0, G1, dt, V):
    n1 = V.shape[0]
    d = V.shape[1]
    if kind == 0:
        V[:] = 0.0
    elif kind == 1:
        V[:] = 0.0
        for k in range(n1):
            for i in range(d):
                V[k, i, i] = c
    else:
        ct, st = _gram_trig(omega, dt, n1)
        _fill_gram(scale, G0, G1, ct, st, V)


def _check_dims(V: DriftMatrixProcess, Y: VectorPath):
    if V.grid != Y.grid:
        raise ValueError("V and Y live on different grids")
    if V.d != Y.d:
        raise ValueError(f"dimension mismatch: V is {V.d}x{V.d}, Y has d={Y.d}")


def solve_Z(V: DriftMatrixProcess, Y, z0) -> SemimartingalePath:
    Y = _as_vector(Y)
    _check_dims(V, Y)
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    if z0.shape != (Y.d,):
        raise ValueError(f"z0 must have shape ({Y.d},)")
    out = np.empty_like(Y.values)
    _euler_drift(V.matrices, Y.increments, z0, V.grid.dt, 0, out)
    return SemimartingalePath(VectorPath(Y.grid, out), V, Y, z0)


def solve_homogeneous(V: DriftMatrixProcess, w0, from_index: int = 0) -> VectorPath:
    """dW = V W dt started from ``w0`` at ``from_index`` (constant before)."""
    w0 = np.atleast_1d(np.asarray(w0, dtype=float))
    if not 0 <= from_index <= V.grid.n_steps:
        raise ValueError("from_index outside the grid")
    if w0.shape != (V.d,):
        raise ValueError(f"w0 must have shape ({V.d},)")
    out = np.empty((V.grid.n_steps + 1, V.d))
    _euler_drift(V.matrices, np.empty((0, V.d)), w0, V.grid.dt, from_index, out)
    return VectorPath(V.grid, out)


def refoot_Z(V: DriftMatrixProcess, Y, T_prev: int) -> SemimartingalePath:
    """Solution that is 0 up to ``T_prev`` and then follows dZ = V Z dt + dY."""
    Y = _as_vector(Y)
    _check_dims(V, Y)
    if not 0 <= T_prev <= V.grid.n_steps:
        raise ValueError("T_prev outside the grid")
    z0 = np.zeros(Y.d)
    out = np.empty_like(Y.values)
    _euler_drift(V.matrices, Y.increments, z0, V.grid.dt, int(T_prev), out)
    return SemimartingalePath(VectorPath(Y.grid, out), V, Y, z0)


def synth_V(grid: TimeGrid, d: int, kind: str = "zero", seed: int = 0, *,
            c: float = -1.0, scale: float = 1.0, omega: float = 2 * math.pi,
            path_index: int = 0) -> DriftMatrixProcess:
    """Admissible drift generator.

    ``random-gram`` uses V_t = -scale * G_t G_t^T with
    G_t = G0 cos(omega t) + G1 sin(omega t); G_t has iid standard normal
    entries at every fixed t and varies continuously in t.
    """
    if kind not in V_KINDS:
        raise ValueError(f"unknown drift kind {kind!r}")
    if kind == "scaled-identity" and c > 0:
        raise ValueError("scaled-identity drift needs c <= 0")
    if kind == "random-gram" and not scale > 0:
        raise ValueError("random-gram drift needs scale > 0")
    G0, G1 = _gram_factors(stream(seed, path_index), d, kind)
    V = np.empty((grid.n_steps + 1, d, d))
    _fill_V(V_KINDS.index(kind), float(c), float(scale), float(omega), G0, G1, grid.dt, V)
    return DriftMatrixProcess(grid, V)


def _gram_factors(g, d, kind):
    if kind != "random-gram":
        return np.zeros((d, d)), np.zeros((d, d))
    G0 = g.standard_normal((d, d))
    G1 = g.standard_normal((d, d))
    return G0, G1


def contraction_slack(dt: float, z_sup: float, v_sup: float) -> float:
    """First-order tolerance 10 dt (1 + sup|Z|)(1 + sup|V|) used by the checks."""
    return 10.0 * dt * (1.0 + z_sup) * (1.0 + v_sup)
