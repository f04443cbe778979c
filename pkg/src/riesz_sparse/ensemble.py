"""Compiled ensembles of (X, Y, V, Z) with per-path statistics.

One pass per path generates the subordinate pair, the drift, the solution Z,
the quantities the weak-type and structural checks need, and the levels of
the sparse decomposition.  Nothing path-sized outlives its chunk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .drift import V_KINDS, _fill_gram, _fill_V, _gram_trig, contraction_slack
from .paths import DEFAULT_SPEED, TRANSFORM_KINDS, TimeGrid, _transform
from .rng import derive_seed, run_chunked, stream
from .sparse import (DEFAULT_DOMINATION, DEFAULT_MAX_LEVELS, DEFAULT_THRESHOLD,
                     SparseDecomposition, _sparse_levels)

_FIELDS = ("x_final", "x_min", "sup_xz", "z_max", "z0_norm", "qv_margin_min",
           "qv_step_min", "qv_x_total", "qv_identity_err", "wang_excess",
           "drift_sign_max", "v_sup", "z_sup", "refoot_excess", "homog_growth")


@nb.njit(nogil=True, cache=True)
def _driven_path(g, n, dt, speed, x0, A, X, dY):
    """Absorbed pair for a fixed transform table ``A`` (one normal per step)."""
    d = A.shape[1]
    sig = math.sqrt(speed * dt)
    X[0] = x0
    for k in range(n):
        dw = sig * g.standard_normal()
        xk = X[k]
        xn = xk
        if xk > 0.0:
            xn = xk + dw
            if xn < 0.0:
                xn = 0.0
        X[k + 1] = xn
        dx = xn - xk
        for j in range(d):
            dY[k, j] = A[k, j] * dx


@nb.njit(nogil=True, cache=True)
def _ball_path(g, n, dt, speed, x0, X, dY):
    """Absorbed pair with a fresh uniform-ball transform each step.

    Same draws, in the same order, as the random-ball transform of
    :func:`~riesz_sparse.paths.synth_martingale_pair`.
    """
    d = dY.shape[1]
    sig = math.sqrt(speed * dt)
    inv_d = 1.0 / d
    X[0] = x0
    for k in range(n):
        dw = sig * g.standard_normal()
        nrm = 0.0
        for j in range(d):
            v = g.standard_normal()
            dY[k, j] = v
            nrm += v * v
        u = g.random()
        if d == 1:
            r = u
        elif d == 2:
            r = math.sqrt(u)
        else:
            r = u ** inv_d
        xk = X[k]
        xn = xk
        if xk > 0.0:
            xn = xk + dw
            if xn < 0.0:
                xn = 0.0
        X[k + 1] = xn
        scale = 0.0 if nrm == 0.0 else (xn - xk) * r / math.sqrt(nrm)
        for j in range(d):
            dY[k, j] *= scale


@nb.njit(nogil=True, cache=True)
def _chunk(g, n_paths, n, dt, speed, x0, d, tkind, omega, vkind, c, vscale, vomega,
           threshold, max_levels, stats, T, XT):
    X = np.empty(n + 1)
    A = np.empty((n, d))
    dY = np.empty((n, d))
    V = np.zeros((n + 1, d, d))
    Z = np.empty((n + 1, d))
    Zk = np.empty((n + 1, d))
    G0 = np.zeros((d, d))
    G1 = np.zeros((d, d))
    vz_row = np.empty(d)
    # path-independent inputs are built once per chunk
    if tkind != 2:
        for k in range(n):
            _transform(tkind, k, k * dt, omega, d, g, A[k])
    if vkind != 2:
        _fill_V(vkind, c, vscale, vomega, G0, G1, dt, V)
    ct, st = _gram_trig(vomega, dt, n + 1)
    has_drift = vkind != 0
    for p in range(n_paths):
        if vkind == 2:
            for i in range(d):
                for j in range(d):
                    G0[i, j] = g.standard_normal()
            for i in range(d):
                for j in range(d):
                    G1[i, j] = g.standard_normal()
            _fill_gram(vscale, G0, G1, ct, st, V)
        if tkind == 2:
            _ball_path(g, n, dt, speed, x0, X, dY)
        else:
            _driven_path(g, n, dt, speed, x0, A, X, dY)

        # Euler solve for Z fused with the per-path statistics
        qx = 0.0
        qy = 0.0
        qz = 0.0
        margin_min = 0.0
        step_min = np.inf
        ident = 0.0
        wang = -np.inf
        xmin = X[0]
        zmax = 0.0
        sup_xz = 0.0
        dsign = -np.inf
        vsup = 0.0
        for i in range(d):
            Z[0, i] = 0.0
        for k in range(n + 1):
            zn = 0.0
            vz = 0.0
            vf = 0.0
            for i in range(d):
                zn += Z[k, i] * Z[k, i]
            if has_drift:
                for i in range(d):
                    acc = 0.0
                    for j in range(d):
                        acc += V[k, i, j] * Z[k, j]
                        vf += V[k, i, j] * V[k, i, j]
                    vz_row[i] = acc
                    vz += Z[k, i] * acc
            zn = math.sqrt(zn)
            vf = math.sqrt(vf)
            if zn > zmax:
                zmax = zn
            if X[k] + zn > sup_xz:
                sup_xz = X[k] + zn
            if X[k] < xmin:
                xmin = X[k]
            if vz > dsign:
                dsign = vz
            if vf > vsup:
                vsup = vf
            if k < n:
                dx2 = (X[k + 1] - X[k]) ** 2
                dy2 = 0.0
                dz2 = 0.0
                for i in range(d):
                    step = dY[k, i]
                    if has_drift:
                        step += vz_row[i] * dt
                    Z[k + 1, i] = Z[k, i] + step
                    dy2 += dY[k, i] * dY[k, i]
                    dz2 += step * step
                qx += dx2
                qy += dy2
                qz += dz2
                if dx2 - dy2 < step_min:
                    step_min = dx2 - dy2
                if qx - qy < margin_min:
                    margin_min = qx - qy
                if abs(qz - qy) > ident:
                    ident = abs(qz - qy)
                if qz - qx > wang:
                    wang = qz - qx
        stats[p, 0] = X[n]
        stats[p, 1] = xmin
        stats[p, 2] = sup_xz
        stats[p, 3] = zmax
        stats[p, 4] = 0.0
        stats[p, 5] = margin_min
        stats[p, 6] = step_min
        stats[p, 7] = qx
        stats[p, 8] = ident
        stats[p, 9] = wang
        stats[p, 10] = dsign
        stats[p, 11] = vsup
        stats[p, 12] = zmax
        _, rex, hg = _sparse_levels(X, dY, V, Z, dt, threshold, max_levels, T[p], XT[p], Zk)
        stats[p, 13] = rex
        stats[p, 14] = hg


@dataclass(frozen=True)
class EnsembleSpec:
    """Recipe for an ensemble of subordinate pairs and drifts on a time grid."""
    grid: TimeGrid
    d: int = 1
    x0: float = 1.0
    transform: str = "constant-unit"
    v_kind: str = "zero"
    c: float = -1.0           # scaled-identity coefficient
    v_scale: float = 1.0      # random-gram scale
    v_omega: float = 2 * math.pi
    omega: float = 2 * math.pi  # rotating-transform rate
    speed: float = DEFAULT_SPEED
    threshold: float = DEFAULT_THRESHOLD
    domination_constant: float = DEFAULT_DOMINATION
    max_levels: int = DEFAULT_MAX_LEVELS

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not self.x0 > 0:
            raise ValueError("x0 must be positive")
        if self.transform not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.v_kind not in V_KINDS:
            raise ValueError(f"unknown drift kind {self.v_kind!r}")
        if self.v_kind == "scaled-identity" and self.c > 0:
            raise ValueError("scaled-identity drift needs c <= 0")
        if self.v_kind == "random-gram" and not self.v_scale > 0:
            raise ValueError("random-gram drift needs v_scale > 0")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.max_levels < 1:
            raise ValueError("max_levels must be >= 1")

    @property
    def label(self) -> str:
        return f"d{self.d}-{self.transform}-{self.v_kind}"

    def with_grid(self, grid: TimeGrid) -> "EnsembleSpec":
        return EnsembleSpec(grid, self.d, self.x0, self.transform, self.v_kind, self.c,
                            self.v_scale, self.v_omega, self.omega, self.speed,
                            self.threshold, self.domination_constant, self.max_levels)

    def run(self, n_paths: int, seed: int, threads: int = 1) -> "EnsembleResult":
        if n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        n = self.grid.n_steps
        L = self.max_levels + 1
        stats = np.empty((n_paths, len(_FIELDS)))
        T = np.empty((n_paths, L), dtype=np.int64)
        XT = np.empty((n_paths, L))
        key = derive_seed(seed, "ensemble", self.label)
        tk = TRANSFORM_KINDS.index(self.transform)
        vk = V_KINDS.index(self.v_kind)

        def work(ci, a, b):
            _chunk(stream(key, ci), b - a, n, self.grid.dt, self.speed, self.x0, self.d,
                   tk, self.omega, vk, self.c, self.v_scale, self.v_omega,
                   self.threshold, self.max_levels, stats[a:b], T[a:b], XT[a:b])

        run_chunked(work, n_paths, threads)
        cols = {f: stats[:, i].copy() for i, f in enumerate(_FIELDS)}
        return EnsembleResult(spec=self, n_paths=n_paths, x0=self.x0, T=T, X_T=XT, **cols)


@dataclass(frozen=True)
class EnsembleResult:
    spec: EnsembleSpec
    n_paths: int
    x0: float
    x_final: np.ndarray
    x_min: np.ndarray
    sup_xz: np.ndarray         # sup_k (|X_k| + |Z_k|)
    z_max: np.ndarray          # Z*
    z0_norm: np.ndarray
    qv_margin_min: np.ndarray  # min_k <X>_k - <Y>_k
    qv_step_min: np.ndarray
    qv_x_total: np.ndarray
    qv_identity_err: np.ndarray  # max_k |<Z>_k - <Y>_k|
    wang_excess: np.ndarray      # max_k <Z>_k - <X>_k
    drift_sign_max: np.ndarray   # max_k <Z_k, V_k Z_k>
    v_sup: np.ndarray            # max_k Frobenius norm of V_k
    z_sup: np.ndarray
    refoot_excess: np.ndarray    # max over levels, t >= foot of |Z - Z^(k)| - |Z_foot|
    homog_growth: np.ndarray     # max one-step growth of |Z - Z^(k)|
    T: np.ndarray
    X_T: np.ndarray

    markov = False
    states = None

    @property
    def decomposition(self) -> SparseDecomposition:
        return SparseDecomposition(self.T, self.X_T, self.spec.threshold,
                                   self.spec.domination_constant)

    def slack(self) -> np.ndarray:
        """Per-path first-order tolerance for the O(dt) identities."""
        return contraction_slack(self.spec.grid.dt, self.z_sup, self.v_sup)


@dataclass(frozen=True)
class InvariantRow:
    name: str
    worst: float      # worst excess over its tolerance (<= 0 passes)
    n_violations: int

    @property
    def holds(self) -> bool:
        return self.n_violations == 0


def structural_invariants(result: EnsembleResult, roundoff: float = 1e-10):
    """Per-path structural checks, each reported as worst (value - tolerance)."""
    tol = result.slack()
    scale = 1.0 + result.qv_x_total
    zs = 1.0 + result.z_sup
    dt = result.spec.grid.dt
    checks = {
        "subordination_margin": -result.qv_margin_min - roundoff * scale,
        "subordination_monotone": -result.qv_step_min - roundoff * scale,
        "qv_identity": result.qv_identity_err - tol,
        "qv_wang": result.wang_excess - tol,
        "drift_sign": result.drift_sign_max - roundoff * zs ** 2 * (1.0 + result.v_sup),
        "refoot_contraction": np.where(np.isfinite(result.refoot_excess),
                                       result.refoot_excess - tol, -np.inf),
        "homogeneous_monotone": np.where(np.isfinite(result.homog_growth),
                                         result.homog_growth - dt * result.v_sup * zs
                                         - roundoff * zs, -np.inf),
        "x_nonnegative": -result.x_min,
    }
    rows = []
    for name, excess in checks.items():
        rows.append(InvariantRow(name, float(np.max(excess)), int(np.sum(excess > 0))))
    rows.append(InvariantRow("nesting", 0.0 if result.decomposition.check_nesting() else 1.0,
                             0 if result.decomposition.check_nesting() else 1))
    return rows
