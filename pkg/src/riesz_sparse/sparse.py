"""Recursive stopping-time construction and the sparse operator S(X).

Level ``j`` of a decomposition (``j >= -1``) is stored in column ``j + 1`` of
the per-path arrays.  A stopping index equal to :data:`NEVER` marks a level
the path never reaches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numba as nb
import numpy as np

from .drift import DriftMatrixProcess, _euler_drift
from .errors import RejectedSelectorError, UnsupportedInstanceError
from .paths import ScalarPath, VectorPath, _as_vector

NEVER = np.iinfo(np.int64).max // 2

DEFAULT_THRESHOLD = 4.0
DEFAULT_DOMINATION = 8.0
DEFAULT_MAX_LEVELS = 64
RESIDUAL_MASS_LIMIT = 1e-6


def maximal(P) -> float:
    """sup_k |P_k|."""
    if isinstance(P, (ScalarPath, VectorPath)):
        P = _as_vector(P).values
    P = np.asarray(P, dtype=float)
    if P.ndim == 1:
        return float(np.abs(P).max())
    return float(np.linalg.norm(P, axis=-1).max())


def _values(p):
    if isinstance(p, (ScalarPath, VectorPath)):
        return p.values
    return np.asarray(p, dtype=float)


def hitting_time(Zk, Xk, threshold: float, from_index: int = 0) -> int:
    """First index >= ``from_index`` with max(|Zk|, Xk) > threshold, else NEVER."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    z = _values(Zk)
    z = np.abs(z) if z.ndim == 1 else np.linalg.norm(z, axis=1)
    x = _values(Xk)
    if z.shape != x.shape:
        raise ValueError("Zk and Xk live on different grids")
    hit = np.flatnonzero(np.maximum(z, x)[from_index:] > threshold)
    return int(hit[0] + from_index) if hit.size else NEVER


@nb.njit(nogil=True, cache=True)
def _norm(v):
    s = 0.0
    for i in range(v.shape[0]):
        s += v[i] * v[i]
    return math.sqrt(s)


@nb.njit(nogil=True, cache=True)
def _sparse_levels(X, dY, V, Z, dt, threshold, max_levels, T, XT, Zk):
    """Build the levels of one path.

    Fills T and XT (length max_levels + 1, column j + 1 is level j) and
    returns (deepest level index reached, max refoot excess, max one-step
    growth of |Z - Z^(k)|).
    """
    n = X.shape[0] - 1
    d = Z.shape[1]
    never = np.iinfo(np.int64).max // 2
    for j in range(T.shape[0]):
        T[j] = never
        XT[j] = np.nan
    T[0] = 0
    XT[0] = X[0]
    refoot_excess = -np.inf
    homog_growth = -np.inf
    # level 0: normalise the original processes by X_0
    x0 = X[0]
    for k in range(n + 1):
        if max(_norm(Z[k]), X[k]) > threshold * x0:
            T[1] = k
            XT[1] = X[k]
            break
    if T[1] == never:
        return 0, refoot_excess, homog_growth
    zero = np.zeros(d)
    deepest = 0
    for lev in range(1, max_levels):
        foot = T[lev]
        xf = X[foot]
        if xf <= 0.0:
            break
        _euler_drift(V, dY, zero, dt, foot, Zk)
        zf = _norm(Z[foot])
        w_prev = zf
        hit = never
        for k in range(foot, n + 1):
            w = 0.0
            for i in range(d):
                diff = Z[k, i] - Zk[k, i]
                w += diff * diff
            w = math.sqrt(w)
            if w - zf > refoot_excess:
                refoot_excess = w - zf
            if k > foot and w - w_prev > homog_growth:
                homog_growth = w - w_prev
            w_prev = w
            if hit == never and k > foot and max(_norm(Zk[k]), X[k]) > threshold * xf:
                hit = k
        if hit == never:
            break
        T[lev + 1] = hit
        XT[lev + 1] = X[hit]
        deepest = lev
    return deepest, refoot_excess, homog_growth


@dataclass(frozen=True)
class SparseDecomposition:
    T: np.ndarray    # (n_paths, max_levels + 1) stopping indices, NEVER if unreached
    X_T: np.ndarray  # stopped values X_{T_j}, NaN where the level is unreached
    threshold: float = DEFAULT_THRESHOLD
    domination_constant: float = DEFAULT_DOMINATION

    @property
    def n_paths(self) -> int:
        return self.T.shape[0]

    @property
    def max_levels(self) -> int:
        return self.T.shape[1] - 1

    @property
    def in_E(self) -> np.ndarray:
        return self.T < NEVER

    def level(self, j: int):
        """(T_j, E_j membership, X_{T_j}) for level ``j >= -1``."""
        return self.T[:, j + 1], self.in_E[:, j + 1], self.X_T[:, j + 1]

    def occupancy(self) -> np.ndarray:
        """Fraction of paths in E_j for j = -1 .. max_levels - 1."""
        return self.in_E.mean(axis=0)

    def residual_mass(self) -> float:
        """Mass left in the deepest level; positive means truncation."""
        return float(self.occupancy()[-1])

    def check_nesting(self) -> bool:
        E = self.in_E
        nested = not np.any(E[:, 1:] & ~E[:, :-1])
        ordered = not np.any(np.diff(self.T, axis=1) < 0)
        return nested and ordered


def build_sparse(X, Y, V: DriftMatrixProcess, z0=None, max_levels: int = DEFAULT_MAX_LEVELS,
                 threshold: float = DEFAULT_THRESHOLD,
                 domination_constant: float = DEFAULT_DOMINATION) -> SparseDecomposition:
    """Decomposition of a single path (returned with ``n_paths == 1``)."""
    Y = _as_vector(Y)
    x = np.asarray(X.values, dtype=float)
    if x[0] <= 0:
        raise ValueError("X_0 must be positive")
    if np.any(x < 0):
        raise ValueError("X must be non-negative")
    if max_levels < 1:
        raise ValueError("max_levels must be >= 1")
    z0 = Y.values[0] if z0 is None else np.atleast_1d(np.asarray(z0, dtype=float))
    Z = np.empty_like(Y.values)
    _euler_drift(V.matrices, Y.increments, z0, V.grid.dt, 0, Z)
    T = np.empty((1, max_levels + 1), dtype=np.int64)
    XT = np.empty((1, max_levels + 1))
    _sparse_levels(x, Y.increments, V.matrices, Z, V.grid.dt, threshold, max_levels,
                   T[0], XT[0], np.empty_like(Z))
    return SparseDecomposition(T, XT, threshold, domination_constant)


def eval_sparse_operator(dec: SparseDecomposition) -> np.ndarray:
    """Per-path S(X) = sum_j X_{T_j} 1_{E_j}."""
    return np.where(dec.in_E, dec.X_T, 0.0).sum(axis=1)


@dataclass(frozen=True)
class DominationCheck:
    holds: bool
    worst_ratio: float  # max over paths of Z*/S(X)
    n_violations: int


def check_domination(Z, dec: SparseDecomposition, slack: float = 0.0) -> DominationCheck:
    """Z* <= C (1 + slack) S(X) on every path.

    ``Z`` is a solved path, a single path array, or per-path maxima.
    """
    if hasattr(Z, "Z"):
        zmax = np.array([maximal(Z.Z)])
    elif isinstance(Z, VectorPath):
        zmax = np.array([maximal(Z)])
    else:
        zmax = np.atleast_1d(np.asarray(Z, dtype=float))
    S = eval_sparse_operator(dec)
    if zmax.shape != S.shape:
        raise ValueError("one Z maximum per decomposed path is required")
    ratio = zmax / S
    bad = int(np.sum(zmax > dec.domination_constant * (1.0 + slack) * S))
    return DominationCheck(bad == 0, float(ratio.max()), bad)


# -- sparsity ----------------------------------------------------------------

STOPPED_FIELDS = frozenset({"T", "X_T", "E"})


@dataclass(frozen=True)
class Selector:
    """Event A_j inside E_j, computed from data frozen at T_j only.

    ``fn`` receives keyword arrays named in ``reads`` and returns a mask.
    """
    name: str
    fn: Callable[..., np.ndarray]
    reads: tuple = ("E",)

    def __post_init__(self):
        extra = set(self.reads) - STOPPED_FIELDS
        if extra:
            raise RejectedSelectorError(
                f"selector {self.name!r} reads {sorted(extra)}, which are not "
                f"measurable at its stopping time")


def _in_E(E):
    return E


def _above_median(X_T, E):
    if not E.any():
        return E
    med = np.median(X_T[E])
    return E & (X_T > med)


DEFAULT_SELECTORS = (
    Selector("E_j", _in_E, ("E",)),
    Selector("X_T>median", _above_median, ("X_T", "E")),
)


@dataclass(frozen=True)
class SparsityRow:
    level: int
    selector: str
    n_A: int
    n_A_next: int
    ratio: float
    sigma: float
    passes: bool


def check_sparsity(dec: SparseDecomposition, selectors: Sequence[Selector] = DEFAULT_SELECTORS,
                   levels: Sequence[int] | None = None, n_sigma: float = 3.0):
    """P(A_j and E_{j+1}) <= P(A_j)/2 + n_sigma * sigma for each level.

    sigma is the binomial standard error of the conditional frequency under
    the boundary value 1/2.
    """
    if levels is None:
        levels = range(-1, dec.max_levels - 1)
    rows = []
    for sel in selectors:
        if not isinstance(sel, Selector):
            raise RejectedSelectorError("selectors must be Selector instances")
        for j in levels:
            if not -1 <= j < dec.max_levels - 1:
                raise ValueError(f"level {j} outside the decomposition")
            T, E, XT = dec.level(j)
            data = {"T": T, "E": E, "X_T": XT}
            A = np.asarray(sel.fn(**{k: data[k] for k in sel.reads}), dtype=bool) & E
            n_A = int(A.sum())
            n_next = int((A & dec.level(j + 1)[1]).sum())
            if n_A == 0:
                rows.append(SparsityRow(j, sel.name, 0, 0, 0.0, 0.0, True))
                continue
            ratio = n_next / n_A
            sigma = 0.5 / math.sqrt(n_A)
            rows.append(SparsityRow(j, sel.name, n_A, n_next, ratio, sigma,
                                    ratio <= 0.5 + n_sigma * sigma))
    return rows


# -- weighted estimate harness ----------------------------------------------

def phi_p(p: float, x):
    """x ** max(1, 1/(p-1))."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("x must be non-negative")
    out = x ** max(1.0, 1.0 / (p - 1.0))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class WeightedSample:
    weights: np.ndarray  # one positive weight per path
    p: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not self.p > 1:
            raise ValueError("p must exceed 1")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be finite and positive")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class WeightedReport:
    p: float
    z_norm: float
    x_norm: float
    characteristic: float
    phi: float
    ratio: float
    C: float
    holds: bool


def weighted_lp(values, weights, p):
    return float(np.mean(np.abs(values) ** p * weights) ** (1.0 / p))


def weighted_maximal_check(ensemble, weights: WeightedSample, Qp_estimate: float,
                           C: float) -> WeightedReport:
    """Ratio ||Z*||_{L^p(w)} / (Phi_p(Q) ||X||_{L^p(w)}) over an ensemble.

    ``ensemble`` exposes per-path ``z_max`` and ``x_final``.
    """
    p = weights.p
    zmax = np.asarray(ensemble.z_max, dtype=float)
    xfin = np.asarray(ensemble.x_final, dtype=float)
    if zmax.shape != weights.weights.shape:
        raise ValueError("one weight per path is required")
    zn = weighted_lp(zmax, weights.weights, p)
    xn = weighted_lp(xfin, weights.weights, p)
    ph = phi_p(p, Qp_estimate)
    ratio = zn / (ph * xn)
    return WeightedReport(p, zn, xn, float(Qp_estimate), ph, ratio, float(C),
                          bool(np.isfinite(ratio) and ratio <= C))


def filtration_characteristic_estimate(ensemble, w, p: float, time_subsample=None) -> float:
    """Lower estimate of the filtration A_p characteristic along visited states.

    The ensemble must carry a Markov state whose conditional expectations are
    Poisson extensions: ``ensemble.states`` has shape (n_paths, n_records,
    n_dims + 1) holding (x, y) or NaN, and ``ensemble.markov`` is true.
    ``time_subsample`` selects record columns.
    """
    from .torus import dual_weight, eval_offgrid

    if not getattr(ensemble, "markov", False) or getattr(ensemble, "states", None) is None:
        raise UnsupportedInstanceError(
            "ensemble has no Markov state with a computable conditional expectation")
    if not p > 1:
        raise ValueError("p must exceed 1")
    states = ensemble.states
    if time_subsample is not None:
        states = states[:, time_subsample]
    pts = states.reshape(-1, states.shape[-1])
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if pts.size == 0:
        raise ValueError("no visited states recorded")
    x, y = pts[:, :-1], pts[:, -1]
    qw = eval_offgrid(w, x, y)[0]
    qs = eval_offgrid(dual_weight(w, p), x, y)[0]
    return float(np.max(qw * qs ** (p - 1.0)))
