"""Functions on the flat torus [0, 2pi)^n and their spectral operators.

Grid values are stored with shape ``(m,) * n`` in C order.  Mode
coefficients are the FFT divided by the number of points, so
``f(x) = sum_k c_k exp(i k.x)``.  The Nyquist mode of an even grid is read as
an equal split between +m/2 and -m/2, which keeps off-grid evaluation real and
makes it agree with the grid values.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numba as nb
import numpy as np

TWO_PI = 2.0 * math.pi

# modes below this fraction of the largest coefficient are dropped from the
# off-grid tables (they are FFT round-off)
MODE_RTOL = 1e-14


@dataclass(frozen=True)
class TorusGrid:
    n_dims: int
    m: int

    def __post_init__(self):
        if self.n_dims not in (1, 2, 3):
            raise ValueError("n_dims must be 1, 2 or 3")
        if self.m < 8 or self.m & (self.m - 1):
            raise ValueError(f"m must be a power of two >= 8, got {self.m}")

    @property
    def spacing(self) -> float:
        return TWO_PI / self.m

    @property
    def shape(self) -> tuple:
        return (self.m,) * self.n_dims

    @property
    def size(self) -> int:
        return self.m ** self.n_dims

    def axes(self, offset: float = 0.0):
        """Coordinates along one axis; ``offset=0.5`` gives cell centres."""
        return (np.arange(self.m) + offset) * self.spacing

    def coords(self, offset: float = 0.0) -> np.ndarray:
        """Grid points as an array of shape ``shape + (n_dims,)``."""
        ax = self.axes(offset)
        return np.stack(np.meshgrid(*([ax] * self.n_dims), indexing="ij"), axis=-1)

    def wavenumbers(self):
        """Integer wavenumber arrays, one per axis, broadcastable to ``shape``."""
        k = np.rint(np.fft.fftfreq(self.m, 1.0 / self.m)).astype(int)
        out = []
        for j in range(self.n_dims):
            sh = [1] * self.n_dims
            sh[j] = self.m
            out.append(k.reshape(sh))
        return out

    def kmag(self) -> np.ndarray:
        return np.sqrt(sum(k.astype(float) ** 2 for k in self.wavenumbers()))

    def nyquist_mask(self) -> np.ndarray:
        """True on modes with a Nyquist index in any coordinate."""
        mask = np.zeros(self.shape, dtype=bool)
        for k in self.wavenumbers():
            mask |= np.broadcast_to(k == -self.m // 2, self.shape)
        return mask

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        """Flat index of the left-aligned cell containing each point of ``x`` (N, n)."""
        x = np.asarray(x, dtype=float).reshape(-1, self.n_dims)
        j = np.floor(np.mod(x, TWO_PI) / self.spacing).astype(np.int64)
        j = np.minimum(j, self.m - 1)
        return np.ravel_multi_index(tuple(j.T), self.shape)

    def coarsened(self, factor: int = 2) -> "TorusGrid":
        return TorusGrid(self.n_dims, self.m // factor)

    def refined(self, factor: int = 2) -> "TorusGrid":
        return TorusGrid(self.n_dims, self.m * factor)


@dataclass(frozen=True)
class ModeTable:
    """Real trigonometric form ``const + sum a cos(k.x) + b sin(k.x)``.

    One row per wavevector in a half space; arrays are contiguous so compiled
    kernels can use them directly.
    """
    K: np.ndarray     # (M, n) float wavevectors
    a: np.ndarray
    b: np.ndarray
    kmag: np.ndarray
    const: float

    @property
    def n_modes(self) -> int:
        return self.a.size

    def riesz(self, j: int) -> "ModeTable":
        """Table of the j-th Riesz component (multiplier i k_j / |k|)."""
        r = self.K[:, j] / self.kmag
        return ModeTable(self.K, r * self.b, -r * self.a, self.kmag, 0.0)


def _mode_table(coef: np.ndarray, grid: TorusGrid, drop_nyquist: bool = False) -> ModeTable:
    mx = float(np.abs(coef).max()) if coef.size else 0.0
    freqs = np.rint(np.fft.fftfreq(grid.m, 1.0 / grid.m)).astype(int)
    half = grid.m // 2
    acc: dict = {}
    if mx > 0:
        for idx in np.argwhere(np.abs(coef) > MODE_RTOL * mx):
            c = complex(coef[tuple(idx)])
            k = [int(freqs[i]) for i in idx]
            if drop_nyquist and any(abs(ki) == half for ki in k):
                continue
            variants = [(tuple(k), c)]
            for pos, ki in enumerate(k):
                if ki == -half:
                    nxt = []
                    for kv, cv in variants:
                        flipped = list(kv)
                        flipped[pos] = half
                        nxt.append((kv, cv / 2))
                        nxt.append((tuple(flipped), cv / 2))
                    variants = nxt
            for kv, cv in variants:
                acc[kv] = acc.get(kv, 0.0) + cv
    const = 0.0
    rows = []
    for k, c in sorted(acc.items()):
        if all(ki == 0 for ki in k):
            const = c.real
            continue
        first = next(ki for ki in k if ki != 0)
        if first < 0:
            continue  # partner of a half-space mode
        rows.append((k, 2.0 * c.real, -2.0 * c.imag))
    n = grid.n_dims
    K = np.array([r[0] for r in rows], dtype=float).reshape(-1, n)
    a = np.array([r[1] for r in rows], dtype=float)
    b = np.array([r[2] for r in rows], dtype=float)
    return ModeTable(np.ascontiguousarray(K), a, b, np.sqrt((K ** 2).sum(axis=1)), float(const))


@dataclass(frozen=True, eq=False)
class TorusGridFunction:
    grid: TorusGrid
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            v = v.reshape(self.grid.shape) if v.size == self.grid.size else None
            if v is None:
                raise ValueError(f"expected {self.grid.size} values on grid {self.grid}")
        if not np.all(np.isfinite(v)):
            raise ValueError("function values must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @cached_property
    def coeffs(self) -> np.ndarray:
        c = np.fft.fftn(self.values) / self.grid.size
        c.setflags(write=False)
        return c

    @cached_property
    def modes(self) -> ModeTable:
        return _mode_table(self.coeffs, self.grid)

    @cached_property
    def riesz_modes(self) -> tuple:
        base = _mode_table(self.coeffs, self.grid, drop_nyquist=True)
        return tuple(base.riesz(j) for j in range(self.grid.n_dims))

    def mean(self) -> float:
        return float(self.values.mean())

    def with_multiplier(self, mult: np.ndarray, name: str = "") -> "TorusGridFunction":
        return TorusGridFunction(self.grid, np.fft.ifftn(self.coeffs * mult).real * self.grid.size,
                                 name)

    def refined(self, factor: int) -> "TorusGridFunction":
        """Trigonometric interpolation onto a grid ``factor`` times finer."""
        fine = self.grid.refined(factor)
        return TorusGridFunction(fine, eval_offgrid(self, fine.coords().reshape(-1, fine.n_dims),
                                                    0.0)[0], self.name)

    def __add__(self, other):
        if not isinstance(other, TorusGridFunction) or other.grid != self.grid:
            return NotImplemented
        return TorusGridFunction(self.grid, self.values + other.values)

    def __mul__(self, c):
        return TorusGridFunction(self.grid, self.values * float(c))

    __rmul__ = __mul__


class WeightFunction(TorusGridFunction):
    """Strictly positive grid function."""

    def __post_init__(self):
        super().__post_init__()
        if not np.all(self.values > 0):
            raise ValueError("weights must be strictly positive")


def as_weight(f: TorusGridFunction) -> WeightFunction:
    if isinstance(f, WeightFunction):
        return f
    return WeightFunction(f.grid, f.values, f.name)


def dual_weight(w: TorusGridFunction, p: float) -> WeightFunction:
    """w^{-1/(p-1)} on the same grid."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    w = as_weight(w)
    with np.errstate(over="raise"):
        vals = w.values ** (-1.0 / (p - 1.0))
    return WeightFunction(w.grid, vals, f"dual({w.name},{p:g})")


# -- builtins ------------------------------------------------------------------

FUNCTION_BUILTINS = ("cos", "sin", "mix3", "random-band", "gaussian-bump")
WEIGHT_BUILTINS = ("unit", "cos-weight", "gaussian-bump")


def builtin_function(name: str, grid: TorusGrid, *, seed: int = 0, band: int = 4,
                     width: float = 0.5) -> TorusGridFunction:
    """Named test functions; all but ``gaussian-bump`` are mean zero."""
    x = grid.coords()
    x1 = x[..., 0]
    x2 = x[..., 1] if grid.n_dims > 1 else x1
    if name == "cos":
        v = np.cos(x1)
    elif name == "sin":
        v = np.sin(x1)
    elif name == "mix3":
        v = np.cos(x1) + 0.5 * np.sin(2 * x2) + 0.25 * np.cos(x1 + 3 * x2)
    elif name == "random-band":
        v = _random_band(grid, seed, band)
    elif name == "gaussian-bump":
        d2 = sum(((x[..., j] - math.pi) ** 2) for j in range(grid.n_dims))
        v = np.exp(-d2 / (2 * width ** 2))
    else:
        raise ValueError(f"unknown builtin function {name!r}; choose from {FUNCTION_BUILTINS}")
    return TorusGridFunction(grid, v, name)


def _random_band(grid: TorusGrid, seed: int, band: int) -> np.ndarray:
    if not 1 <= band < grid.m // 2:
        raise ValueError("band must lie in [1, m/2)")
    g = np.random.Generator(np.random.Philox(key=int(seed)))
    k = np.arange(-band, band + 1)
    kk = np.stack(np.meshgrid(*([k] * grid.n_dims), indexing="ij"), axis=-1).reshape(-1, grid.n_dims)
    kk = kk[np.any(kk != 0, axis=1)]
    a = g.standard_normal(len(kk))
    b = g.standard_normal(len(kk))
    x = grid.coords().reshape(-1, grid.n_dims)
    th = x @ kk.T
    v = (np.cos(th) * a + np.sin(th) * b).sum(axis=1) / math.sqrt(len(kk))
    return v.reshape(grid.shape)


def builtin_weight(name: str, grid: TorusGrid, a: float = 0.5, width: float = 0.5) -> WeightFunction:
    """``unit``, ``cos-weight`` (1 + a cos x1, |a| < 1) or ``gaussian-bump`` (1 + bump)."""
    if name == "unit":
        return WeightFunction(grid, np.ones(grid.shape), "1")
    if name == "cos-weight":
        if not abs(a) < 1:
            raise ValueError("cos-weight needs |a| < 1")
        return WeightFunction(grid, 1.0 + a * np.cos(grid.coords()[..., 0]), f"1+{a:g}cos")
    if name == "gaussian-bump":
        bump = builtin_function("gaussian-bump", grid, width=width).values
        return WeightFunction(grid, 1.0 + bump, "1+bump")
    raise ValueError(f"unknown builtin weight {name!r}; choose from {WEIGHT_BUILTINS}")


def read_grid_csv(path, grid: TorusGrid, weight: bool = False) -> TorusGridFunction:
    """Rows ``index,value`` with flat C-order indices covering the whole grid."""
    vals = np.full(grid.size, np.nan)
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "index":
                continue
            i = int(row[0])
            if not 0 <= i < grid.size:
                raise ValueError(f"index {i} outside the grid")
            vals[i] = float(row[1])
    if np.any(np.isnan(vals)):
        raise ValueError("CSV does not cover every grid point")
    cls = WeightFunction if weight else TorusGridFunction
    return cls(grid, vals.reshape(grid.shape), str(path))


def write_grid_csv(path, f: TorusGridFunction) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "value"])
        for i, v in enumerate(f.values.ravel()):
            w.writerow([i, f"{v:.17g}"])


# -- spectral operators ----------------------------------------------------------

def poisson_extend(f: TorusGridFunction, y: float) -> TorusGridFunction:
    """Harmonic extension at height ``y``: each mode damped by exp(-y|k|)."""
    if not y >= 0:
        raise ValueError("y must be non-negative")
    return f.with_multiplier(np.exp(-y * f.grid.kmag()), f.name)


def grad_Q(f: TorusGridFunction, y: float):
    """(spatial gradient components, vertical derivative) of the extension at ``y``."""
    if not y >= 0:
        raise ValueError("y must be non-negative")
    g = f.grid
    damp = np.exp(-y * g.kmag())
    keep = ~g.nyquist_mask()
    spatial = tuple(f.with_multiplier(1j * k * damp * keep) for k in g.wavenumbers())
    vertical = f.with_multiplier(-g.kmag() * damp)
    return spatial, vertical


def riesz_spectral(f: TorusGridFunction):
    """Components of the Riesz vector, multiplier i k_j/|k|.

    The mean mode and every mode with a Nyquist coordinate map to zero.
    """
    g = f.grid
    km = g.kmag()
    inv = np.divide(1.0, km, out=np.zeros_like(km), where=km > 0) * ~g.nyquist_mask()
    return tuple(f.with_multiplier(1j * k * inv, f"R{j + 1}({f.name})")
                 for j, k in enumerate(g.wavenumbers()))


def _table_of(f):
    return f if isinstance(f, ModeTable) else f.modes


def eval_offgrid(f, x, y):
    """Exact trigonometric evaluation of the extension at arbitrary points.

    ``f`` is a grid function or a :class:`ModeTable`; ``x`` has shape (N, n)
    (or (N,) when n = 1) and ``y`` is a scalar or shape (N,).  Returns
    ``(value, grad_x, d_y)`` with shapes (N,), (N, n) and (N,).
    """
    t = _table_of(f)
    n = t.K.shape[1] if t.K.size else (f.grid.n_dims if hasattr(f, "grid") else 1)
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0 or (x.ndim == 1 and n > 1)
    x = x.reshape(-1, n)
    y = np.broadcast_to(np.asarray(y, dtype=float), (x.shape[0],))
    if np.any(y < 0):
        raise ValueError("y must be non-negative")
    val = np.full(x.shape[0], t.const)
    grad = np.zeros_like(x)
    dy = np.zeros(x.shape[0])
    for s in range(0, x.shape[0], 4096):
        xs, ys = x[s:s + 4096], y[s:s + 4096]
        th = xs @ t.K.T
        e = np.exp(-np.outer(ys, t.kmag))
        c, sn = np.cos(th), np.sin(th)
        u = (c * t.a + sn * t.b) * e
        v = (c * t.b - sn * t.a) * e
        val[s:s + 4096] += u.sum(axis=1)
        grad[s:s + 4096] = v @ t.K
        dy[s:s + 4096] = -(u * t.kmag).sum(axis=1)
    if scalar:
        return float(val[0]), grad[0], float(dy[0])
    return val, grad, dy


def riesz_offgrid(f: TorusGridFunction, x) -> np.ndarray:
    """Riesz vector of ``f`` at arbitrary points, shape (N, n)."""
    x = np.asarray(x, dtype=float).reshape(-1, f.grid.n_dims)
    return np.stack([eval_offgrid(t, x, 0.0)[0] for t in f.riesz_modes], axis=1)


def union_tables(tables: Sequence[ModeTable], n_dims: int):
    """Shared wavevector list for several tables.

    Returns ``(K, kmag, A, B)`` with ``K`` of shape (U, n) and coefficient
    matrices of shape (n_tables, U), so compiled kernels evaluate each
    trigonometric factor once for all functions.
    """
    keys: dict = {}
    for t in tables:
        for k in map(tuple, t.K):
            keys.setdefault(k, len(keys))
    U = len(keys)
    K = np.zeros((U, n_dims))
    for k, u in keys.items():
        K[u] = k
    A = np.zeros((len(tables), U))
    B = np.zeros((len(tables), U))
    for i, t in enumerate(tables):
        for r, k in enumerate(map(tuple, t.K)):
            A[i, keys[k]] += t.a[r]
            B[i, keys[k]] += t.b[r]
    return np.ascontiguousarray(K), np.sqrt((K ** 2).sum(axis=1)), A, B


# fdlibm kernel polynomials for sin and cos on [-pi/4, pi/4]
_S1, _S2, _S3 = -1.66666666666666324348e-01, 8.33333333332248946124e-03, -1.98412698298579493134e-04
_S4, _S5, _S6 = 2.75573137070700676789e-06, -2.50507602534068634195e-08, 1.58969099521155010221e-10
_C1, _C2, _C3 = 4.16666666666666019037e-02, -1.38888888888741095749e-03, 2.48015872894767294178e-05
_C4, _C5, _C6 = -2.75573143513906633035e-07, 2.08757232129817482790e-09, -1.13596475577881948265e-11
# pi/2 split so that q * _PIO2_HI is exact for |q| < 2**20
_PIO2_HI = 1.57079632673412561417e+00
_PIO2_LO = 6.07710050650619224932e-11
_TWO_OVER_PI = 0.63661977236758134308


@nb.njit(nogil=True, cache=True, inline="always")
def _sincos(x):
    """(sin x, cos x) for |x| < 1e5, within a couple of ulps of libm."""
    q = math.floor(x * _TWO_OVER_PI + 0.5)
    r = (x - q * _PIO2_HI) - q * _PIO2_LO
    z = r * r
    s = r + r * z * (_S1 + z * (_S2 + z * (_S3 + z * (_S4 + z * (_S5 + z * _S6)))))
    c = 1.0 - 0.5 * z + z * z * (_C1 + z * (_C2 + z * (_C3 + z * (_C4 + z * (_C5 + z * _C6)))))
    n = int(q) & 3
    if n == 0:
        return s, c
    if n == 1:
        return c, -s
    if n == 2:
        return -s, -c
    return -c, s


@nb.njit(nogil=True, cache=True)
def _grad_union(K, kmag, A, B, x, y, out):
    """Spatial gradients of all tabled extensions at (x, y) into ``out`` (n_f, n)."""
    n = x.shape[0]
    nf = A.shape[0]
    for i in range(nf):
        for j in range(n):
            out[i, j] = 0.0
    for u in range(K.shape[0]):
        th = 0.0
        for j in range(n):
            th += K[u, j] * x[j]
        e = math.exp(-y * kmag[u])
        sn, cs = _sincos(th)
        c = cs * e
        s = sn * e
        for i in range(nf):
            v = B[i, u] * c - A[i, u] * s
            for j in range(n):
                out[i, j] += v * K[u, j]


# -- norms, characteristics and bounds ----------------------------------------------

def default_y_ladder(m: int, y_max: float = 4 * math.pi, per_octave: int = 1) -> np.ndarray:
    """{0} and a geometric ladder from 2pi/m past ``y_max``, ``per_octave`` points per doubling."""
    if per_octave < 1:
        raise ValueError("per_octave must be >= 1")
    base = TWO_PI / m
    top = max(0, math.ceil(math.log2(m * y_max / TWO_PI)))
    j = np.arange(top * per_octave + 1) / per_octave
    return np.concatenate([[0.0], base * 2.0 ** j])


@dataclass(frozen=True)
class FlowCharacteristic:
    value: float
    x_arg: np.ndarray   # grid point of the maximum
    y_arg: float
    m: int              # x-grid points per dimension used
    n_y: int            # ladder size

    def __float__(self):
        return self.value


def flow_characteristic(w: TorusGridFunction, p: float, y_ladder=None, refine: int = 1,
                        per_octave: int = 1) -> FlowCharacteristic:
    """max over grid x and ladder y of Q(w) * Q(w^{-1/(p-1)})^{p-1}.

    ``refine`` evaluates on a trigonometrically interpolated grid that many
    times finer; the dual weight is formed pointwise on that grid.
    """
    if not p > 1:
        raise ValueError("p must exceed 1")
    w = as_weight(w)
    if refine > 1:
        w = as_weight(w.refined(refine))
    dual = dual_weight(w, p)
    ys = default_y_ladder(w.grid.m, per_octave=per_octave) if y_ladder is None else np.asarray(y_ladder, float)
    if np.any(ys < 0):
        raise ValueError("ladder heights must be non-negative")
    best, arg, yb = -math.inf, None, 0.0
    km = w.grid.kmag()
    for y in ys:
        damp = np.exp(-y * km)
        qw = np.fft.ifftn(w.coeffs * damp).real * w.grid.size
        qd = np.fft.ifftn(dual.coeffs * damp).real * w.grid.size
        prod = qw * qd ** (p - 1.0)
        i = int(np.argmax(prod))
        if prod.flat[i] > best:
            best, yb = float(prod.flat[i]), float(y)
            arg = w.grid.coords().reshape(-1, w.grid.n_dims)[i]
    return FlowCharacteristic(best, arg, yb, w.grid.m, len(ys))


def _pointwise_abs(f) -> np.ndarray:
    if isinstance(f, TorusGridFunction):
        return np.abs(f.values)
    comps = [c.values if isinstance(c, TorusGridFunction) else np.asarray(c) for c in f]
    return np.sqrt(sum(c ** 2 for c in comps))


def lp_norm(f, w: TorusGridFunction | None = None, p: float = 2.0) -> float:
    """L^p norm for the normalized (probability) measure, optionally weighted.

    ``f`` may be a sequence of components, normed pointwise in Euclidean norm.
    """
    if not p >= 1:
        raise ValueError("p must be >= 1")
    a = _pointwise_abs(f)
    wv = 1.0 if w is None else as_weight(w).values
    return float(np.mean(a ** p * wv) ** (1.0 / p))


def riesz_constant(p: float) -> float:
    return 32.0 * p * p / (p - 1.0)


@dataclass(frozen=True)
class BoundsReport:
    p: float
    lhs: float            # ||Rf||_{L^p(w)}
    f_norm: float         # ||f||_{L^p(w)}
    constant: float
    characteristic: float
    exponent: float
    rhs: float
    ratio: float
    holds: bool


def check_bounds(f: TorusGridFunction, w: TorusGridFunction | None = None, p: float = 2.0,
                 characteristic: float | None = None) -> BoundsReport:
    """Compare ||Rf||_{L^p(w)} with 32 p^2/(p-1) Q^{max(1,1/(p-1))} ||f||_{L^p(w)}."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    Rf = riesz_spectral(f)
    lhs = lp_norm(Rf, w, p)
    fn = lp_norm(f, w, p)
    if characteristic is None:
        characteristic = 1.0 if w is None else flow_characteristic(w, p).value
    ex = max(1.0, 1.0 / (p - 1.0))
    rhs = riesz_constant(p) * characteristic ** ex * fn
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    return BoundsReport(p, lhs, fn, riesz_constant(p), float(characteristic), ex, rhs,
                        float(ratio), bool(ratio <= 1.0))
