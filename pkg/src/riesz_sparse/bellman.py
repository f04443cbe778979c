"""Explicit Bellman pair (U, V) for the weak-type estimate and its experiment."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import RejectedInstanceError


@dataclass(frozen=True)
class BellmanPoint:
    x: float
    y: np.ndarray

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if not (math.isfinite(self.x) and np.all(np.isfinite(y))):
            raise ValueError("Bellman points must be finite")
        object.__setattr__(self, "y", y)


def _split(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == x.ndim:
        y = y[..., None]
    return np.abs(x), np.linalg.norm(y, axis=-1)


def bellman_V(x, y):
    """-2|x| inside |x| + |y| < 1, 1 - 2|x| on and outside the boundary.

    Vectorised: ``y`` carries a trailing component axis (a scalar ``y`` per
    ``x`` is read as d = 1).
    """
    ax, ay = _split(x, y)
    out = np.where(ax + ay < 1.0, -2.0 * ax, 1.0 - 2.0 * ax)
    return float(out) if out.ndim == 0 else out


def bellman_U(x, y):
    """|y|^2 - |x|^2 inside |x| + |y| < 1, 1 - 2|x| on and outside."""
    ax, ay = _split(x, y)
    out = np.where(ax + ay < 1.0, ay * ay - ax * ax, 1.0 - 2.0 * ax)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MajorizationReport:
    holds: bool
    worst_gap: float  # min of U - V over all tested points
    n_points: int


def uniform_box_sampler(d: int, half_width: float = 2.0):
    def sample(rng, n):
        pts = rng.uniform(-half_width, half_width, size=(n, 1 + d))
        return pts[:, 0], pts[:, 1:]
    return sample


def _boundary_sweep(d, n_angles=2001):
    """Deterministic points on, just inside and just outside |x| + |y| = 1."""
    s = np.linspace(-1.0, 1.0, n_angles)
    direction = np.zeros(d)
    direction[0] = 1.0
    xs, ys = [], []
    for scale in (1.0 - 1e-12, 1.0, 1.0 + 1e-12):
        xs.append(s * scale)
        ys.append(((1.0 - np.abs(s)) * scale)[:, None] * direction)
    return np.concatenate(xs), np.concatenate(ys)


def check_majorization(sampler, n: int, rng=None, d: int = 1,
                       chunk: int = 1 << 18) -> MajorizationReport:
    """V <= U on ``n`` sampled points plus a sweep of the kink set."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    worst = math.inf
    done = 0
    while done < n:
        m = min(chunk, n - done)
        x, y = sampler(rng, m)
        worst = min(worst, float(np.min(bellman_U(x, y) - bellman_V(x, y))))
        done += m
    d = np.asarray(y).shape[-1] if np.asarray(y).ndim > 1 else d
    bx, by = _boundary_sweep(d)
    worst = min(worst, float(np.min(bellman_U(bx, by) - bellman_V(bx, by))))
    return MajorizationReport(worst >= 0.0, worst, n + bx.size)


@dataclass(frozen=True)
class DerivativeReport:
    point: BellmanPoint
    grad_y: np.ndarray      # finite-difference d/dy_i U
    d2_xx: float
    d2_xy: np.ndarray
    d2_yy: np.ndarray
    max_error: float        # against 2 y_i, -2, 0, 2 delta_ij
    passes: bool


def check_derivatives(point: BellmanPoint, h: float = 1e-4, tol: float = 1e-6) -> DerivativeReport:
    """Central differences of U against its closed-form interior derivatives."""
    x, y = point.x, point.y
    if abs(x) + np.linalg.norm(y) >= 1.0 - 2.0 * h:
        raise ValueError("point must satisfy |x| + |y| < 1 - 2h")
    d = y.size
    e = np.eye(d)

    def U(xx, yy):
        return bellman_U(xx, yy[None, :])[0] if d > 1 else bellman_U(xx, yy)

    u0 = U(x, y)
    grad = np.array([(U(x, y + h * e[i]) - U(x, y - h * e[i])) / (2 * h) for i in range(d)])
    dxx = (U(x + h, y) - 2 * u0 + U(x - h, y)) / h ** 2
    dxy = np.array([(U(x + h, y + h * e[j]) - U(x + h, y - h * e[j])
                     - U(x - h, y + h * e[j]) + U(x - h, y - h * e[j])) / (4 * h * h)
                    for j in range(d)])
    dyy = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            if i == j:
                dyy[i, i] = (U(x, y + h * e[i]) - 2 * u0 + U(x, y - h * e[i])) / h ** 2
            else:
                dyy[i, j] = (U(x, y + h * (e[i] + e[j])) - U(x, y + h * (e[i] - e[j]))
                             - U(x, y - h * (e[i] - e[j])) + U(x, y - h * (e[i] + e[j]))) / (4 * h * h)
    err = max(np.abs(grad - 2 * y).max(), abs(dxx + 2.0), np.abs(dxy).max(),
              np.abs(dyy - 2 * e).max())
    return DerivativeReport(point, grad, float(dxx), dxy, dyy, float(err), bool(err <= tol))


# -- weak-type experiment ------------------------------------------------------

@dataclass(frozen=True)
class WeakTypeRow:
    lam: float
    empirical: float
    bound: float
    n_paths: int
    stderr: float
    passes: bool


def validate_hypotheses(result, tol: float = 1e-12):
    """Raise RejectedInstanceError naming the first violated hypothesis."""
    if np.any(result.x_min < 0):
        raise RejectedInstanceError("X non-negative", f"min X = {result.x_min.min():.3g}")
    if np.any(result.z0_norm > result.x0 + tol):
        raise RejectedInstanceError("|Z_0| <= X_0")
    scale = 1.0 + result.qv_x_total
    if np.any(result.qv_step_min < -tol * scale):
        raise RejectedInstanceError("differential subordination",
                                    f"step margin {result.qv_step_min.min():.3g}")
    if np.any(result.drift_sign_max > tol * (1.0 + result.z_sup ** 2) * (1.0 + result.v_sup)):
        raise RejectedInstanceError("non-positive drift",
                                    f"<Z, VZ> up to {result.drift_sign_max.max():.3g}")


def weak_type_table(result, lambdas, n_sigma: float = 3.0):
    """Rows comparing P((|X| + |Z|)* >= lam) with 2 E|X_T| / lam.

    The standard error is that of the paired per-path difference
    1{sup >= lam} - 2 X_T / lam, so the bound's own noise is included.
    """
    rows = []
    n = result.sup_xz.size
    xabs = np.abs(result.x_final)
    for lam in lambdas:
        if not lam > 0:
            raise ValueError("lambda must be positive")
        hit = (result.sup_xz >= lam).astype(float)
        diff = hit - 2.0 * xabs / lam
        emp = float(hit.mean())
        bound = float(2.0 * xabs.mean() / lam)
        se = float(diff.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
        rows.append(WeakTypeRow(float(lam), emp, bound, n, se,
                                emp <= bound + n_sigma * se))
    return rows


def weak_type_experiment(ensemble, lambdas, n_paths: int, seed: int = 0, threads: int = 1,
                         n_sigma: float = 3.0):
    """Run ``ensemble`` (an :class:`~riesz_sparse.ensemble.EnsembleSpec`)."""
    result = ensemble.run(n_paths, seed=seed, threads=threads)
    validate_hypotheses(result)
    return weak_type_table(result, lambdas, n_sigma)
