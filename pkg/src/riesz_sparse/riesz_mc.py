"""Background radiation process on the flat torus and the Monte Carlo Riesz vector.

The process is (B^M, B): a speed-2 Brownian motion on the torus started
uniformly, and an independent speed-2 Brownian height started at ``y0`` and
stopped at 0.  The estimator averages the functional
``sum grad_x Qf(B^M, B) dB`` over paths whose endpoint falls in a cell and
multiplies by -2.

Long excursions of the height are the cost driver (the hitting time has a
heavy tail).  Above ``skip_height + 0.5`` a path jumps straight back to
``skip_height``: the elapsed time is drawn exactly from the Levy law of the
hitting time and the horizontal motion receives the matching Gaussian
displacement.  The functional's increments during such an excursion are
dropped; with the gradient damped by exp(-|k| y) this is a relative error of
order (1 + 2h) exp(-2h) in the estimator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numba as nb
import numpy as np

from .errors import CensoringError
from .paths import DEFAULT_SPEED, ScalarPath, TimeGrid, VectorPath
from .rng import derive_seed, run_chunked, stream
from .torus import (TWO_PI, TorusGrid, TorusGridFunction, _grad_union, eval_offgrid,
                    riesz_offgrid, union_tables)

DEFAULT_SKIP_HEIGHT = 4.0
DEFAULT_T_MAX = 1e8
DEFAULT_MAX_STEPS = 50_000_000
DEFAULT_CENSOR_BOUND = 1e-3
DEFAULT_LADDER = (1.0, 2.0, 4.0)
# step counts at which the Markov state is recorded for the filtration estimate
DEFAULT_RECORDS = (0, 1, 10, 100, 1000, 10000)

ALIVE, ABSORBED, CENSORED = 0, 1, 2


def default_dt(y0: float) -> float:
    return 1e-3 * min(1.0, y0 * y0)


# -- single paths ----------------------------------------------------------------

@dataclass(frozen=True)
class BackgroundRadiationPath:
    BM: VectorPath         # unwrapped horizontal positions; reduce mod 2pi for the torus
    B: ScalarPath
    tau_index: int         # first grid index at which B has reached 0 (-1 if censored)
    tau_fraction: float    # fraction of the last step spent above 0
    y0: float

    @property
    def censored(self) -> bool:
        return self.tau_index < 0

    @property
    def endpoint(self) -> np.ndarray:
        if self.censored:
            raise CensoringError(1.0, 0.0)
        return np.mod(self.BM.values[self.tau_index], TWO_PI)


@nb.njit(nogil=True, cache=True)
def _single_path(g, n_steps, dt, speed, y0, n_dims, BM, B):
    """Fill BM (n+1, n) and B (n+1) until absorption; returns (tau_index, fraction)."""
    sq = math.sqrt(speed * dt)
    for j in range(n_dims):
        BM[0, j] = TWO_PI * g.random()
    B[0] = y0
    for k in range(n_steps):
        db = sq * g.standard_normal()
        yn = B[k] + db
        if yn <= 0.0:
            th = B[k] / (B[k] - yn)
            for j in range(n_dims):
                BM[k + 1, j] = BM[k, j] + th * sq * g.standard_normal()
            B[k + 1] = 0.0
            for r in range(k + 2, n_steps + 1):
                B[r] = 0.0
                for j in range(n_dims):
                    BM[r, j] = BM[k + 1, j]
            return k + 1, th
        for j in range(n_dims):
            BM[k + 1, j] = BM[k, j] + sq * g.standard_normal()
        B[k + 1] = yn
    return -1, 0.0


def simulate_background(grid: TimeGrid, y0: float, seed: int, n_dims: int = 1,
                        speed: float = DEFAULT_SPEED, path_index: int = 0) -> BackgroundRadiationPath:
    """One path on ``grid`` without excursion skipping.

    The horizontal position after absorption is frozen; the last step of the
    height is linearly interpolated to 0 and the horizontal step is scaled by
    the same fraction.
    """
    if not y0 > 0:
        raise ValueError("y0 must be positive")
    n = grid.n_steps
    BM = np.empty((n + 1, n_dims))
    B = np.empty(n + 1)
    tau, frac = _single_path(stream(seed, path_index), n, grid.dt, speed, float(y0), n_dims, BM, B)
    if tau < 0:
        return BackgroundRadiationPath(VectorPath(grid, BM), ScalarPath(grid, B), -1, 0.0, y0)
    return BackgroundRadiationPath(VectorPath(grid, BM), ScalarPath(grid, B), int(tau),
                                   float(frac), float(y0))


def li_functional(path: BackgroundRadiationPath, f: TorusGridFunction) -> np.ndarray:
    """sum_{k < tau} grad_x Qf(B^M_k, B_k) (B_{k+1} - B_k); the last increment ends at 0."""
    if path.censored:
        raise CensoringError(1.0, 0.0)
    t = path.tau_index
    x = path.BM.values[:t]
    y = path.B.values[:t]
    grad = eval_offgrid(f, x, y)[1]
    dB = np.diff(path.B.values[:t + 1])
    return (grad * dB[:, None]).sum(axis=0)


def subordinate_pair(path: BackgroundRadiationPath, f: TorusGridFunction):
    """(X, Y) with X_k = Qf(Z_k) - Qf(Z_0) and Y the running functional."""
    if path.censored:
        raise CensoringError(1.0, 0.0)
    val, grad, _ = eval_offgrid(f, path.BM.values, path.B.values)
    X = val - val[0]
    dB = np.diff(path.B.values)
    Y = np.zeros_like(path.BM.values)
    np.cumsum(grad[:-1] * dB[:, None], axis=0, out=Y[1:])
    return ScalarPath(path.BM.grid, X), VectorPath(path.BM.grid, Y)


def predictable_brackets(path: BackgroundRadiationPath, f: TorusGridFunction):
    """Compensators of <X> and <Y>: 2 dt (|grad_x|^2 + (d_y)^2) and 2 dt |grad_x|^2."""
    if path.censored:
        raise CensoringError(1.0, 0.0)
    g = path.BM.grid
    _, grad, dy = eval_offgrid(f, path.BM.values[:-1], path.B.values[:-1])
    alive = np.arange(g.n_steps) < path.tau_index
    w = 2.0 * g.dt * alive
    w[path.tau_index - 1] *= path.tau_fraction
    gx = (grad ** 2).sum(axis=1) * w
    gy = dy ** 2 * w
    qx = np.concatenate([[0.0], np.cumsum(gx + gy)])
    qy = np.concatenate([[0.0], np.cumsum(gx)])
    return ScalarPath(g, qx), ScalarPath(g, qy)


# -- ensembles --------------------------------------------------------------------

@nb.njit(nogil=True, cache=True)
def _bg_chunk(g, n_paths, n_dims, dt, speed, y0, h_skip, t_max, max_steps, bridge, track_sup,
              K, KM, A, Bc, records,
              end, F, zmax, status, steps, ttime, states):
    n_f = A.shape[0]
    sq = math.sqrt(speed * dt)
    h_trig = h_skip + 0.5
    x = np.empty(n_dims)
    dx = np.empty(n_dims)
    gr = np.empty((n_f, n_dims))
    acc = np.empty((n_f, n_dims))
    n_rec = records.shape[0]
    for p in range(n_paths):
        for j in range(n_dims):
            x[j] = TWO_PI * g.random()
        y = y0
        t = 0.0
        k = 0
        r = 0
        zm = 0.0
        acc[:, :] = 0.0
        st = ALIVE
        while True:
            while r < n_rec and records[r] == k:
                for j in range(n_dims):
                    states[p, r, j] = x[j] % TWO_PI
                states[p, r, n_dims] = y
                r += 1
            if k >= max_steps or t >= t_max:
                st = CENSORED
                break
            _grad_union(K, KM, A, Bc, x, y, gr)
            db = sq * g.standard_normal()
            for j in range(n_dims):
                dx[j] = sq * g.standard_normal()
            k += 1
            t += dt
            yn = y + db
            crossed = yn <= 0.0
            if not crossed and bridge:
                crossed = g.random() < math.exp(-2.0 * y * yn / (speed * dt))
            if crossed:
                th = y / (y - yn) if yn < 0.0 else 0.5
                for i in range(n_f):
                    for j in range(n_dims):
                        acc[i, j] -= gr[i, j] * y
                for j in range(n_dims):
                    x[j] += th * dx[j]
                st = ABSORBED
                break
            for i in range(n_f):
                for j in range(n_dims):
                    acc[i, j] += gr[i, j] * db
            if track_sup:
                s2 = 0.0
                for j in range(n_dims):
                    s2 += acc[0, j] * acc[0, j]
                if s2 > zm:
                    zm = s2
            for j in range(n_dims):
                xj = x[j] + dx[j]
                if xj >= TWO_PI:
                    xj -= TWO_PI
                elif xj < 0.0:
                    xj += TWO_PI
                x[j] = xj
            y = yn
            if y >= h_trig:
                a = (y - h_skip) / math.sqrt(speed)
                z = g.standard_normal()
                s_exc = a * a / (z * z)
                sd = math.sqrt(speed * s_exc)
                for j in range(n_dims):
                    x[j] = (x[j] + sd * g.standard_normal()) % TWO_PI
                t += s_exc
                y = h_skip
        for rr in range(r, n_rec):
            for j in range(n_dims + 1):
                states[p, rr, j] = np.nan
        for i in range(n_f):
            for j in range(n_dims):
                F[p, i, j] = acc[i, j]
        for j in range(n_dims):
            end[p, j] = x[j] % TWO_PI
        zmax[p] = math.sqrt(zm)
        status[p] = st
        steps[p] = k
        ttime[p] = t


@dataclass(frozen=True)
class BackgroundEnsemble:
    n_dims: int
    y0: float
    dt: float
    endpoints: np.ndarray    # (N, n) in [0, 2pi)
    functionals: np.ndarray  # (N, n_functions, n)
    z_max: np.ndarray        # sup_t |Y_t| for the first function
    status: np.ndarray       # ABSORBED or CENSORED
    steps: np.ndarray
    elapsed: np.ndarray      # simulated time including skipped excursions
    states: np.ndarray       # (N, n_records, n + 1) recorded (x, y), NaN when dead
    records: tuple
    markov = True

    @property
    def n_paths(self) -> int:
        return self.status.size

    @property
    def absorbed(self) -> np.ndarray:
        return self.status == ABSORBED

    @property
    def censored_fraction(self) -> float:
        return float(np.mean(self.status == CENSORED))


def simulate_ensemble(functions: Sequence[TorusGridFunction], n_dims: int, y0: float,
                      n_paths: int, seed: int, *, dt: float | None = None,
                      speed: float = DEFAULT_SPEED, skip_height: float = DEFAULT_SKIP_HEIGHT,
                      t_max: float = DEFAULT_T_MAX, max_steps: int = DEFAULT_MAX_STEPS,
                      bridge: bool = False, records: Sequence[int] = DEFAULT_RECORDS,
                      track_sup: bool = True, threads: int = 1,
                      label: str = "background") -> BackgroundEnsemble:
    """Simulate ``n_paths`` paths and the functional of each of ``functions``.

    All functions share the same paths.  ``skip_height`` below ``y0`` is
    raised to ``y0`` so that no path starts inside a skipped excursion;
    ``skip_height=inf`` disables skipping.  ``bridge`` adds the Brownian-bridge
    crossing test within each step.
    """
    if not y0 > 0:
        raise ValueError("y0 must be positive")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    for f in functions:
        if f.grid.n_dims != n_dims:
            raise ValueError("function dimension does not match n_dims")
    dt = default_dt(y0) if dt is None else float(dt)
    if not dt > 0:
        raise ValueError("dt must be positive")
    h = max(float(skip_height), float(y0))
    K, KM, A, Bc = union_tables([f.modes for f in functions], n_dims)
    recs = np.array(sorted(set(int(r) for r in records)), dtype=np.int64)
    nf = len(functions)
    end = np.empty((n_paths, n_dims))
    F = np.empty((n_paths, nf, n_dims))
    zmax = np.empty(n_paths)
    status = np.empty(n_paths, dtype=np.int8)
    steps = np.empty(n_paths, dtype=np.int64)
    ttime = np.empty(n_paths)
    states = np.empty((n_paths, recs.size, n_dims + 1))
    key = derive_seed(seed, label, n_dims, repr(float(y0)))

    def work(ci, a, b):
        _bg_chunk(stream(key, ci), b - a, n_dims, dt, speed, float(y0), h, float(t_max),
                  int(max_steps), bool(bridge), bool(track_sup) and nf > 0, K, KM, A, Bc, recs,
                  end[a:b], F[a:b], zmax[a:b], status[a:b], steps[a:b], ttime[a:b], states[a:b])

    run_chunked(work, n_paths, threads)
    return BackgroundEnsemble(n_dims, float(y0), dt, end, F, zmax, status, steps, ttime,
                              states, tuple(int(r) for r in recs))


# -- conditional averages and the estimator ----------------------------------------------

@dataclass(frozen=True)
class MCEstimate:
    cells: TorusGrid
    sums: np.ndarray    # (n_cells, n)
    sumsq: np.ndarray   # (n_cells, n)
    counts: np.ndarray  # (n_cells,)

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    @property
    def mean(self) -> np.ndarray:
        """Per-cell means; NaN in empty cells."""
        c = self.counts[:, None].astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(c > 0, self.sums / c, np.nan)

    @property
    def stderr(self) -> np.ndarray:
        c = self.counts[:, None].astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            var = (self.sumsq - self.sums ** 2 / c) / (c - 1.0)
            return np.where(c > 1, np.sqrt(np.maximum(var, 0.0) / c), np.nan)

    def coarsen(self, factor: int = 2) -> "MCEstimate":
        """Merge ``factor``^n neighbouring cells; parents hold the pooled sums."""
        g = self.cells
        coarse = g.coarsened(factor)
        shape = []
        for _ in range(g.n_dims):
            shape += [coarse.m, factor]
        axes = tuple(range(1, 2 * g.n_dims, 2))

        def pool(a):
            tail = a.shape[1:]
            return a.reshape(tuple(shape) + tail).sum(axis=axes).reshape((coarse.size,) + tail)

        return MCEstimate(coarse, pool(self.sums), pool(self.sumsq), pool(self.counts))


def conditional_average(endpoints, values, cells: TorusGrid) -> MCEstimate:
    """Per-cell sample statistics of ``values`` (N, n) binned by endpoint cell."""
    endpoints = np.asarray(endpoints, dtype=float).reshape(-1, cells.n_dims)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != endpoints.shape[0]:
        raise ValueError("one value per endpoint is required")
    idx = cells.cell_index(endpoints)
    n = cells.size
    counts = np.bincount(idx, minlength=n)
    sums = np.stack([np.bincount(idx, values[:, j], minlength=n) for j in range(values.shape[1])], 1)
    sq = np.stack([np.bincount(idx, values[:, j] ** 2, minlength=n) for j in range(values.shape[1])], 1)
    return MCEstimate(cells, sums, sq, counts)


def relative_l2_error(estimate: np.ndarray, oracle: np.ndarray) -> float:
    """||estimate - oracle|| / ||oracle|| over cells where the estimate is defined."""
    ok = np.all(np.isfinite(estimate), axis=1)
    num = np.sum((estimate[ok] - oracle[ok]) ** 2)
    den = np.sum(oracle[ok] ** 2)
    return float(math.sqrt(num / den)) if den > 0 else math.inf


@dataclass(frozen=True)
class Stabilization:
    """Ladder gate: RMS change between the top two rungs against their noise."""
    diff_rms: tuple        # RMS over cells of consecutive rung differences
    noise_rms: tuple       # RMS of the combined standard errors for the same pairs
    factor: float
    passes: bool


@dataclass(frozen=True)
class RieszResult:
    function: str
    cells: TorusGrid
    ladder: tuple
    estimates: tuple             # MCEstimate per rung (raw functional averages)
    oracle: np.ndarray           # Rf at cell centres, (n_cells, n)
    rel_errors: tuple            # per rung
    censored: tuple              # censored fraction per rung
    stabilization: Stabilization
    dt: tuple
    censor_bound: float
    error_tolerance: float = 0.1

    @property
    def estimate(self) -> np.ndarray:
        """-2 times the top rung's cell means."""
        return -2.0 * self.estimates[-1].mean

    @property
    def stderr(self) -> np.ndarray:
        return 2.0 * self.estimates[-1].stderr

    @property
    def rel_l2_error(self) -> float:
        return self.rel_errors[-1]

    @property
    def censor_ok(self) -> bool:
        return max(self.censored) <= self.censor_bound

    @property
    def passes(self) -> bool:
        return self.rel_l2_error <= self.error_tolerance and self.stabilization.passes


def _stabilization(ests: Sequence[MCEstimate], factor: float) -> Stabilization:
    diffs, noises = [], []
    for e1, e2 in zip(ests[:-1], ests[1:]):
        m1, m2 = -2.0 * e1.mean, -2.0 * e2.mean
        s1, s2 = 2.0 * e1.stderr, 2.0 * e2.stderr
        ok = np.all(np.isfinite(m1) & np.isfinite(m2) & np.isfinite(s1) & np.isfinite(s2), axis=1)
        if not ok.any():
            diffs.append(math.inf)
            noises.append(0.0)
            continue
        diffs.append(float(np.sqrt(np.mean(np.sum((m2[ok] - m1[ok]) ** 2, axis=1)))))
        noises.append(float(np.sqrt(np.mean(np.sum(s1[ok] ** 2 + s2[ok] ** 2, axis=1)))))
    if not diffs:
        return Stabilization((), (), factor, False)
    return Stabilization(tuple(diffs), tuple(noises), factor,
                         bool(diffs[-1] <= factor * noises[-1]))


def mc_riesz_many(functions: Sequence[TorusGridFunction], cells: TorusGrid, n_paths: int,
                  seed: int, ladder: Sequence[float] = DEFAULT_LADDER, *,
                  dt: float | None = None, threads: int = 1,
                  censor_bound: float = DEFAULT_CENSOR_BOUND, gate_factor: float = 2.0,
                  error_tolerance: float = 0.1, strict_censoring: bool = True,
                  **sim_kwargs) -> list:
    """Estimate the Riesz vector of every function in ``functions`` from shared paths.

    One ensemble is simulated per ladder height.  With ``strict_censoring`` a
    censored fraction above ``censor_bound`` raises :class:`CensoringError`.
    """
    if not functions:
        raise ValueError("at least one function is required")
    ladder = tuple(float(y) for y in ladder)
    if not ladder or any(not y > 0 for y in ladder):
        raise ValueError("ladder heights must be positive")
    n_dims = functions[0].grid.n_dims
    if cells.n_dims != n_dims:
        raise ValueError("cells and functions differ in dimension")
    per_rung = []
    for y0 in ladder:
        ens = simulate_ensemble(functions, n_dims, y0, n_paths, seed, dt=dt, threads=threads,
                                records=(), track_sup=False, **sim_kwargs)
        if strict_censoring and ens.censored_fraction > censor_bound:
            raise CensoringError(ens.censored_fraction, censor_bound)
        ok = ens.absorbed
        ests = [conditional_average(ens.endpoints[ok], ens.functionals[ok, i], cells)
                for i in range(len(functions))]
        per_rung.append((ens.censored_fraction, ens.dt, ests))
    centres = cells.coords(0.5).reshape(-1, n_dims)
    out = []
    for i, f in enumerate(functions):
        oracle = riesz_offgrid(f, centres)
        ests = tuple(r[2][i] for r in per_rung)
        errs = tuple(relative_l2_error(-2.0 * e.mean, oracle) for e in ests)
        out.append(RieszResult(f.name, cells, ladder, ests, oracle, errs,
                               tuple(r[0] for r in per_rung), _stabilization(ests, gate_factor),
                               tuple(r[1] for r in per_rung), censor_bound, error_tolerance))
    return out


def mc_riesz(f: TorusGridFunction, cells: TorusGrid, n_paths: int, seed: int,
             ladder: Sequence[float] = DEFAULT_LADDER, **kwargs) -> RieszResult:
    return mc_riesz_many([f], cells, n_paths, seed, ladder, **kwargs)[0]


# -- weighted harness on the background process ------------------------------------------

@dataclass(frozen=True)
class WeightedEnsemble:
    """X = Qg(Z_t) for a positive g, Z = Y its subordinate functional, w at the endpoint."""
    z_max: np.ndarray
    x_final: np.ndarray
    weights: np.ndarray
    states: np.ndarray
    index: np.ndarray   # position of each absorbed path in the simulated run
    markov = True

    def prefix(self, n: int) -> "WeightedEnsemble":
        """The absorbed paths among the first ``n`` simulated ones.

        Chunk streams make this exactly the ensemble a run of ``n`` paths gives.
        """
        k = int(np.searchsorted(self.index, n))
        return WeightedEnsemble(self.z_max[:k], self.x_final[:k], self.weights[:k],
                                self.states[:k], self.index[:k])


def weighted_background(g: TorusGridFunction, w: TorusGridFunction, y0: float, n_paths: int,
                        seed: int, **kwargs) -> WeightedEnsemble:
    if np.any(g.values <= 0):
        raise ValueError("g must be positive")
    ens = simulate_ensemble([g], g.grid.n_dims, y0, n_paths, seed, label="weighted", **kwargs)
    ok = ens.absorbed
    end = ens.endpoints[ok]
    xf = eval_offgrid(g, end, 0.0)[0]
    wt = eval_offgrid(w, end, 0.0)[0]
    return WeightedEnsemble(ens.z_max[ok], xf, wt, ens.states[ok], np.flatnonzero(ok))
