import math
from types import SimpleNamespace

import numpy as np
import pytest

from riesz_sparse.drift import synth_V
from riesz_sparse.ensemble import EnsembleSpec, structural_invariants
from riesz_sparse.errors import RejectedSelectorError, UnsupportedInstanceError
from riesz_sparse.paths import ScalarPath, TimeGrid, VectorPath
from riesz_sparse.riesz_mc import weighted_background
from riesz_sparse.sparse import (NEVER, Selector, SparseDecomposition, WeightedSample,
                                 build_sparse, check_domination, check_sparsity,
                                 eval_sparse_operator, filtration_characteristic_estimate,
                                 hitting_time, maximal, phi_p, weighted_maximal_check)
from riesz_sparse.torus import TorusGrid, builtin_weight, flow_characteristic


def _hand_path(n=5000):
    # X rises linearly from 1 to 6 and Y = X - 1, so Z = Y when V = 0
    g = TimeGrid(1.0, n)
    s = np.linspace(0.0, 1.0, n + 1)
    return g, ScalarPath(g, 1 + 5 * s), VectorPath(g, 5 * s)


def test_maximal():
    g = TimeGrid(1.0, 3)
    assert maximal(ScalarPath(g, [-2.0, -2.0, -2.0, -2.0])) == 2.0
    P = VectorPath(g, [[0, 0], [3, 4], [1, 1], [0, -2]])
    assert maximal(P) == 5.0
    assert maximal(VectorPath(g, -3 * P.values)) == 15.0
    assert maximal(_hand_path()[2]) == 5.0


def test_hitting_time():
    g = TimeGrid(1.0, 40)
    x = np.full(41, 1.0)
    x[17:] = 4.5
    z = np.zeros((41, 2))
    z[25:, 0] = 5.0
    assert hitting_time(VectorPath(g, z), ScalarPath(g, x), 4.0) == 17
    assert hitting_time(VectorPath(g, z), ScalarPath(g, x), 4.0, from_index=20) == 20
    assert hitting_time(np.zeros((41, 2)), np.ones(41), 4.0) == NEVER
    with pytest.raises(ValueError):
        hitting_time(z, x, 0.0)


def test_hand_path_decomposition():
    n = 5000
    g, X, Y = _hand_path(n)
    dec = build_sparse(X, Y, synth_V(g, 1, "zero"), max_levels=4)
    # X first exceeds 4 one grid step after crossing it
    assert dec.T[0, 1] == 3001
    assert dec.X_T[0, 1] == pytest.approx(4.001, abs=1e-12)
    assert not dec.in_E[0, 2]
    S = eval_sparse_operator(dec)[0]
    assert S == pytest.approx(5.0, abs=5 * 5 / n)
    dom = check_domination(Y, dec)
    assert dom.holds and dom.worst_ratio == pytest.approx(1.0, abs=1e-3)


def test_single_level_when_threshold_is_never_hit():
    g = TimeGrid(1.0, 100)
    X = ScalarPath(g, 1.0 + 0.5 * np.sin(np.linspace(0, 3, 101)))
    Y = VectorPath(g, np.stack([X.values - 1.0, 0 * X.values], 1))
    dec = build_sparse(X, Y, synth_V(g, 2, "zero"))
    assert eval_sparse_operator(dec)[0] == 1.0
    assert dec.occupancy()[1] == 0.0
    dom = check_domination(Y, dec)
    assert dom.holds and dom.worst_ratio <= 4.0


def test_build_sparse_preconditions():
    g, X, Y = _hand_path(10)
    V = synth_V(g, 1, "zero")
    with pytest.raises(ValueError):
        build_sparse(ScalarPath(g, X.values - 1.0), Y, V)
    with pytest.raises(ValueError):
        build_sparse(X, Y, V, max_levels=0)


def test_nesting_detection():
    T = np.array([[0, 5, NEVER], [0, NEVER, 7]])
    XT = np.array([[1.0, 4.5, np.nan], [1.0, np.nan, 3.0]])
    assert not SparseDecomposition(T, XT).check_nesting()
    assert SparseDecomposition(T[:1], XT[:1]).check_nesting()


def test_sparsity_selectors():
    T = np.array([[0, 3, NEVER]] * 4 + [[0, NEVER, NEVER]] * 4)
    XT = np.where(T < NEVER, 4.5, np.nan)
    XT[:, 0] = 1.0
    dec = SparseDecomposition(T, XT)
    rows = check_sparsity(dec, levels=[-1, 0])
    top = [r for r in rows if r.selector == "E_j" and r.level == -1][0]
    assert (top.n_A, top.n_A_next, top.ratio) == (8, 4, 0.5)
    assert top.sigma == pytest.approx(0.5 / math.sqrt(8))
    empty = Selector("empty", lambda E: np.zeros_like(E))
    r = check_sparsity(dec, [empty], levels=[-1])[0]
    assert r.n_A == 0 and r.passes
    with pytest.raises(RejectedSelectorError):
        Selector("peeks", lambda Z_final: Z_final, ("Z_final",))
    with pytest.raises(RejectedSelectorError):
        check_sparsity(dec, [lambda E: E])


def test_phi_p():
    assert phi_p(2.0, 5.0) == 5.0
    assert phi_p(3.0, 4.0) == 4.0
    assert phi_p(1.5, 3.0) == pytest.approx(9.0, rel=1e-15)
    x = np.linspace(0, 3, 7)
    assert np.all(np.diff(phi_p(1.25, x)) > 0)
    assert phi_p(2.0 - 1e-9, 1.7) == pytest.approx(phi_p(2.0, 1.7), rel=1e-8)
    with pytest.raises(ValueError):
        phi_p(1.0, 2.0)


def test_weighted_check_homogeneity():
    rng = np.random.default_rng(0)
    ens = SimpleNamespace(z_max=rng.exponential(size=500), x_final=rng.exponential(size=500))
    w = 1.0 + rng.random(500)
    a = weighted_maximal_check(ens, WeightedSample(w, 2.0), 1.3, 10.0)
    b = weighted_maximal_check(ens, WeightedSample(2 * w, 2.0), 1.3, 10.0)
    assert a.ratio == pytest.approx(b.ratio, rel=1e-14)
    with pytest.raises(ValueError):
        WeightedSample(np.array([1.0, 0.0]), 2.0)


@pytest.fixture(scope="module")
def weighted_run():
    grid = TorusGrid(1, 64)
    g = builtin_weight("gaussian-bump", grid)
    w = builtin_weight("cos-weight", grid, a=0.5)
    return grid, w, weighted_background(g, w, 1.0, 4000, 5)


def test_filtration_estimate(weighted_run):
    grid, w, ens = weighted_run
    unit = builtin_weight("unit", grid)
    assert filtration_characteristic_estimate(ens, unit, 2.0) == pytest.approx(1.0, abs=1e-12)
    est = filtration_characteristic_estimate(ens, w, 2.0)
    dense = flow_characteristic(w, 2.0, refine=4, per_octave=8).value
    assert est <= dense * (1 + 1e-4)
    assert est == pytest.approx(dense, rel=0.01)


def test_filtration_estimate_needs_markov_state():
    with pytest.raises(UnsupportedInstanceError):
        filtration_characteristic_estimate(SimpleNamespace(markov=False), None, 2.0)


def test_weighted_prefix_is_a_smaller_run(weighted_run):
    grid, w, ens = weighted_run
    g = builtin_weight("gaussian-bump", grid)
    small = weighted_background(g, w, 1.0, 1000, 5)
    pre = ens.prefix(1000)
    np.testing.assert_array_equal(small.z_max, pre.z_max)
    np.testing.assert_array_equal(small.x_final, pre.x_final)


# -- compiled ensembles --------------------------------------------------------------

ENSEMBLES = [
    dict(d=1, transform="constant-unit", v_kind="zero"),
    dict(d=1, transform="rotating", v_kind="scaled-identity"),
    dict(d=3, transform="random-ball", v_kind="random-gram"),
    dict(d=2, transform="rotating", v_kind="random-gram", v_scale=3.0),
]


@pytest.mark.parametrize("kw", ENSEMBLES, ids=lambda k: f"d{k['d']}-{k['transform']}-{k['v_kind']}")
def test_small_ensembles(kw):
    spec = EnsembleSpec(TimeGrid(16.0, 2000), **kw)
    res = spec.run(3000, seed=1)
    for row in structural_invariants(res):
        assert row.holds, row
    dec = res.decomposition
    assert np.all(dec.T[:, 0] == 0) and np.all(dec.X_T[:, 0] == 1.0)
    assert check_domination(res.z_max, dec, slack=0.05).holds
    S = eval_sparse_operator(dec)
    assert np.all(S >= 1.0)
    assert dec.residual_mass() == 0.0
    for r in check_sparsity(dec, levels=[-1, 0]):
        assert r.passes, r


def test_ensemble_matches_single_path_decomposition():
    # the compiled kernel and the array-level construction agree path by path
    from riesz_sparse.paths import synth_martingale_pair
    from riesz_sparse.rng import derive_seed

    spec = EnsembleSpec(TimeGrid(16.0, 2000), d=1, transform="constant-unit", v_kind="zero")
    res = spec.run(1, seed=4)
    key = derive_seed(4, "ensemble", spec.label)
    # path 0 of chunk 0 uses stream 0 of the ensemble key
    pair = synth_martingale_pair(spec.grid, 1, 1.0, key)
    dec = build_sparse(pair.X, pair.Y, synth_V(spec.grid, 1, "zero"), max_levels=spec.max_levels)
    np.testing.assert_array_equal(dec.T, res.T)
    np.testing.assert_allclose(res.x_final, pair.X.values[-1], rtol=0, atol=0)


def test_ensemble_determinism_and_prefix():
    spec = EnsembleSpec(TimeGrid(4.0, 500), d=3, transform="random-ball", v_kind="random-gram")
    a = spec.run(600, seed=2, threads=1)
    b = spec.run(600, seed=2, threads=3)
    c = spec.run(300, seed=2)
    for f in ("z_max", "x_final", "sup_xz", "T", "X_T"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
        np.testing.assert_array_equal(getattr(a, f)[:300], getattr(c, f))


def test_threshold_and_truncation():
    grid = TimeGrid(16.0, 2000)
    low = EnsembleSpec(grid, threshold=2.0).run(2000, seed=3)
    assert low.decomposition.check_nesting()
    assert low.decomposition.occupancy()[2] > 0
    cut = EnsembleSpec(grid, threshold=1.5, max_levels=1).run(2000, seed=3)
    assert cut.decomposition.residual_mass() > 1e-6


def test_spec_validation():
    g = TimeGrid(1.0, 10)
    for bad in (dict(d=0), dict(x0=0.0), dict(transform="x"), dict(v_kind="x"),
                dict(v_kind="scaled-identity", c=1.0), dict(threshold=0.0), dict(max_levels=0)):
        with pytest.raises(ValueError):
            EnsembleSpec(g, **bad)
