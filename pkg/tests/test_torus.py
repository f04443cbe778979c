import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riesz_sparse.torus import (ModeTable, TorusGrid, TorusGridFunction, WeightFunction, _sincos,
                                builtin_function, builtin_weight, check_bounds,
                                default_y_ladder, dual_weight, eval_offgrid, flow_characteristic,
                                grad_Q, lp_norm, poisson_extend, read_grid_csv, riesz_constant,
                                riesz_offgrid, riesz_spectral, union_tables, write_grid_csv)

G1 = TorusGrid(1, 64)
G2 = TorusGrid(2, 32)


def fn(grid, values):
    return TorusGridFunction(grid, values)


def test_grid_validation_and_geometry():
    for bad in ((0, 8), (4, 8), (1, 12), (1, 4)):
        with pytest.raises(ValueError):
            TorusGrid(*bad)
    g = TorusGrid(2, 8)
    assert g.size == 64 and g.shape == (8, 8)
    assert g.cell_index(np.array([[0.0, 0.0], [2 * math.pi - 1e-12, 0.1]])).tolist() == [0, 56]
    assert g.cell_index(np.array([[-0.1, 2 * math.pi + 0.1]])).tolist() == [56]
    assert g.nyquist_mask().sum() == 15


def test_round_trip_and_conjugate_symmetry():
    f = builtin_function("random-band", G2, seed=3)
    c = f.coeffs
    back = np.fft.ifftn(c * G2.size).real
    np.testing.assert_allclose(back, f.values, atol=1e-10)
    flipped = np.conj(np.roll(np.flip(c), 1, axis=(0, 1)))
    np.testing.assert_allclose(c, flipped, atol=1e-14)


def test_values_are_immutable():
    f = builtin_function("cos", G1)
    with pytest.raises(ValueError):
        f.values[0] = 2.0
    with pytest.raises(ValueError):
        TorusGridFunction(G1, np.ones(10))
    with pytest.raises(ValueError):
        WeightFunction(G1, np.cos(G1.axes()))


def test_poisson_extension():
    x = G1.axes()
    f = fn(G1, np.cos(3 * x))
    np.testing.assert_allclose(poisson_extend(f, 0.0).values, f.values, atol=1e-14)
    np.testing.assert_allclose(poisson_extend(f, 0.5).values, 0.22313016014842982 * np.cos(3 * x),
                               atol=1e-14)
    c = fn(G1, np.full(64, 2.5))
    np.testing.assert_allclose(poisson_extend(c, 7.0).values, 2.5, atol=1e-14)
    with pytest.raises(ValueError):
        poisson_extend(f, -1.0)


def test_semigroup_and_contraction():
    f = builtin_function("mix3", G2)
    a = poisson_extend(poisson_extend(f, 0.3), 0.45).values
    np.testing.assert_allclose(a, poisson_extend(f, 0.75).values, atol=1e-10)
    sup = np.abs(f.values).max()
    for y in (0.1, 1.0, 5.0):
        assert np.abs(poisson_extend(f, y).values).max() <= sup
    assert np.abs(poisson_extend(f, 40.0).values - f.mean()).max() < 1e-15


def test_gradients():
    x = G1.axes()
    (dx,), dy = grad_Q(fn(G1, np.cos(x)), 0.0)
    np.testing.assert_allclose(dx.values, -np.sin(x), atol=1e-13)
    np.testing.assert_allclose(dy.values, -np.cos(x), atol=1e-13)
    spatial, vertical = grad_Q(fn(G2, np.full(G2.shape, 3.0)), 0.2)
    for h in (*spatial, vertical):
        np.testing.assert_allclose(h.values, 0.0, atol=1e-14)


def test_harmonicity():
    f = builtin_function("random-band", G2, seed=1)
    y = 0.4
    mult_yy = f.grid.kmag() ** 2 * np.exp(-y * f.grid.kmag())
    mult_xx = -sum(k.astype(float) ** 2 for k in f.grid.wavenumbers()) * np.exp(-y * f.grid.kmag())
    np.testing.assert_allclose((f.with_multiplier(mult_yy) + f.with_multiplier(mult_xx)).values,
                               0.0, atol=1e-12)


def test_riesz_single_modes():
    x = G1.axes()
    (r,) = riesz_spectral(fn(G1, np.cos(x)))
    np.testing.assert_allclose(r.values, -np.sin(x), atol=1e-13)
    (r,) = riesz_spectral(fn(G1, np.sin(x)))
    np.testing.assert_allclose(r.values, np.cos(x), atol=1e-13)
    r1, r2 = riesz_spectral(fn(G2, np.cos(G2.coords()[..., 0])))
    np.testing.assert_allclose(r1.values, -np.sin(G2.coords()[..., 0]), atol=1e-13)
    np.testing.assert_allclose(r2.values, 0.0, atol=1e-13)
    (r,) = riesz_spectral(fn(G1, np.full(64, 4.0)))
    np.testing.assert_allclose(r.values, 0.0, atol=1e-14)


@pytest.mark.parametrize("grid", [G1, G2, TorusGrid(3, 8)])
def test_riesz_is_an_isometry(grid):
    f = builtin_function("random-band", grid, seed=2, band=3)
    assert abs(f.mean()) < 1e-12
    assert lp_norm(riesz_spectral(f), p=2) == pytest.approx(lp_norm(f, p=2), rel=1e-10)


def test_nyquist_modes_are_dropped():
    x = G1.axes()
    nyq = fn(G1, np.cos(32 * x))
    (r,) = riesz_spectral(nyq)
    np.testing.assert_allclose(r.values, 0.0, atol=1e-13)
    np.testing.assert_allclose(riesz_offgrid(nyq, np.array([0.3, 1.1])), 0.0, atol=1e-13)
    # the +-32 halves recombine into one real row off the grid
    t = nyq.modes
    assert t.n_modes == 1 and t.K[0, 0] == 32 and t.a[0] == pytest.approx(1.0)
    np.testing.assert_allclose(eval_offgrid(nyq, x, 0.0)[0], nyq.values, atol=1e-12)


def test_offgrid_evaluation():
    f = builtin_function("cos", G1)
    v, g, d = eval_offgrid(f, math.pi / 3, 0.0)
    assert v == pytest.approx(0.5, abs=1e-15)
    assert eval_offgrid(f, math.pi / 2, 0.0)[1][0] == pytest.approx(-1.0, abs=1e-15)
    h = builtin_function("mix3", G2)
    pts = G2.coords().reshape(-1, 2)
    np.testing.assert_allclose(eval_offgrid(h, pts, 0.0)[0], h.values.ravel(), atol=1e-10)
    # values, gradients and heights agree with the spectral operators on the grid
    (gx1, gx2), gy = grad_Q(h, 0.7)
    val, grad, dy = eval_offgrid(h, pts, 0.7)
    np.testing.assert_allclose(val, poisson_extend(h, 0.7).values.ravel(), atol=1e-12)
    np.testing.assert_allclose(grad[:, 0], gx1.values.ravel(), atol=1e-12)
    np.testing.assert_allclose(grad[:, 1], gx2.values.ravel(), atol=1e-12)
    np.testing.assert_allclose(dy, gy.values.ravel(), atol=1e-12)
    with pytest.raises(ValueError):
        eval_offgrid(f, 0.0, -0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi), st.floats(0, 3))
def test_offgrid_matches_closed_form(x1, x2, y):
    h = builtin_function("mix3", G2)
    v, g, d = eval_offgrid(h, np.array([x1, x2]), y)
    e1, e2, e3 = math.exp(-y), math.exp(-2 * y), math.exp(-y * math.sqrt(10))
    exact = e1 * math.cos(x1) + 0.5 * e2 * math.sin(2 * x2) + 0.25 * e3 * math.cos(x1 + 3 * x2)
    assert v == pytest.approx(exact, abs=1e-12)
    gx1 = -e1 * math.sin(x1) - 0.25 * e3 * math.sin(x1 + 3 * x2)
    gx2 = e2 * math.cos(2 * x2) - 0.75 * e3 * math.sin(x1 + 3 * x2)
    np.testing.assert_allclose(g, [gx1, gx2], atol=1e-12)


def test_union_tables_cover_all_functions():
    fs = [builtin_function(n, G2) for n in ("cos", "mix3")]
    K, km, A, B = union_tables([f.modes for f in fs], 2)
    pts = np.array([[0.3, 1.7], [4.0, 2.2]])
    for i, f in enumerate(fs):
        t = ModeTable(K, A[i], B[i], km, 0.0)
        np.testing.assert_allclose(eval_offgrid(t, pts, 0.2)[1], eval_offgrid(f, pts, 0.2)[1],
                                   atol=1e-13)


def test_compiled_sincos():
    x = np.concatenate([np.linspace(-50, 50, 30001), [0.0, 1e-300, math.pi / 4, 1e5, -7e4]])
    out = np.array([_sincos(v) for v in x])
    np.testing.assert_allclose(out[:, 0], np.sin(x), rtol=0, atol=1e-15)
    np.testing.assert_allclose(out[:, 1], np.cos(x), rtol=0, atol=1e-15)


def test_lp_norms():
    x = G1.axes()
    assert lp_norm(fn(G1, np.ones(64)), p=2) == pytest.approx(1.0)
    assert lp_norm(fn(G1, np.cos(x)), p=2) == pytest.approx(1 / math.sqrt(2), rel=1e-14)
    f = builtin_function("mix3", G2)
    assert lp_norm(-3 * f, p=3) == pytest.approx(3 * lp_norm(f, p=3), rel=1e-14)
    w = builtin_weight("cos-weight", G1, a=0.5)
    assert lp_norm(fn(G1, np.ones(64)), w, p=2) == pytest.approx(1.0, rel=1e-14)
    with pytest.raises(ValueError):
        lp_norm(f, p=0.5)


def test_flow_characteristic_of_constants():
    for c in (1.0, 3.7):
        w = WeightFunction(G1, np.full(64, c))
        for p in (1.25, 2.0, 6.0):
            assert flow_characteristic(w, p).value == pytest.approx(1.0, abs=1e-10)


def test_flow_characteristic_properties():
    w = builtin_weight("cos-weight", G1, a=0.5)
    fc = flow_characteristic(w, 2.0)
    assert fc.value >= 1.0
    assert flow_characteristic(WeightFunction(G1, 5 * w.values), 2.0).value == pytest.approx(
        fc.value, rel=1e-12)
    # at y = 0 the product is identically 1 for p = 2
    assert flow_characteristic(w, 2.0, y_ladder=[0.0]).value == pytest.approx(1.0, abs=1e-12)
    fine = flow_characteristic(w, 2.0, refine=4, per_octave=8)
    assert fc.value == pytest.approx(fine.value, rel=0.005)
    assert fc.value <= fine.value
    with pytest.raises(ValueError):
        flow_characteristic(w, 1.0)
    with pytest.raises(ValueError):
        builtin_weight("cos-weight", G1, a=1.0)


def test_flow_characteristic_closed_form():
    # w = 1 + a cos x, p = 2: Q(w) = 1 + a e^{-y} cos x and Q(1/w) has modes
    # c_k e^{-|k| y} with c_k = r^{|k|} (-1)^k / sqrt(1 - a^2), r = (1 - sqrt(1 - a^2)) / a
    a = 0.5
    w = builtin_weight("cos-weight", TorusGrid(1, 256), a=a)
    r = (1 - math.sqrt(1 - a * a)) / a
    ys = np.linspace(0.0, 4.0, 401)
    ks = np.arange(1, 80)
    best = 0.0
    for y in ys:
        for x in (0.0, math.pi):
            qd = (1 + 2 * np.sum((-r) ** ks * np.exp(-ks * y) * np.cos(ks * x))) / math.sqrt(1 - a * a)
            best = max(best, (1 + a * math.exp(-y) * math.cos(x)) * qd)
    fc = flow_characteristic(w, 2.0, per_octave=16)
    assert fc.value == pytest.approx(best, rel=2e-4)


def test_dual_weight():
    w = builtin_weight("cos-weight", G1, a=0.9)
    np.testing.assert_allclose(dual_weight(w, 3.0).values, w.values ** -0.5)
    with pytest.raises(ValueError):
        dual_weight(w, 1.0)


def test_default_ladder():
    lad = default_y_ladder(64)
    assert lad[0] == 0.0 and lad[1] == pytest.approx(2 * math.pi / 64)
    assert lad[-1] >= 4 * math.pi > lad[-2]
    assert np.all(np.diff(lad) > 0)


def test_bounds_unweighted():
    f = builtin_function("cos", G1)
    b2 = check_bounds(f, p=2.0)
    assert b2.ratio == pytest.approx(1 / 128, abs=1e-12)
    b = check_bounds(f, p=1.5)
    assert b.constant == pytest.approx(144.0) and b.holds
    assert riesz_constant(3.0) == pytest.approx(144.0)


def test_bounds_weighted_exponent():
    f = builtin_function("mix3", G1)
    w = builtin_weight("cos-weight", G1, a=0.9)
    b = check_bounds(f, w, p=3.0)
    assert b.exponent == 1.0 and b.holds
    assert check_bounds(f, w, p=1.5).exponent == 2.0


def test_builtins():
    for name in ("cos", "sin", "mix3", "random-band"):
        assert abs(builtin_function(name, G2).mean()) < 1e-12
    a = builtin_function("random-band", G1, seed=4).values
    np.testing.assert_array_equal(a, builtin_function("random-band", G1, seed=4).values)
    assert not np.array_equal(a, builtin_function("random-band", G1, seed=5).values)
    bump = builtin_function("gaussian-bump", G1)
    assert bump.values.max() == pytest.approx(1.0) and np.all(bump.values > 0)
    for bad in (lambda: builtin_function("tan", G1), lambda: builtin_weight("tan", G1),
                lambda: builtin_function("random-band", G1, band=32)):
        with pytest.raises(ValueError):
            bad()


def test_csv_round_trip(tmp_path):
    f = builtin_function("mix3", G2)
    path = tmp_path / "f.csv"
    write_grid_csv(path, f)
    g = read_grid_csv(path, G2)
    np.testing.assert_array_equal(g.values, f.values)
    path.write_text("index,value\n0,1.0\n")
    with pytest.raises(ValueError):
        read_grid_csv(path, G2)
    path.write_text("0,1.0\n5000,2.0\n")
    with pytest.raises(ValueError):
        read_grid_csv(path, G2)
