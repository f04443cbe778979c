import math

import numpy as np
import pytest

from riesz_sparse.paths import (ScalarPath, TimeGrid, VectorPath, check_diff_subordination,
                                make_time_grid, quadratic_variation, sample_brownian,
                                stochastic_integral, synth_martingale_pair)
from riesz_sparse.rng import chunk_bounds, derive_seed, run_chunked, stream


def test_time_grid_points():
    g = make_time_grid(1.0, 4)
    assert g.dt == 0.25
    np.testing.assert_array_equal(g.times, [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_array_equal(make_time_grid(2.0, 1).times, [0.0, 2.0])


@pytest.mark.parametrize("t_max,n", [(1.0, 0), (0.0, 3), (-1.0, 3), (math.inf, 3), (1.0, 2.5)])
def test_time_grid_rejects_bad_input(t_max, n):
    with pytest.raises(ValueError):
        make_time_grid(t_max, n)


def test_paths_validate_shape_and_finiteness():
    g = TimeGrid(1.0, 2)
    with pytest.raises(ValueError):
        ScalarPath(g, [0.0, 1.0])
    with pytest.raises(ValueError):
        VectorPath(g, [[0.0], [np.nan], [1.0]])


def test_brownian_is_deterministic_and_stream_dependent():
    g = TimeGrid(1.0, 50)
    a = sample_brownian(g, 2, seed=5, path_index=3)
    b = sample_brownian(g, 2, seed=5, path_index=3)
    c = sample_brownian(g, 2, seed=5, path_index=4)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert np.all(a.values[0] == 0)


def test_brownian_moments():
    # B_1 ~ N(0, 2) at speed 2
    g = TimeGrid(1.0, 20)
    n = 20000
    end = np.array([sample_brownian(g, 1, seed=11, path_index=i).values[-1, 0] for i in range(n)])
    assert abs(end.mean()) < 3 * math.sqrt(2.0 / n)
    # the sample variance of a normal has sd var*sqrt(2/(n-1))
    assert abs(end.var(ddof=1) - 2.0) < 4 * 2.0 * math.sqrt(2.0 / (n - 1))


def test_brownian_speed_and_dimension_preconditions():
    g = TimeGrid(1.0, 4)
    with pytest.raises(ValueError):
        sample_brownian(g, 0)
    with pytest.raises(ValueError):
        sample_brownian(g, 1, speed=0.0)


def test_stochastic_integral_identities():
    g = TimeGrid(1.0, 100)
    W = sample_brownian(g, 1, seed=1)
    Wd = ScalarPath(g, W.values[:, 0])
    one = stochastic_integral(ScalarPath(g, np.ones(101)), Wd)
    np.testing.assert_allclose(one.values[:, 0], Wd.values - Wd.values[0], atol=1e-13)
    zero = stochastic_integral(ScalarPath(g, np.zeros(101)), Wd)
    assert np.all(zero.values == 0)
    with pytest.raises(ValueError):
        stochastic_integral(ScalarPath(TimeGrid(2.0, 100), np.ones(101)), Wd)


def test_ito_isometry():
    # int_0^1 W dW with speed 2: E[I^2] = int_0^1 2s * 2 ds = 2
    g = TimeGrid(1.0, 200)
    n = 8000
    vals = np.empty(n)
    for i in range(n):
        W = ScalarPath(g, sample_brownian(g, 1, seed=2, path_index=i).values[:, 0])
        vals[i] = stochastic_integral(W, W).values[-1, 0]
    sq = vals ** 2
    assert abs(sq.mean() - 2.0) < 4 * sq.std(ddof=1) / math.sqrt(n)
    # left-point sums are martingales
    assert abs(vals.mean()) < 4 * vals.std(ddof=1) / math.sqrt(n)


def test_quadratic_variation():
    g = TimeGrid(1.0, 10_000)
    assert np.all(quadratic_variation(ScalarPath(g, np.full(10_001, 3.0))).values == 0)
    qv = quadratic_variation(sample_brownian(g, 1, seed=3)).values[-1]
    assert abs(qv - 2.0) < 0.1
    # a linear path c t has QV c^2 t^2 / n
    c, n = 3.0, 1000
    lin = ScalarPath(TimeGrid(1.0, n), c * np.linspace(0, 1, n + 1))
    assert quadratic_variation(lin).values[-1] == pytest.approx(c * c / n, rel=1e-12)


def test_quadratic_variation_is_additive():
    g = TimeGrid(1.0, 100)
    P = sample_brownian(g, 3, seed=4)
    q = quadratic_variation(P).values
    first = quadratic_variation(VectorPath(TimeGrid(0.5, 50), P.values[:51])).values[-1]
    second = quadratic_variation(VectorPath(TimeGrid(0.5, 50), P.values[50:])).values[-1]
    assert q[-1] == pytest.approx(first + second, rel=1e-13)


def test_subordination_checks():
    g = TimeGrid(1.0, 200)
    X = ScalarPath(g, 1.0 + sample_brownian(g, 1, seed=6).values[:, 0])
    r = check_diff_subordination(X, VectorPath(g, np.zeros((201, 2))))
    assert r.holds and r.min_margin >= 0
    eq = check_diff_subordination(X, X.as_vector())
    assert eq.holds and eq.min_margin == 0.0
    assert not check_diff_subordination(X, VectorPath(g, 2 * X.values)).holds


@pytest.mark.parametrize("kind", ["constant-unit", "rotating", "random-ball"])
@pytest.mark.parametrize("d", [1, 3])
def test_synthetic_pairs_are_subordinate(kind, d):
    g = TimeGrid(4.0, 400)
    for i in range(20):
        pair = synth_martingale_pair(g, d, 1.0, 9, kind, path_index=i)
        assert np.all(pair.X.values >= 0)
        assert np.all(pair.Y.values[0] == 0)
        assert np.all(np.linalg.norm(pair.transform, axis=1) <= 1 + 1e-12)
        # exact up to the rounding of |a|^2 = 1 and of the cumulative sums
        roundoff = 1e-12 * (1.0 + quadratic_variation(pair.X).values[-1])
        assert check_diff_subordination(pair.X, pair.Y, tol=roundoff).holds
        np.testing.assert_allclose(np.diff(pair.Y.values, axis=0),
                                   pair.transform * np.diff(pair.X.values)[:, None], atol=1e-14)


def test_synthetic_pair_absorbs_and_keeps_mean():
    # clipping at 0 biases the mean up by O(sqrt(dt)); dt = 1e-3 keeps it
    # well inside the band
    g = TimeGrid(2.0, 2000)
    n = 5000
    ends = np.array([synth_martingale_pair(g, 1, 1.0, 12, path_index=i).X.values[-1]
                     for i in range(n)])
    assert np.all(ends >= 0)
    assert abs(ends.mean() - 1.0) < 4 * ends.std(ddof=1) / math.sqrt(n)
    pair = synth_martingale_pair(TimeGrid(200.0, 20000), 1, 0.5, 0)
    hit = np.flatnonzero(pair.X.values == 0)
    assert hit.size and np.all(pair.X.values[hit[0]:] == 0)


def test_synthetic_pair_preconditions():
    g = TimeGrid(1.0, 10)
    with pytest.raises(ValueError):
        synth_martingale_pair(g, 1, 0.0, 0)
    with pytest.raises(ValueError):
        synth_martingale_pair(g, 1, 1.0, 0, "spiral")


def test_rng_streams():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") != derive_seed(2, "a")
    np.testing.assert_array_equal(stream(3, 5).random(4), stream(3, 5).random(4))
    assert not np.array_equal(stream(3, 5).random(4), stream(3, 6).random(4))
    for bad in (-1, 1.5, True, "1"):
        with pytest.raises(ValueError):
            stream(bad)


def test_run_chunked_is_thread_independent():
    assert chunk_bounds(600) == [(0, 0, 256), (1, 256, 512), (2, 512, 600)]

    def fill(out):
        def work(ci, a, b):
            out[a:b] = stream(7, ci).random(b - a)
        return work

    a, b = np.empty(1000), np.empty(1000)
    run_chunked(fill(a), 1000, threads=1)
    run_chunked(fill(b), 1000, threads=4)
    np.testing.assert_array_equal(a, b)
