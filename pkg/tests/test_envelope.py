import numpy as np
import pytest

from morreylab.envelope import (BACKGROUND, GridFunction, StopReason, jensen_gap, ks_envelope, ks_step,
                                naive_reference_envelope, spike_function, spike_radius)
from morreylab.grid import DirectionSet, Grid, generate_directions
from morreylab.laminate import FUNCTIONS
from morreylab.measure import PlaneWaveSpec, WaveComponent, build_measure, build_support


def two_point_measure(grid, units):
    """K = {X, -X} with weights 1/2."""
    X = np.asarray(units) * grid.h
    a, n = X[:, 0], np.array([1, 0])
    if not np.any(a):
        a, n = X[:, 1], np.array([0, 1])
    spec = PlaneWaveSpec((WaveComponent(a, n),))
    return build_measure(spec, weights=np.array([0.5, 0.5]))


def two_wave_measure(grid):
    spec = PlaneWaveSpec((WaveComponent((2 * grid.h, 0), (1, 0)), WaveComponent((0, 2 * grid.h), (0, 1))))
    return build_measure(spec, weights=np.full(4, 0.25))


def random_spike(grid, rng):
    K = rng.choice(grid.size, size=rng.integers(2, 6), replace=False)
    vals = np.full(grid.size, BACKGROUND)
    vals[K] = rng.uniform(-1, 1, len(K))
    return GridFunction(grid, vals)


def test_spike_function():
    g = Grid(2, 2, 7)
    meas = two_point_measure(g, [[1, 0], [0, 0]])
    bd, f = spike_function(g, meas, [-1.0, 0.5])
    assert f.at(meas.points[0]) == -1.0 and f.at(meas.points[1]) == 0.5
    assert np.sum(f.values == BACKGROUND) == g.size - 2
    with pytest.raises(ValueError):
        spike_function(g, meas, [1.5, 0])
    assert 0 < spike_radius(g, meas) < g.h


def test_spike_collision_keeps_minimum(caplog):
    g = Grid(2, 2, 7)
    # three waves with the same amplitude column collapse X_{+-+} onto X_{-++} etc.
    h = g.h
    spec = PlaneWaveSpec((WaveComponent((h, 0), (1, 0)), WaveComponent((h, 0), (0, 1)),
                          WaveComponent((h, 0), (1, 1))))
    meas = build_measure(spec, weights=np.full(8, 1 / 8))
    X = build_support(spec)
    vals = np.linspace(-1, 1, 8)
    bd, f = spike_function(g, meas, vals)
    assert bd.collisions > 0 and "collision" in caplog.text
    for e in range(8):
        same = [k for k in range(8) if np.array_equal(X[k], X[e])]
        assert f.at(X[e]) == vals[same].min()


def test_empty_support_is_constant():
    g = Grid(2, 2, 5)
    f = GridFunction(g, np.full(g.size, BACKGROUND))
    res = ks_envelope(f, generate_directions(g, 5, 5))
    assert res.iterations == 1 and res.stop_reason is StopReason.CONVERGED
    assert np.all(res.final.values == BACKGROUND)


def test_one_step_midpoint():
    g = Grid(2, 2, 7)
    D = generate_directions(g, 5, 5)
    meas = two_point_measure(g, D.units[0])
    _, f = spike_function(g, meas, [-1.0, -1.0])
    out = ks_step(f, D)
    assert out.values[g.center_index()] == -1.0
    res = ks_envelope(f, D, jensen_target=-1.0)
    assert res.stop_reason is StopReason.JENSEN_SATISFIED
    assert jensen_gap(res, meas, [-1.0, -1.0]) == 0.0


def test_two_wave_laminate_reaches_minus_one():
    g = Grid(2, 2, 9)
    meas = two_wave_measure(g)
    D = generate_directions(g, 5, 5, multiples="dyadic")
    _, f = spike_function(g, meas, -np.ones(4))
    res = ks_envelope(f, D)
    assert res.value_at_barycenter == -1.0


@pytest.mark.parametrize("name", ["det", "frobenius", "frobenius_sq", "max_abs"])
def test_fixed_points(name):
    g = Grid(2, 2, 9)
    D = generate_directions(g, 5, 5, multiples=True)
    f = GridFunction.from_callable(g, FUNCTIONS[name])
    cur = f
    for _ in range(100):
        cur = ks_step(cur, D)
    assert np.abs(cur.values - f.values).max() <= 1e-12


def test_monotone_and_bounded():
    g = Grid(2, 2, 7)
    rng = np.random.default_rng(3)
    D = generate_directions(g, 5, 5)
    f = random_spike(g, rng)
    cur = f
    for _ in range(20):
        nxt = ks_step(cur, D)
        assert np.all(nxt.values <= cur.values)
        assert nxt.values.min() >= f.values.min()
        cur = nxt


def test_matches_naive_reference():
    g = Grid(2, 2, 7)
    rng = np.random.default_rng(11)
    D = generate_directions(g, 5, 5)
    for _ in range(5):
        f = random_spike(g, rng)
        a = ks_envelope(f, D, max_iter=60)
        b = naive_reference_envelope(f, D, max_iter=60)
        assert a.iterations == b.iterations and a.stop_reason == b.stop_reason
        assert np.abs(a.final.values - b.final.values).max() <= 1e-12


def test_naive_reference_refuses_big_grids():
    g = Grid(2, 2, 19)
    with pytest.raises(ValueError):
        naive_reference_envelope(GridFunction(g, np.zeros(g.size)), generate_directions(g, 2, 2))


def test_rejects_non_finite():
    g = Grid(2, 2, 5)
    vals = np.zeros(g.size)
    vals[3] = np.inf
    with pytest.raises(ValueError):
        ks_step(GridFunction(g, vals), generate_directions(g, 2, 2))


def test_thread_count_does_not_change_result():
    import numba
    g = Grid(2, 2, 13)
    rng = np.random.default_rng(5)
    f = random_spike(g, rng)
    D = generate_directions(g, 5, 5, multiples="dyadic")
    before = numba.get_num_threads()
    a = ks_envelope(f, D, threads=1).final.values
    b = ks_envelope(f, D, threads=numba.config.NUMBA_NUM_THREADS).final.values
    numba.set_num_threads(before)
    assert np.array_equal(a, b)


def test_multiples_reach_the_same_fixed_point():
    g = Grid(2, 2, 7)
    rng = np.random.default_rng(8)
    for _ in range(3):
        f = random_spike(g, rng)
        a = ks_envelope(f, generate_directions(g, 5, 5), tol_conv=1e-14, max_iter=50_000)
        b = ks_envelope(f, generate_directions(g, 5, 5, multiples="dyadic"), tol_conv=1e-14, max_iter=50_000)
        assert a.stop_reason is b.stop_reason is StopReason.CONVERGED
        assert np.abs(a.final.values - b.final.values).max() <= 1e-10
        assert b.iterations <= a.iterations


def test_checkpoint_resume(tmp_path):
    g = Grid(2, 2, 11)
    rng = np.random.default_rng(2)
    f = random_spike(g, rng)
    D = generate_directions(g, 5, 5)
    full = ks_envelope(f, D, tol_conv=0.0, max_iter=40)
    ck = tmp_path / "env.ckpt"
    part = ks_envelope(f, D, tol_conv=0.0, max_iter=15, checkpoint=ck, checkpoint_every=5)
    assert part.iterations == 15 and ck.exists()
    rest = ks_envelope(f, D, tol_conv=0.0, max_iter=40, checkpoint=ck)
    assert rest.iterations == 40
    assert np.array_equal(rest.final.values, full.final.values)
    with pytest.raises(ValueError):
        ks_envelope(GridFunction(Grid(2, 2, 9), np.zeros(9**4)), D, checkpoint=ck)


def test_time_limit_stops_early():
    g = Grid(2, 2, 13)
    f = random_spike(g, np.random.default_rng(1))
    res = ks_envelope(f, generate_directions(g, 5, 5), tol_conv=0.0, max_iter=10**6, time_limit=0.0)
    assert res.stop_reason is StopReason.TIME_LIMIT and res.iterations == 1


def test_refinement_never_raises_the_envelope():
    from morreylab.laminate import default_params, refine
    rng = np.random.default_rng(9)
    from morreylab.measure import sample_spec
    spec = sample_spec(rng, 2, 3, 7)
    meas = build_measure(spec)
    gv = rng.uniform(-1, 1, 8)
    p = default_params(2, 7)
    vals = []
    for params in (p, refine(p)):
        grid = params.grid(2)
        _, f = spike_function(grid, meas, gv)
        vals.append(ks_envelope(f, params.directions(grid)).value_at_barycenter)
    assert vals[1] <= vals[0] + 1e-12
    assert isinstance(DirectionSet(np.zeros((0, 2, 2), np.int64)).count, int)
