import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morreylab.measure import (PlaneWaveSpec, UnsatisfiableSampling, WaveComponent, barycenter, build_measure,
                               build_support, compute_weights, haar, is_degenerate, marginals, sample_amplitudes,
                               sample_frequencies, sample_spec, sawtooth, sign_matrix, triple_relation,
                               weight_tolerance)
from oracles import torus_weights_bruteforce


def spec_of(ns, cs=None, amps=None, m=2):
    cs = cs or [0.0] * len(ns)
    amps = amps or [np.eye(m)[i % m] for i in range(len(ns))]
    return PlaneWaveSpec(tuple(WaveComponent(a, n, c) for a, n, c in zip(amps, ns, cs)))


def test_sawtooth_and_haar():
    assert sawtooth(0.25) == 0.25
    assert sawtooth(0.75) == 0.25
    assert sawtooth(1.25) == 0.25
    assert haar(0.25) == 1
    assert haar(0.75) == -1
    assert haar(1.25) == 1
    assert haar(0.5) == -1 and haar(0.0) == 1
    np.testing.assert_array_equal(haar(np.array([0.1, 0.6])), [1, -1])


def test_sign_matrix_bit_convention():
    S = sign_matrix(3)
    assert S.shape == (8, 3)
    np.testing.assert_array_equal(S[0], [-1, -1, -1])
    np.testing.assert_array_equal(S[0b101], [1, -1, 1])


def test_support_examples():
    X = build_support(PlaneWaveSpec((WaveComponent((1, 0), (1, 1)),)))
    np.testing.assert_array_equal(X[1], [[1, 1], [0, 0]])
    np.testing.assert_array_equal(X[0], [[-1, -1], [0, 0]])

    X = build_support(spec_of([(1, 0), (0, 1)], amps=[(1, 0), (0, 1)]))
    np.testing.assert_array_equal(X[0b11], np.eye(2))
    # eps = (+1, -1): bit 0 set
    np.testing.assert_array_equal(X[0b01], np.diag([1, -1]))

    X = build_support(spec_of([(1, 0), (0, 1), (1, 1)], amps=list(np.eye(3)), m=3))
    np.testing.assert_array_equal(X[0b111], [[1, 0], [0, 1], [1, 1]])


def test_spec_validation():
    with pytest.raises(ValueError):
        WaveComponent((0, 0), (1, 0))
    with pytest.raises(ValueError):
        WaveComponent((1, 0), (0, 0))
    with pytest.raises(ValueError):
        spec_of([(1, 2), (2, 4)])
    spec = spec_of([(1, 0), (0, 1), (1, 1)], cs=[0, 0, 0.25])
    assert PlaneWaveSpec.from_dict(spec.to_dict()) == spec


def test_single_wave_is_balanced():
    for n, c in [((1, 0), 0.0), ((3, -2), 0.37), ((0, 5), 0.9)]:
        w = compute_weights(spec_of([n], [c]))
        np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-12)


def test_two_orthogonal_waves_uniform():
    for cs in ([0, 0], [0.3, 0.71]):
        w = compute_weights(spec_of([(1, 0), (0, 1)], cs))
        np.testing.assert_allclose(w, 0.25, atol=10 / 4096)
        np.testing.assert_allclose(w, torus_weights_bruteforce(spec_of([(1, 0), (0, 1)], cs), 1024), atol=1e-3)


def test_phase_shifted_triple_against_oracle():
    spec = spec_of([(1, 0), (0, 1), (1, 1)], [0, 0, 0.25])
    w = compute_weights(spec)
    assert abs(w[0b111] - 1 / 16) < 1e-3
    np.testing.assert_allclose(w, torus_weights_bruteforce(spec, 4096), atol=1e-3)


def test_flat_wave_slice_on_boundary_is_perturbed(caplog):
    # the jump of the first wave at x2 = 31.5/64 is a slice midpoint
    spec = spec_of([(0, 1), (1, 0)], [0.5 / 64, 0.0])
    w = compute_weights(spec, 64)
    assert abs(w.sum() - 1) < 1e-12
    assert "perturbing" in caplog.text


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_weight_invariants(seed, N):
    rng = np.random.default_rng(seed)
    ns = sample_frequencies(rng, N, 6)
    spec = spec_of(ns, list(rng.random(N)))
    R = 1024
    w = compute_weights(spec, R)
    assert abs(w.sum() - 1) < 1e-12
    assert np.all(w >= 0)
    assert np.all(np.abs(marginals(w, N)) <= weight_tolerance(spec, R) + 1e-12)
    S = sign_matrix(N)
    for i in range(N):
        for j in range(i + 1, N):
            for a in (-1, 1):
                for b in (-1, 1):
                    assert abs(w[(S[:, i] == a) & (S[:, j] == b)].sum() - 0.25) <= 10 / R


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_support_sign_symmetry_and_amplitude_independence(seed):
    rng = np.random.default_rng(seed)
    spec = sample_spec(rng, 2, 3, 13)
    X = build_support(spec)
    full = 2**spec.N - 1
    for e in range(2**spec.N):
        np.testing.assert_array_equal(X[full ^ e], -X[e])
    other = spec.with_amplitudes(rng.uniform(-1, 1, size=(3, 2)) + 2)
    np.testing.assert_array_equal(compute_weights(spec, 512), compute_weights(other, 512))


def test_weights_converge_with_resolution():
    rng = np.random.default_rng(4)
    for _ in range(5):
        spec = spec_of(sample_frequencies(rng, 4, 5), list(rng.random(4)))
        prev = None
        for R in (512, 1024, 2048, 4096):
            w = compute_weights(spec, R)
            if prev is not None:
                assert np.abs(w - prev).max() <= 40.0 / R
            prev = w


def test_barycenter():
    spec = spec_of([(2, 1)], amps=[(0.5, -0.25)])
    m = build_measure(spec, 1024)
    assert np.abs(m.barycenter()).max() == 0.0
    rng = np.random.default_rng(0)
    for _ in range(10):
        spec = sample_spec(rng, 3, 4, 13)
        m = build_measure(spec)
        bound = weight_tolerance(spec, m.weight_resolution) * sum(
            np.abs(w.a).max() * np.abs(w.n).max() for w in spec.waves)
        assert np.abs(m.barycenter()).max() <= bound
    hand = build_measure(spec, weights=np.eye(16)[0])
    np.testing.assert_array_equal(barycenter(hand), hand.points[0])


def test_triple_relation_and_degeneracy():
    spec = spec_of([(1, 0), (0, 1), (1, 1)], [0, 0, 0.25], amps=list(np.eye(3)), m=3)
    k = triple_relation(spec)
    assert np.allclose(np.array(k) @ np.array([w.n for w in spec.waves]), 0)
    assert all(x % 2 for x in k)
    assert not is_degenerate(compute_weights(spec), 4096)
    flat = spec_of([(1, 0), (0, 1), (2, 1)], [0, 0, 0.25], amps=list(np.eye(3)), m=3)
    assert not all(x % 2 for x in triple_relation(flat))
    assert is_degenerate(compute_weights(flat), 4096)


def test_sampler_respects_grid_box():
    rng = np.random.default_rng(7)
    for L in (9, 13, 25):
        h = 2 / (L - 1)
        for _ in range(20):
            spec = sample_spec(rng, 2, 3, L)
            X = build_support(spec)
            assert np.abs(X).max() <= 1 + 1e-12
            units = X / h
            np.testing.assert_allclose(units, np.rint(units), atol=1e-9)
            ns = [w.n for w in spec.waves]
            assert all(n1[0] * n2[1] != n1[1] * n2[0] for i, n1 in enumerate(ns) for n2 in ns[i + 1:])


def test_sampler_rejects_collinear_directions():
    class Scripted:
        def __init__(self, draws):
            self.draws = iter(draws)

        def integers(self, lo, hi, size=None):
            return np.array(next(self.draws))

    rng = Scripted([(1, 2), (2, 4), (1, 2), (0, 1)])
    assert sample_frequencies(rng, 2, 5) == [(1, 2), (0, 1)]


def test_amplitude_sampler_gives_up():
    assert sample_amplitudes(np.random.default_rng(0), [(7, 0)], 2, 9) is None
    with pytest.raises(UnsatisfiableSampling):
        sample_spec(np.random.default_rng(0), 2, 6, 5, freq_bound=3, budget=20)
