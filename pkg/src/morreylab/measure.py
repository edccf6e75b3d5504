"""Plane-wave deformations and the discrete gradient Young measures they generate.

A deformation ``phi(x) = sum_i a_i s(x . n_i + c_i)`` on the 2-torus has a
gradient taking the 2**N values ``X_eps = sum_i eps_i a_i (x) n_i``.  The
weight of ``X_eps`` is the area of the torus region where the Haar signs
``h(x . n_i + c_i)`` equal ``eps``.  Sign patterns are stored as N-bit
integers: bit ``i`` set means ``eps_i = +1``.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 4096
REJECTION_BUDGET = 10_000


class UnsatisfiableSampling(RuntimeError):
    """Raised when rejection sampling exhausts its budget."""


def sawtooth(t):
    """1-periodic tent: ``s(t) = t`` on [0, 1/2], ``1 - t`` on [1/2, 1]."""
    u = np.mod(t, 1.0)
    return np.where(u <= 0.5, u, 1.0 - u) if np.ndim(u) else (u if u <= 0.5 else 1.0 - u)


def haar(t):
    """Derivative of :func:`sawtooth`, using half-open intervals [0,1/2), [1/2,1)."""
    u = np.mod(t, 1.0)
    if np.ndim(u):
        return np.where(u < 0.5, 1, -1)
    return 1 if u < 0.5 else -1


@dataclass(frozen=True)
class WaveComponent:
    a: tuple[float, ...]
    n: tuple[int, int]
    c: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(x) for x in self.a))
        object.__setattr__(self, "n", tuple(int(x) for x in self.n))
        object.__setattr__(self, "c", float(self.c))
        if len(self.n) != 2:
            raise ValueError("frequency vector must have length 2")
        if not any(self.a):
            raise ValueError("amplitude a must be nonzero")
        if not any(self.n):
            raise ValueError("frequency n must be nonzero")

    @property
    def dyad(self) -> np.ndarray:
        return np.outer(self.a, self.n).astype(float)


@dataclass(frozen=True)
class PlaneWaveSpec:
    waves: tuple[WaveComponent, ...]

    def __post_init__(self):
        object.__setattr__(self, "waves", tuple(self.waves))
        if not self.waves:
            raise ValueError("need at least one wave")
        m = len(self.waves[0].a)
        if m < 2:
            raise ValueError("target dimension m must be >= 2")
        if any(len(w.a) != m for w in self.waves):
            raise ValueError("all amplitudes must have the same length")
        for i, wi in enumerate(self.waves):
            for wj in self.waves[i + 1:]:
                if _det2(wi.n, wj.n) == 0:
                    raise ValueError(f"frequencies {wi.n} and {wj.n} are linearly dependent")

    @property
    def m(self) -> int:
        return len(self.waves[0].a)

    @property
    def N(self) -> int:
        return len(self.waves)

    @property
    def dyads(self) -> np.ndarray:
        """The N rank-one matrices ``a_i (x) n_i``, shape (N, m, 2)."""
        return np.stack([w.dyad for w in self.waves])

    def with_amplitudes(self, amplitudes: Sequence[Sequence[float]]) -> "PlaneWaveSpec":
        return PlaneWaveSpec(tuple(WaveComponent(a, w.n, w.c) for a, w in zip(amplitudes, self.waves)))

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "N": self.N,
            "waves": [{"a": list(w.a), "n": list(w.n), "c": w.c} for w in self.waves],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlaneWaveSpec":
        spec = cls(tuple(WaveComponent(w["a"], w["n"], w.get("c", 0.0)) for w in d["waves"]))
        if "m" in d and d["m"] != spec.m:
            raise ValueError("field m disagrees with amplitude length")
        if "N" in d and d["N"] != spec.N:
            raise ValueError("field N disagrees with number of waves")
        return spec


def _det2(u, v) -> int:
    return u[0] * v[1] - u[1] * v[0]


def sign_matrix(N: int) -> np.ndarray:
    """Rows are the sign vectors eps in {-1,+1}^N, ordered by bit index."""
    idx = np.arange(2**N)[:, None]
    return np.where((idx >> np.arange(N)) & 1, 1, -1)


def build_support(spec: PlaneWaveSpec) -> np.ndarray:
    """All ``X_eps``, shape (2**N, m, 2), ordered by sign-pattern index."""
    return np.einsum("ei,ijk->ejk", sign_matrix(spec.N).astype(float), spec.dyads)


def compute_weights(spec: PlaneWaveSpec, resolution: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Torus-area weights of the sign patterns.

    Exact along x1 (sorted breakpoints of every wave), midpoint rule over
    ``resolution`` slices in x2.  Result sums to one up to rounding.
    """
    if resolution < 64:
        raise ValueError("resolution must be >= 64")
    N = spec.N
    n = np.array([w.n for w in spec.waves], dtype=float)
    c = np.array([w.c for w in spec.waves], dtype=float)
    x2 = (np.arange(resolution) + 0.5) / resolution

    # A wave with n_i1 == 0 is constant on each slice; nudge slices sitting on its jump.
    flat = n[:, 0] == 0
    if flat.any():
        for i in np.flatnonzero(flat):
            u = np.mod(2.0 * (n[i, 1] * x2 + c[i]), 1.0)
            bad = np.minimum(u, 1.0 - u) < 1e-12
            if bad.any():
                log.warning("slice on a sign boundary of wave %d; perturbing %d slice(s)", i, bad.sum())
                x2 = np.where(bad, x2 + 0.25 / resolution, x2)

    offs = n[:, 1][None, :] * x2[:, None] + c[None, :]  # (R, N)
    cols = [np.zeros((resolution, 1)), np.ones((resolution, 1))]
    for i in range(N):
        k = int(abs(n[i, 0]))
        if k == 0:
            continue
        # x1 with n_i1 x1 + off = j/2  ->  x1 = (j/2 - off) / n_i1; exactly 2k of them in [0,1)
        j = np.arange(2 * k)[None, :]
        roots = np.mod((j / 2.0 - offs[:, i : i + 1]) / n[i, 0], 1.0)
        cols.append(roots)
    bp = np.sort(np.concatenate(cols, axis=1), axis=1)
    lengths = np.diff(bp, axis=1)
    mids = 0.5 * (bp[:, 1:] + bp[:, :-1])
    phase = n[None, None, :, 0] * mids[:, :, None] + offs[:, None, :]  # (R, B, N)
    plus = np.mod(phase, 1.0) < 0.5
    pattern = (plus.astype(np.int64) << np.arange(N)).sum(axis=2)
    w = np.bincount(pattern.ravel(), weights=lengths.ravel(), minlength=2**N)
    # each slice has total length exactly 1 up to rounding
    return w / w.sum()


def weight_tolerance(spec: PlaneWaveSpec, resolution: int) -> float:
    """Bound on the marginal imbalance ``|sum_eps nu_eps eps_i|`` for a given resolution."""
    nmax = max(abs(w.n[1]) for w in spec.waves)
    return 2.0 * (nmax + 1) / resolution


def marginals(weights: np.ndarray, N: int) -> np.ndarray:
    return sign_matrix(N).T @ weights


@dataclass
class DiscreteGYMeasure:
    spec: PlaneWaveSpec
    points: np.ndarray
    weights: np.ndarray
    weight_resolution: int = DEFAULT_RESOLUTION
    warnings: list[str] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.spec.m

    @property
    def N(self) -> int:
        return self.spec.N

    def barycenter(self) -> np.ndarray:
        return barycenter(self)

    def is_degenerate(self) -> bool:
        return is_degenerate(self.weights, self.weight_resolution)

    def expectation(self, values) -> float:
        return float(np.dot(self.weights, values))

    def to_dict(self, include_support: bool = True) -> dict:
        d = self.spec.to_dict()
        d["weight_resolution"] = self.weight_resolution
        d["weights"] = self.weights.tolist()
        if include_support:
            d["support"] = self.points.tolist()
        return d


def build_measure(spec: PlaneWaveSpec, resolution: int = DEFAULT_RESOLUTION,
                  weights: np.ndarray | None = None) -> DiscreteGYMeasure:
    if weights is None:
        weights = compute_weights(spec, resolution)
    return DiscreteGYMeasure(spec, build_support(spec), np.asarray(weights, dtype=float), resolution)


def barycenter(measure: DiscreteGYMeasure) -> np.ndarray:
    return np.einsum("e,ejk->jk", measure.weights, measure.points)


def is_degenerate(weights: np.ndarray, resolution: int) -> bool:
    """All weights equal ``2**-N`` up to quadrature error."""
    return bool(np.all(np.abs(weights - 1.0 / len(weights)) <= 10.0 / resolution))


# --- sampling ---------------------------------------------------------------

def sample_frequencies(rng: np.random.Generator, N: int, freq_bound: int,
                       budget: int = REJECTION_BUDGET) -> list[tuple[int, int]]:
    """Integer directions uniform on ``[-L, L]^2``, pairwise linearly independent."""
    for _ in range(budget):
        ns = [tuple(int(v) for v in rng.integers(-freq_bound, freq_bound + 1, size=2)) for _ in range(N)]
        if any(v == (0, 0) for v in ns):
            continue
        if all(_det2(ns[i], ns[j]) != 0 for i in range(N) for j in range(i + 1, N)):
            return ns
    raise UnsatisfiableSampling(f"no pairwise independent directions after {budget} draws")


def sample_phases(rng: np.random.Generator, N: int, pin: bool = False) -> list[float]:
    c = rng.random(N)
    if pin:
        c[: min(2, N)] = 0.0
    return [float(x) for x in c]


def sample_amplitudes(rng: np.random.Generator, ns: Sequence[tuple[int, int]], m: int, L: int,
                      budget: int = REJECTION_BUDGET) -> list[list[int]] | None:
    """On-grid amplitudes keeping every ``X_eps`` inside ``[-1,1]^{m x 2}``.

    Components are integers ``k`` (amplitude ``k*h``, ``h = 2/(L-1)``),
    uniform on ``|k| |n_i|_inf <= (L-1)/2`` and rejected on the box
    constraint ``max_eps |X_eps|_rc = sum_i |k_ir| |n_ic| <= (L-1)/2``.  The
    box constraint separates over rows, so rows are drawn independently;
    ``a_i != 0`` is checked last.  Both shortcuts leave the accepted law
    unchanged.  Returns None when the budget is exhausted.
    """
    half = (L - 1) // 2
    nabs = np.abs(np.array(ns, dtype=np.int64))  # (N, 2)
    kmax = half // nabs.max(axis=1)
    if np.any(kmax == 0):
        return None
    N = len(ns)
    for _ in range(budget):
        k = np.empty((N, m), dtype=np.int64)
        for r in range(m):
            for _ in range(budget):
                col = rng.integers(-kmax, kmax + 1)
                if (np.abs(col) @ nabs).max() <= half:
                    break
            else:
                return None
            k[:, r] = col
        if not np.any(np.all(k == 0, axis=1)):
            return k.tolist()
    return None


def amplitudes_feasible(ns: Sequence[tuple[int, int]], m: int, L: int) -> bool:
    """Whether some nonzero on-grid amplitudes fit the box for these directions.

    Smallest admissible choice: each wave gets a single unit entry in one row.
    """
    half = (L - 1) // 2
    nabs = np.abs(np.array(ns, dtype=np.int64))
    for rows in itertools.product(range(m), repeat=len(ns)):
        load = np.zeros((m, 2), dtype=np.int64)
        for i, r in enumerate(rows):
            load[r] += nabs[i]
        if load.max() <= half:
            return True
    return False


def sample_spec(rng: np.random.Generator, m: int, N: int, L: int, freq_bound: int | None = None,
                pin_phases: bool = False, budget: int = REJECTION_BUDGET,
                amplitude_budget: int = 1000) -> PlaneWaveSpec:
    """One draw of steps 1-3 of the search: directions, phases, on-grid amplitudes.

    Directions admitting no amplitudes at all are redrawn before any
    amplitude sampling.
    """
    # grid steps from 0 to 1; the frequency range scales with the grid
    freq_bound = (L - 1) // 2 if freq_bound is None else freq_bound
    h = 2.0 / (L - 1)
    for _ in range(budget):
        ns = sample_frequencies(rng, N, freq_bound, budget)
        if not amplitudes_feasible(ns, m, L):
            continue
        cs = sample_phases(rng, N, pin_phases)
        k = sample_amplitudes(rng, ns, m, L, amplitude_budget)
        if k is not None:
            return PlaneWaveSpec(tuple(WaveComponent([x * h for x in ki], ni, ci)
                                       for ki, ni, ci in zip(k, ns, cs)))
    raise UnsatisfiableSampling(f"no admissible spec for m={m}, N={N}, L={L}")


def triple_relation(spec: PlaneWaveSpec) -> tuple[int, int, int] | None:
    """Primitive integer relation ``k1 n1 + k2 n2 + k3 n3 = 0`` for N = 3."""
    if spec.N != 3:
        return None
    n1, n2, n3 = (w.n for w in spec.waves)
    k = (_det2(n2, n3), _det2(n3, n1), _det2(n1, n2))
    g = math.gcd(math.gcd(abs(k[0]), abs(k[1])), abs(k[2]))
    return tuple(x // g for x in k)
