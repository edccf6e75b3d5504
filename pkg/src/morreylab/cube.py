"""Rank-one connections in the N-cube of plane-wave gradients.

Vertices are the ``X_eps``; edges are the open segments
``e(t) = sum_{j != i} eps_j d_j + t d_i``, ``t in (-1, 1)``, with
``d_i = a_i (x) n_i``.  An edge is keyed by its free index ``i`` and the
sign pattern with bit ``i`` cleared.

Every 2x2 minor of ``X_v - e(t)`` is affine in ``t``, and every minor of
``e1(s) - e2(t)`` is bilinear in ``(s, t)``, because the ``d_i`` have rank
one.  The tests below solve those low-degree systems directly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .measure import PlaneWaveSpec, WaveComponent, build_support, sample_frequencies

log = logging.getLogger(__name__)

OPEN_TOL = 1e-9
DENSE_FALLBACK = 512


def is_rank_one(M, tol: float = 1e-9) -> bool:
    """All 2x2 minors vanish within ``tol * (1 + |M|^2)``."""
    M = np.asarray(M, dtype=float)
    scale = tol * (1.0 + (M**2).sum())
    return bool(np.all(np.abs(_minors(M)) <= scale))


def _row_pairs(m: int) -> list[tuple[int, int]]:
    return [(r, s) for r in range(m) for s in range(r + 1, m)]


def _minors(A: np.ndarray) -> np.ndarray:
    """Row-pair minors of (..., m, 2) stacks, shape (..., m(m-1)/2)."""
    return np.stack([A[..., r, 0] * A[..., s, 1] - A[..., r, 1] * A[..., s, 0]
                     for r, s in _row_pairs(A.shape[-2])], axis=-1)


def _mixed(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Polarised minors: minor(A + B) - minor(A) - minor(B)."""
    return np.stack([A[..., r, 0] * B[..., s, 1] + B[..., r, 0] * A[..., s, 1]
                     - A[..., r, 1] * B[..., s, 0] - B[..., r, 1] * A[..., s, 0]
                     for r, s in _row_pairs(A.shape[-2])], axis=-1)


@dataclass(frozen=True)
class Edge:
    i: int
    base: int  # sign pattern with bit i cleared

    def endpoints(self) -> tuple[int, int]:
        return self.base, self.base | (1 << self.i)


class CubeConfig:
    def __init__(self, dyads: np.ndarray):
        self.dyads = np.asarray(dyads, dtype=float)
        self.N, self.m = self.dyads.shape[0], self.dyads.shape[1]

    @classmethod
    def from_spec(cls, spec: PlaneWaveSpec) -> "CubeConfig":
        return cls(spec.dyads)

    @cached_property
    def signs(self) -> np.ndarray:
        idx = np.arange(2**self.N)[:, None]
        return np.where((idx >> np.arange(self.N)) & 1, 1.0, -1.0)

    @cached_property
    def vertices(self) -> np.ndarray:
        return np.einsum("ei,ijk->ejk", self.signs, self.dyads)

    @cached_property
    def edges(self) -> list[Edge]:
        return [Edge(i, b) for i in range(self.N) for b in range(2**self.N) if not b >> i & 1]

    def edge_anchor(self, e: Edge) -> np.ndarray:
        """``e(0)``: the fixed-sign part of the edge."""
        return self.vertices[e.base] + self.dyads[e.i]

    def edge_point(self, e: Edge, t: float) -> np.ndarray:
        return self.edge_anchor(e) + t * self.dyads[e.i]

    @cached_property
    def scale(self) -> float:
        return float(np.abs(self.dyads).max())


# --- trivial catalogue -------------------------------------------------------

def trivial_catalogue(config: CubeConfig) -> tuple[dict[int, set[Edge]], dict[Edge, set[Edge]]]:
    """Connections inside the 2-skeleton: incident edges of each vertex, and
    the parallel edges one sign flip away for each edge."""
    vertex = {v: {Edge(i, v & ~(1 << i)) for i in range(config.N)} for v in range(2**config.N)}
    edge = {e: {Edge(e.i, e.base ^ (1 << j)) for j in range(config.N) if j != e.i} for e in config.edges}
    return vertex, edge


# --- connection tests --------------------------------------------------------

def _affine_root_connected(alpha: np.ndarray, beta: np.ndarray, tol: float, zero: float) -> bool:
    """Common root of ``alpha_r + beta_r t`` in the open interval (-1, 1)."""
    roots = []
    for a, b in zip(alpha, beta):
        if abs(b) <= zero:
            if abs(a) > zero:
                return False
            continue
        roots.append(-a / b)
    if not roots:
        return True
    t = roots[0]
    if any(abs(r - t) > tol for r in roots[1:]):
        return False
    return -1.0 + tol < t < 1.0 - tol


def vertex_edge_connected(config: CubeConfig, v: int, e: Edge, tol: float = OPEN_TOL) -> bool:
    P = config.vertices[v] - config.edge_anchor(e)
    D = -config.dyads[e.i]
    zero = 1e-12 * (1.0 + config.scale**2)
    return _affine_root_connected(_minors(P), _mixed(P, D), tol, zero)


def _edge_pair_data(config: CubeConfig, e1: Edge, e2: Edge):
    """``e1(s) - e2(t) = P + s D1 + t D2`` and the coefficients
    (alpha, beta, gamma, delta) of each of its minors."""
    P = config.edge_anchor(e1) - config.edge_anchor(e2)
    D1, D2 = config.dyads[e1.i], -config.dyads[e2.i]
    F = np.stack([_minors(P), _mixed(P, D1), _mixed(P, D2), _mixed(D1, D2)], axis=-1)
    return P, D1, D2, F


def _eval_forms(F: np.ndarray, s, t):
    return F[:, 0] + F[:, 1] * s + F[:, 2] * t + F[:, 3] * s * t


def _corner_test(P, D1, D2, r: int, tol: float) -> bool:
    # minors of the assembled matrices: the expanded polynomial cancels badly near corners
    c = 1.0 - tol
    vals = [_minors(P + s * D1 + t * D2)[r] for s in (-c, c) for t in (-c, c)]
    return min(vals) <= 0.0 <= max(vals)


def _proportional(u: np.ndarray, v: np.ndarray, zero: float) -> bool:
    return np.abs(np.outer(u, v) - np.outer(v, u)).max() <= zero * (1.0 + np.abs(u).max() * np.abs(v).max())


def _dense_fallback(F: np.ndarray, tol: float, zero: float) -> bool:
    log.info("edge-edge elimination degenerate; using %dx%d sampling", DENSE_FALLBACK, DENSE_FALLBACK)
    g = np.linspace(-1 + tol, 1 - tol, DENSE_FALLBACK)
    S, T = np.meshgrid(g, g, indexing="ij")
    vals = np.stack([f[0] + f[1] * S + f[2] * T + f[3] * S * T for f in F])
    h = g[1] - g[0]
    slack = h * np.abs(F[:, 1:]).sum(axis=1)[:, None, None] + zero
    return bool(np.any(np.all(np.abs(vals) <= slack, axis=0)))


def edge_edge_connected(config: CubeConfig, e1: Edge, e2: Edge, tol: float = OPEN_TOL) -> bool:
    P, D1, D2, F = _edge_pair_data(config, e1, e2)
    zero = 1e-12 * (1.0 + config.scale**2)
    live = np.flatnonzero(np.abs(F).max(axis=1) > zero)
    if len(live) == 0:
        return True
    F = F[live]
    if len(F) == 1 or all(_proportional(F[0], f, 1e-12) for f in F[1:]):
        return _corner_test(P, D1, D2, live[0], tol)
    A = F[0]
    B = next(f for f in F[1:] if not _proportional(A, f, 1e-12))
    # eliminate t: (aA + bA s)(gB + dB s) - (aB + bB s)(gA + dA s) = 0
    c0 = A[0] * B[2] - B[0] * A[2]
    c1 = A[0] * B[3] + A[1] * B[2] - B[0] * A[3] - B[1] * A[2]
    c2 = A[1] * B[3] - B[1] * A[3]
    coeff_zero = zero * (1.0 + np.abs(F).max())
    if max(abs(c0), abs(c1), abs(c2)) <= coeff_zero:
        return _dense_fallback(F, tol, zero)
    if abs(c2) > coeff_zero:
        ss = _quadratic_roots(c2, c1, c0)
    elif abs(c1) > coeff_zero:
        ss = np.array([-c0 / c1])
    else:
        return False
    check = 1e-7 * (1.0 + np.abs(F).max())
    for s in ss:
        if not -1.0 + tol < s < 1.0 - tol:
            continue
        for ts in _t_candidates(F, s, zero):
            if -1.0 + tol < ts < 1.0 - tol and np.all(np.abs(_eval_forms(F, s, ts)) <= check):
                return True
    return False


def _quadratic_roots(a: float, b: float, c: float) -> np.ndarray:
    """Real roots of ``a x^2 + b x + c``; near-zero discriminants count as
    double roots, which keeps double roots accurate to rounding."""
    disc = b * b - 4.0 * a * c
    if abs(disc) <= 1e-12 * max(b * b, abs(4.0 * a * c)):
        return np.array([-b / (2.0 * a)])
    if disc < 0:
        return np.empty(0)
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    return np.array([q / a, c / q]) if q != 0 else np.array([0.0])


def _t_candidates(F: np.ndarray, s: float, zero: float) -> list[float]:
    """Values of t solving the forms at fixed s (affine in t)."""
    a = F[:, 0] + F[:, 1] * s
    b = F[:, 2] + F[:, 3] * s
    live = np.abs(b) > zero * (1.0 + np.abs(F).max())
    if not live.any():
        return [0.0]
    return list(-a[live] / b[live])


# --- census ------------------------------------------------------------------

@dataclass
class ConnectionStats:
    vertex_counts: np.ndarray
    edge_counts: np.ndarray
    vertex_edge_pairs: list[tuple[int, Edge]] = field(default_factory=list)
    edge_edge_pairs: list[tuple[Edge, Edge]] = field(default_factory=list)

    @property
    def vertex_mean(self) -> float:
        return float(self.vertex_counts.mean())

    @property
    def edge_mean(self) -> float:
        return float(self.edge_counts.mean())

    @property
    def vertex_meandev(self) -> float:
        return mean_deviation(self.vertex_counts)

    @property
    def edge_meandev(self) -> float:
        return mean_deviation(self.edge_counts)


def mean_deviation(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.abs(x - x.mean()).mean()) if x.size else 0.0


def count_connections(config: CubeConfig, tol: float = OPEN_TOL, keep_pairs: bool = False) -> ConnectionStats:
    """Non-trivial vertex-edge and edge-edge rank-one connections.

    Each connected edge pair increments both edges' counts.
    """
    vtriv, etriv = trivial_catalogue(config)
    edges = config.edges
    vcount = np.zeros(2**config.N, dtype=np.int64)
    ecount = np.zeros(len(edges), dtype=np.int64)
    ve, ee = [], []
    for v in range(2**config.N):
        for e in edges:
            if e in vtriv[v]:
                continue
            if vertex_edge_connected(config, v, e, tol):
                vcount[v] += 1
                if keep_pairs:
                    ve.append((v, e))
    for a, e1 in enumerate(edges):
        for b in range(a + 1, len(edges)):
            e2 = edges[b]
            if e2 in etriv[e1]:
                continue
            if edge_edge_connected(config, e1, e2, tol):
                ecount[a] += 1
                ecount[b] += 1
                if keep_pairs:
                    ee.append((e1, e2))
    return ConnectionStats(vcount, ecount, ve, ee)


def sample_config(rng: np.random.Generator, m: int, N: int, law: str = "grid", L: int = 25,
                  freq_bound: int = 25) -> CubeConfig:
    """Random cube for the census.

    ``grid``: integer directions in ``[-freq_bound, freq_bound]^2``, amplitude
    entries on the per-axis values of the ``L`` lattice (nonzero vectors).
    The box constraint is skipped: connections are invariant under a common
    rescaling of the amplitudes.  ``real``: amplitudes uniform in
    ``[-1, 1]^m``.  ``integer``: amplitudes with integer entries in
    ``[-freq_bound, freq_bound]``.
    """
    ns = sample_frequencies(rng, N, freq_bound)
    amps = []
    for _ in range(N):
        while True:
            if law == "grid":
                a = (rng.integers(0, L, size=m) - (L - 1) // 2) * (2.0 / (L - 1))
            elif law == "real":
                a = rng.uniform(-1, 1, size=m)
            elif law == "integer":
                a = rng.integers(-freq_bound, freq_bound + 1, size=m).astype(float)
            else:
                raise ValueError(f"unknown sampling law {law!r}")
            if np.any(a):
                break
        amps.append(a)
    spec = PlaneWaveSpec(tuple(WaveComponent(a, n, 0.0) for a, n in zip(amps, ns)))
    return CubeConfig.from_spec(spec)


@dataclass
class SurveyRow:
    m: int
    N: int
    samples: int
    vertex_mean: float
    vertex_meandev: float
    edge_mean: float
    edge_meandev: float
    seed: int
    law: str = "grid"

    CSV_FIELDS = ("m", "N", "samples", "vertex_mean", "vertex_meandev", "edge_mean", "edge_meandev", "seed")

    def csv_row(self) -> list:
        return [getattr(self, k) for k in self.CSV_FIELDS]

    def table_cell(self) -> tuple[str, str]:
        return (f"{self.vertex_mean:.2f} ({self.vertex_meandev:.2f})",
                f"{self.edge_mean:.2f} ({self.edge_meandev:.2f})")


def connection_survey(seed: int, m: int, N: int, samples: int, law: str = "grid", L: int = 25,
                      freq_bound: int = 25, per_config: list | None = None) -> SurveyRow:
    """Average counts and mean deviations over random configurations."""
    ss = np.random.SeedSequence(seed)
    vm, vd, em, ed = [], [], [], []
    for k, child in enumerate(ss.spawn(samples)):
        rng = np.random.Generator(np.random.Philox(child))
        cfg = sample_config(rng, m, N, law, L, freq_bound)
        st = count_connections(cfg, keep_pairs=per_config is not None)
        vm.append(st.vertex_mean)
        vd.append(st.vertex_meandev)
        em.append(st.edge_mean)
        ed.append(st.edge_meandev)
        if per_config is not None:
            per_config.append({
                "sample": k,
                "dyads": cfg.dyads.tolist(),
                "vertex_edge": [[v, e.i, e.base] for v, e in st.vertex_edge_pairs],
                "edge_edge": [[e1.i, e1.base, e2.i, e2.base] for e1, e2 in st.edge_edge_pairs],
            })
    return SurveyRow(m, N, samples, float(np.mean(vm)), float(np.mean(vd)), float(np.mean(em)),
                     float(np.mean(ed)), seed, law)
