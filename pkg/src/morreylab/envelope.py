"""Discrete Kohn-Strang rank-one convexification on a matrix lattice.

One sweep replaces ``f(A)`` by ``min(f(A), min_X (f(A+X) + f(A-X)) / 2)``
over the stencils ``X`` with ``A +- X`` on the lattice.  Sweeps are Jacobi
style (fresh output table), so results do not depend on thread count.
"""
from __future__ import annotations

import enum
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .grid import DirectionSet, Grid, dump_table, load_table
from .measure import DiscreteGYMeasure

log = logging.getLogger(__name__)

# numba falls back to another threading layer; nothing to act on
warnings.filterwarnings("ignore", message="The TBB threading layer")

BACKGROUND = 2.0
NAIVE_MAX_POINTS = 100_000


class StopReason(str, enum.Enum):
    CONVERGED = "converged"
    JENSEN_SATISFIED = "jensen_satisfied"
    ITERATION_CAP = "iteration_cap"
    TIME_LIMIT = "time_limit"


@dataclass
class BoundaryData:
    support: np.ndarray  # distinct flat indices
    g: np.ndarray  # value at each support index
    collisions: int = 0

    def __post_init__(self):
        if np.any(np.abs(self.g) > 1.0):
            raise ValueError("boundary values must lie in [-1, 1]")
        if len(np.unique(self.support)) != len(self.support):
            raise ValueError("support indices must be distinct")


@dataclass
class GridFunction:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid.size,):
            raise ValueError("value table does not match grid size")

    def at(self, matrix) -> float:
        return float(self.values[self.grid.index_of(matrix)])

    def copy(self) -> "GridFunction":
        return GridFunction(self.grid, self.values.copy())

    @classmethod
    def from_callable(cls, grid: Grid, fn, batch: int = 1 << 18) -> "GridFunction":
        """Tabulate ``fn`` (vectorised over a leading axis of m x n matrices)."""
        out = np.empty(grid.size)
        for start in range(0, grid.size, batch):
            idx = np.arange(start, min(start + batch, grid.size))
            out[idx] = fn(grid.matrix_at(idx))
        return cls(grid, out)


@dataclass
class EnvelopeResult:
    final: GridFunction
    iterations: int
    stop_reason: StopReason
    value_at_barycenter: float
    max_change: float = 0.0
    wall_time: float = 0.0
    history: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "stop_reason": self.stop_reason.value,
            "value_at_barycenter": self.value_at_barycenter,
            "max_change": self.max_change,
            "wall_time": self.wall_time,
        }


# --- spike data --------------------------------------------------------------

def spike_function(grid: Grid, measure: DiscreteGYMeasure, g) -> tuple[BoundaryData, GridFunction]:
    """``g`` on the support of the measure, 2 elsewhere.

    This is the restriction to the lattice of the cone-shaped spike functions
    for any cone radius below the spacing.  Coinciding support points keep
    the smallest assigned value.
    """
    g = np.asarray(g, dtype=float)
    if g.shape != (len(measure.points),):
        raise ValueError(f"need {len(measure.points)} boundary values, got {g.shape}")
    if np.any(np.abs(g) > 1.0):
        raise ValueError("boundary values must lie in [-1, 1]")
    idx = np.asarray(grid.index_of(measure.points), dtype=np.int64)
    support, inverse = np.unique(idx, return_inverse=True)
    gmin = np.full(len(support), np.inf)
    np.minimum.at(gmin, inverse, g)
    collisions = len(idx) - len(support)
    if collisions:
        log.warning("%d support point collision(s); keeping the minimum boundary value", collisions)
    values = np.full(grid.size, BACKGROUND)
    values[support] = gmin
    return BoundaryData(support, gmin, collisions), GridFunction(grid, values)


def spike_radius(grid: Grid, measure: DiscreteGYMeasure) -> float:
    """A cone radius for which the spike function restricts to the lattice as
    built by :func:`spike_function`.

    It stays below the spacing, half the minimal support separation and
    ``1/(2 min(m, n))``, the limits under which the spike construction is valid.
    """
    pts = np.unique(measure.points.reshape(len(measure.points), -1), axis=0)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    sep = d[d > 0].min() if len(pts) > 1 else np.inf
    delta = 0.5 * min(grid.h, 0.5 * sep, 1.0 / (2 * min(grid.m, grid.n)))
    assert 0 < delta < grid.h
    return float(delta)


# --- kernels -----------------------------------------------------------------

@numba.njit(cache=True, parallel=True)
def _sweep(f, out, L, strides, offsets, reach):
    d = strides.shape[0]
    out[:] = f
    for k in range(offsets.shape[0]):
        off = offsets[k]
        empty = False
        for a in range(d):
            if 2 * reach[k, a] > L - 1:
                empty = True
        if empty:
            continue
        lo0 = reach[k, 0]
        hi0 = L - 1 - reach[k, 0]
        # axis 0 slabs are disjoint, so threads never share a write
        for c0 in numba.prange(lo0, hi0 + 1):
            coords = np.empty(d, dtype=np.int64)
            for a in range(1, d):
                coords[a] = reach[k, a]
            coords[0] = c0
            lo_in = reach[k, d - 1]
            hi_in = L - 1 - reach[k, d - 1]
            while True:
                base = 0
                for a in range(d - 1):
                    base += coords[a] * strides[a]
                for c in range(lo_in, hi_in + 1):
                    i = base + c
                    v = 0.5 * (f[i + off] + f[i - off])
                    if v < out[i]:
                        out[i] = v
                a = d - 2
                while a >= 1:
                    coords[a] += 1
                    if coords[a] <= L - 1 - reach[k, a]:
                        break
                    coords[a] = reach[k, a]
                    a -= 1
                if a < 1:
                    break


@numba.njit(cache=True, parallel=True)
def _max_decrease(f, out):
    n = f.shape[0]
    chunks = 64
    part = np.zeros(chunks)
    step = (n + chunks - 1) // chunks
    for t in numba.prange(chunks):
        best = 0.0
        for i in range(t * step, min(n, (t + 1) * step)):
            dlt = f[i] - out[i]
            if dlt > best:
                best = dlt
        part[t] = best
    return part.max()


def _kernel_args(f: GridFunction, D: DirectionSet):
    grid = f.grid
    return grid.L, grid.strides, D.offsets(grid).astype(np.int64), D.reach().astype(np.int64)


def ks_step(f: GridFunction, D: DirectionSet, out: np.ndarray | None = None) -> GridFunction:
    """One Jacobi sweep of the midpoint rank-one update."""
    if not np.all(np.isfinite(f.values)):
        raise ValueError("function must be finite everywhere")
    if out is None:
        out = np.empty_like(f.values)
    L, strides, offsets, reach = _kernel_args(f, D)
    if len(offsets):
        _sweep(f.values, out, L, strides, offsets, reach)
    else:
        out[:] = f.values
    return GridFunction(f.grid, out)


def ks_envelope(f: GridFunction, D: DirectionSet, tol_conv: float = 1e-7, max_iter: int = 10_000,
                jensen_target: float | None = None, barycenter_index: int | None = None,
                checkpoint: str | os.PathLike | None = None, checkpoint_every: int = 50,
                threads: int | None = None, time_limit: float | None = None) -> EnvelopeResult:
    """Iterate :func:`ks_step` until the largest pointwise decrease is below
    ``tol_conv``, the value at the barycentre reaches ``jensen_target``, or
    ``max_iter`` sweeps have run.

    With ``checkpoint`` the current table is written every
    ``checkpoint_every`` sweeps and an existing checkpoint is resumed from.
    ``time_limit`` (seconds) stops early; the table is then still an upper
    bound for the envelope.
    """
    if threads:
        numba.set_num_threads(threads)
    grid = f.grid
    center = grid.center_index() if barycenter_index is None else barycenter_index
    start = time.perf_counter()
    cur = f.values.copy()
    done = 0
    if checkpoint is not None and Path(checkpoint).exists():
        with open(checkpoint, "rb") as fh:
            cgrid, cur, header = load_table(fh)
        if cgrid != grid:
            raise ValueError("checkpoint grid does not match")
        done = int(header["iterations"])
        log.info("resumed envelope from %s at iteration %d", checkpoint, done)
    nxt = np.empty_like(cur)
    L, strides, offsets, reach = _kernel_args(f, D)

    it, change = done, 0.0
    reason = StopReason.ITERATION_CAP
    if jensen_target is not None and cur[center] <= jensen_target:
        reason = StopReason.JENSEN_SATISFIED
    else:
        while it < max_iter:
            if len(offsets):
                _sweep(cur, nxt, L, strides, offsets, reach)
            else:
                nxt[:] = cur
            change = float(_max_decrease(cur, nxt))
            cur, nxt = nxt, cur
            it += 1
            if jensen_target is not None and cur[center] <= jensen_target:
                reason = StopReason.JENSEN_SATISFIED
                break
            if change < tol_conv:
                reason = StopReason.CONVERGED
                break
            if checkpoint is not None and it % checkpoint_every == 0:
                _write_checkpoint(checkpoint, grid, cur, it)
            if time_limit is not None and time.perf_counter() - start > time_limit:
                reason = StopReason.TIME_LIMIT
                break
    if checkpoint is not None:
        _write_checkpoint(checkpoint, grid, cur, it)
    return EnvelopeResult(GridFunction(grid, cur), it, reason, float(cur[center]), change,
                          time.perf_counter() - start)


def _write_checkpoint(path, grid: Grid, values: np.ndarray, iterations: int) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        dump_table(grid, values, fh, iterations=iterations)
    os.replace(tmp, path)


def naive_reference_envelope(f: GridFunction, D: DirectionSet, tol_conv: float = 1e-7,
                             max_iter: int = 10_000, jensen_target: float | None = None) -> EnvelopeResult:
    """Plain transcription of the update, point by point.  Test oracle only."""
    grid = f.grid
    if grid.size > NAIVE_MAX_POINTS:
        raise ValueError(f"grid has {grid.size} points; the naive oracle accepts <= {NAIVE_MAX_POINTS}")
    L = grid.L
    coords = [tuple(int(x) for x in c) for c in np.array(np.unravel_index(np.arange(grid.size), grid.shape)).T]
    steps = [tuple(int(x) for x in s) for s in D.units.reshape(len(D.units), -1)]

    def flat(c):
        k = 0
        for x in c:
            k = k * L + x
        return k

    # neighbour pairs (i + s, i - s) of every point that stay on the grid
    pairs = []
    for c in coords:
        row = []
        for s in steps:
            plus = tuple(a + b for a, b in zip(c, s))
            minus = tuple(a - b for a, b in zip(c, s))
            if all(0 <= x < L for x in plus + minus):
                row.append((flat(plus), flat(minus)))
        pairs.append(row)
    cur = [float(x) for x in f.values]
    center = grid.center_index()
    it, change = 0, 0.0
    reason = StopReason.ITERATION_CAP
    start = time.perf_counter()
    while it < max_iter:
        if jensen_target is not None and cur[center] <= jensen_target:
            reason = StopReason.JENSEN_SATISFIED
            break
        nxt = []
        for i in range(grid.size):
            best = cur[i]
            for ip, im in pairs[i]:
                v = 0.5 * (cur[ip] + cur[im])
                if v < best:
                    best = v
            nxt.append(best)
        change = max(a - b for a, b in zip(cur, nxt))
        cur = nxt
        it += 1
        if jensen_target is not None and cur[center] <= jensen_target:
            reason = StopReason.JENSEN_SATISFIED
            break
        if change < tol_conv:
            reason = StopReason.CONVERGED
            break
    values = np.array(cur)
    return EnvelopeResult(GridFunction(grid, values), it, reason, float(values[center]), change,
                          time.perf_counter() - start)


def jensen_gap(result: EnvelopeResult, measure: DiscreteGYMeasure, g) -> float:
    """Envelope at the barycentre minus ``<nu, g>``; positive means Jensen fails."""
    return result.value_at_barycenter - measure.expectation(g)
