"""Matrix-space lattices and rank-one stencils.

The lattice has ``L`` (odd) points per axis on ``[-1, 1]`` with spacing
``h = 2/(L-1)``, over the ``m*n`` entries of an ``m x n`` matrix, stored
row-major.  Integer coordinates ``k`` map to values ``-1 + k*h``; it is
often handier to work with centred coordinates ``k - (L-1)/2`` which are
the entries in units of ``h``.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import BinaryIO, Iterable

import numpy as np

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Grid:
    m: int
    n: int
    L: int

    def __post_init__(self):
        if self.L < 3 or self.L % 2 == 0:
            raise ValueError(f"L must be odd and >= 3, got {self.L}")
        if self.m < 1 or self.n < 1:
            raise ValueError("matrix shape must be positive")

    @property
    def h(self) -> float:
        return 2.0 / (self.L - 1)

    @property
    def half(self) -> int:
        return (self.L - 1) // 2

    @property
    def ndim(self) -> int:
        return self.m * self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.L,) * self.ndim

    @property
    def size(self) -> int:
        return self.L ** self.ndim

    @cached_property
    def strides(self) -> np.ndarray:
        return self.L ** np.arange(self.ndim - 1, -1, -1, dtype=np.int64)

    @property
    def axis_values(self) -> np.ndarray:
        return -1.0 + self.h * np.arange(self.L)

    def nbytes_per_table(self) -> int:
        return 8 * self.size

    def center_index(self) -> int:
        return int(self.half * self.strides.sum())

    def index_of_units(self, units) -> np.ndarray | int:
        """Flat index from entries in units of h, shape (..., m, n)."""
        u = np.asarray(units, dtype=np.int64)
        flat = u.reshape(u.shape[:-2] + (self.ndim,)) + self.half
        if np.any(flat < 0) or np.any(flat >= self.L):
            raise ValueError("matrix outside the grid box")
        idx = flat @ self.strides
        return int(idx) if np.ndim(idx) == 0 else idx

    def to_units(self, matrices, tol: float = 1e-9) -> np.ndarray:
        """Entries in units of h; raises if any matrix is off-lattice."""
        x = np.asarray(matrices, dtype=float) / self.h
        k = np.rint(x)
        if np.any(np.abs(x - k) > tol):
            raise ValueError("matrix not on the grid")
        return k.astype(np.int64)

    def index_of(self, matrices, tol: float = 1e-9):
        return self.index_of_units(self.to_units(matrices, tol))

    def matrix_at(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=np.int64)
        coords = (idx[..., None] // self.strides) % self.L
        return (self.axis_values[coords]).reshape(idx.shape + (self.m, self.n))

    def refined(self) -> "Grid":
        """The nested grid with ``2L - 1`` points per axis (spacing halved)."""
        return Grid(self.m, self.n, 2 * self.L - 1)


def make_grid(m: int, n: int = 2, L: int = 25) -> Grid:
    return Grid(m, n, L)


# --- direction sets ---------------------------------------------------------

def primitive_vectors(dim: int, bound_sq: int) -> list[tuple[int, ...]]:
    """Primitive integer vectors with squared Euclidean norm <= ``bound_sq``,
    one per sign class (first nonzero entry positive), ordered by norm then
    lexicographically."""
    r = math.isqrt(bound_sq)
    out = []
    for v in np.ndindex(*(2 * r + 1,) * dim):
        v = tuple(x - r for x in v)
        nz = [x for x in v if x]
        if not nz or nz[0] < 0:
            continue
        if sum(x * x for x in v) > bound_sq:
            continue
        if math.gcd(*map(abs, v)) != 1:
            continue
        out.append(v)
    out.sort(key=lambda v: (sum(x * x for x in v), v))
    return out


@dataclass(frozen=True)
class DirectionSet:
    """Rank-one stencils ``h * k * (p (x) q)`` with integer entries ``units``."""

    units: np.ndarray  # (K, m, n) int64, entries in units of h

    @property
    def count(self) -> int:
        return len(self.units)

    def __len__(self):
        return self.count

    def matrices(self, grid: Grid) -> np.ndarray:
        return self.units * grid.h

    def offsets(self, grid: Grid) -> np.ndarray:
        """Flat index offsets, shape (K,)."""
        return self.units.reshape(len(self.units), -1) @ grid.strides

    def reach(self) -> np.ndarray:
        """Per-direction per-axis absolute step, shape (K, m*n)."""
        return np.abs(self.units.reshape(len(self.units), -1))

    def rescaled(self, factor: int) -> "DirectionSet":
        """Same matrices on a grid whose spacing is ``1/factor`` times smaller."""
        return DirectionSet(self.units * factor)

    def union(self, other: "DirectionSet") -> "DirectionSet":
        return _dedupe(np.concatenate([self.units, other.units]))

    def fits(self, grid: Grid) -> "DirectionSet":
        keep = self.reach().max(axis=1) <= grid.L - 1
        return DirectionSet(self.units[keep])


def _canonical(u: np.ndarray) -> np.ndarray:
    flat = u.reshape(-1)
    first = flat[np.flatnonzero(flat)[0]]
    return -u if first < 0 else u


def _dedupe(units: np.ndarray) -> DirectionSet:
    seen, keep = set(), []
    for u in units:
        c = _canonical(u)
        key = c.tobytes()
        if key not in seen:
            seen.add(key)
            keep.append(c)
    return DirectionSet(np.array(keep, dtype=np.int64).reshape((-1,) + units.shape[1:]))


def generate_directions(grid: Grid, bound_p: int = 5, bound_q: int = 5, multiples: bool | str = False,
                        limit: int | None = None) -> DirectionSet:
    """Dyads ``h (p (x) q)`` with p in Z^m, q in Z^n primitive.

    ``bound_p``/``bound_q`` cap the squared Euclidean norms of p and q.  With
    ``multiples=True`` every integer multiple that still fits in the box is
    added, with ``multiples="dyadic"`` only the power-of-two multiples.
    ``limit`` keeps the first dyads in order of increasing ``|p| |q|``.
    """
    ps = primitive_vectors(grid.m, bound_p)
    qs = primitive_vectors(grid.n, bound_q)
    pairs = sorted(((p, q) for p in ps for q in qs),
                   key=lambda pq: (sum(x * x for x in pq[0]) * sum(x * x for x in pq[1]), pq))
    if limit is not None:
        pairs = pairs[:limit]
    units = []
    for p, q in pairs:
        base = np.outer(p, q).astype(np.int64)
        # A +- kX both in the box somewhere needs k |X|_max <= (L-1)/2
        top = max(1, grid.half // int(np.abs(base).max()))
        if multiples == "dyadic":
            ks = [1 << j for j in range(top.bit_length()) if 1 << j <= top]
        elif multiples:
            ks = range(1, top + 1)
        else:
            ks = [1]
        for k in ks:
            units.append(k * base)
    ds = DirectionSet(np.array(units, dtype=np.int64).reshape(-1, grid.m, grid.n))
    return ds.fits(grid)


def dyad_directions(units: Iterable[np.ndarray]) -> DirectionSet:
    """Primitive stencils along given integer rank-one matrices (zero skipped)."""
    out = []
    for u in units:
        u = np.asarray(u, dtype=np.int64)
        g = math.gcd(*map(int, np.abs(u).ravel()))
        if g:
            out.append(u // g)
    if not out:
        return DirectionSet(np.zeros((0, 0, 0), dtype=np.int64))
    return _dedupe(np.array(out))


def is_rank_one_exact(u: np.ndarray) -> bool:
    """All 2x2 minors of an integer matrix vanish."""
    u = np.asarray(u, dtype=np.int64)
    m, n = u.shape
    for i in range(m):
        for j in range(i + 1, m):
            for k in range(n):
                for l in range(k + 1, n):
                    if u[i, k] * u[j, l] - u[i, l] * u[j, k]:
                        return False
    return bool(np.any(u))


# --- snapshots ---------------------------------------------------------------

def dump_table(grid: Grid, values: np.ndarray, fh: BinaryIO, **extra) -> None:
    """JSON header line, then the raw little-endian float64 table."""
    header = {"format": "morreylab-grid", "version": FORMAT_VERSION, "m": grid.m, "n": grid.n,
              "L": grid.L, "ordering": "row-major", "dtype": "<f8", **extra}
    fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
    fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_table(fh: BinaryIO) -> tuple[Grid, np.ndarray, dict]:
    header = json.loads(fh.readline().decode())
    grid = Grid(header["m"], header["n"], header["L"])
    values = np.frombuffer(fh.read(), dtype="<f8").copy()
    if values.size != grid.size:
        raise ValueError(f"table has {values.size} values, grid needs {grid.size}")
    return grid, values, header


def table_bytes(grid: Grid, values: np.ndarray, **extra) -> bytes:
    buf = io.BytesIO()
    dump_table(grid, values, buf, **extra)
    return buf.getvalue()
