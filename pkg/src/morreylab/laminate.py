"""Jensen-inequality tests for discrete plane-wave measures.

A pair ``(nu, g)`` is *certified* when the discrete envelope of the spike
function at the barycentre is at most ``<nu, g>``: the discrete envelope
dominates the true one, so this is a genuine certificate for that ``g``.
A positive margin is only *suspicious*; it may disappear on finer grids.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np
from scipy.stats import qmc

from .envelope import StopReason, ks_envelope, spike_function
from .grid import DirectionSet, Grid, dyad_directions, generate_directions
from .measure import DiscreteGYMeasure, PlaneWaveSpec, build_measure

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.1
# Margins this close to zero are rounding noise in <nu, g>
MARGIN_TOL = 1e-12
NEXT_BOUND = {1: 2, 2: 5, 3: 5, 5: 13, 10: 13, 13: 26}


class Status(str, enum.Enum):
    CERTIFIED = "certified"
    SUSPICIOUS = "suspicious"
    BUDGET_EXHAUSTED = "budget_exhausted"


@dataclass(frozen=True)
class GridParams:
    """Lattice size plus the squared-norm bounds of the dyad generators."""

    L: int
    bound_p: int = 5
    bound_q: int = 5
    limit: int | None = None
    multiples: bool | str = "dyadic"
    include_wave_dyads: bool = False

    def grid(self, m: int, n: int = 2) -> Grid:
        return Grid(m, n, self.L)

    def directions(self, grid: Grid, spec: PlaneWaveSpec | None = None) -> DirectionSet:
        D = generate_directions(grid, self.bound_p, self.bound_q, self.multiples, self.limit)
        if self.include_wave_dyads and spec is not None:
            extra = dyad_directions(grid.to_units(spec.dyads))
            D = D.union(extra).fits(grid)
        return D

    def dyad_count(self, m: int, n: int = 2) -> int:
        """Number of generating dyads (multiples not counted)."""
        g = self.grid(m, n)
        return generate_directions(g, self.bound_p, self.bound_q, False, self.limit).count

    def to_dict(self) -> dict:
        return asdict(self)


def default_params(m: int, L: int) -> GridParams:
    """64 dyads for m = 2 and 168 for m = 3."""
    if m == 2:
        return GridParams(L, 5, 5)
    if m == 3:
        return GridParams(L, 3, 13, limit=168)
    return GridParams(L, 2, 5)


def refine(params: GridParams) -> GridParams:
    """``L -> 2L - 1`` with enlarged generator bounds, so the grids and the
    stencil sets both nest."""
    nb = lambda b: NEXT_BOUND.get(b, 2 * b)
    return replace(params, L=2 * params.L - 1, bound_p=nb(params.bound_p), bound_q=nb(params.bound_q),
                   limit=None)


@dataclass
class RefinementSchedule:
    levels: list[GridParams]

    def __post_init__(self):
        for a, b in zip(self.levels, self.levels[1:]):
            if b.L != 2 * a.L - 1:
                raise ValueError("successive grids must satisfy L' = 2L - 1")

    @classmethod
    def ladder(cls, start: GridParams, depth: int) -> "RefinementSchedule":
        levels = [start]
        for _ in range(depth):
            levels.append(refine(levels[-1]))
        return cls(levels)

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)


@dataclass
class JensenVerdict:
    status: Status
    margin: float
    gamma: float
    params: GridParams
    iterations: int
    g: list[float]
    stop_reason: str = ""
    envelope_at_barycenter: float = float("nan")
    seed: int | None = None

    @property
    def sufficiently_suspicious(self) -> bool:
        return self.status is Status.SUSPICIOUS and self.margin > self.gamma

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "margin": self.margin,
            "gamma": self.gamma,
            "L": self.params.L,
            "dir_bounds": [self.params.bound_p, self.params.bound_q],
            "iterations": self.iterations,
            "g": list(self.g),
            "seed": self.seed,
            "sufficiently_suspicious": self.sufficiently_suspicious,
        }


def check_pair(measure: DiscreteGYMeasure, g, params: GridParams, gamma: float = DEFAULT_GAMMA,
               tol_conv: float = 1e-7, max_iter: int = 10_000, early_exit: bool = True,
               directions: DirectionSet | None = None, seed: int | None = None,
               time_limit: float | None = None) -> JensenVerdict:
    """Spike function for ``g``, discrete envelope, classification of the margin."""
    g = np.asarray(g, dtype=float)
    grid = params.grid(measure.m)
    D = directions if directions is not None else params.directions(grid, measure.spec)
    _, f = spike_function(grid, measure, g)
    target = measure.expectation(g)
    res = ks_envelope(f, D, tol_conv=tol_conv, max_iter=max_iter,
                      jensen_target=target + MARGIN_TOL if early_exit else None, time_limit=time_limit)
    margin = res.value_at_barycenter - target
    status = Status.CERTIFIED if margin <= MARGIN_TOL else Status.SUSPICIOUS
    if res.stop_reason is StopReason.ITERATION_CAP:
        log.warning("envelope hit the iteration cap (%d) at L=%d", max_iter, params.L)
    return JensenVerdict(status, float(margin), gamma, params, res.iterations, g.tolist(),
                         res.stop_reason.value, res.value_at_barycenter, seed)


# --- laminate semidecision ---------------------------------------------------

@dataclass
class LaminateResult:
    status: str  # certified_up_to | suspicious | budget_exhausted
    level: int | None = None
    epsilon: float | None = None
    g: list[float] | None = None
    margin: float | None = None
    tested: int = 0
    margins_by_level: list[list[float]] = field(default_factory=list)
    note: str = "evidence only; not a proof that the measure is a laminate"

    def to_dict(self) -> dict:
        return asdict(self)


def g_net(dim: int, level: int, base: int = 8) -> np.ndarray:
    """Deterministic Sobol net in ``[-1, 1]^dim`` with ``base * 2**level`` points."""
    if base == 0:
        return np.empty((0, dim))
    sob = qmc.Sobol(dim, scramble=False)
    pts = sob.random(base * 2**level)
    return 2.0 * pts - 1.0


def net_dispersion(net: np.ndarray, rng: np.random.Generator, probes: int = 2000) -> float:
    """Monte Carlo estimate of the sup-norm covering radius of a net."""
    if len(net) == 0:
        return 2.0
    x = rng.uniform(-1, 1, size=(probes, net.shape[1]))
    d = np.abs(x[:, None, :] - net[None, :, :]).max(axis=2).min(axis=1)
    return float(d.max())


def check_laminate(measure: DiscreteGYMeasure, schedule: RefinementSchedule, g_samples: int = 8,
                   net_base: int = 8, rng: np.random.Generator | None = None,
                   gamma: float = DEFAULT_GAMMA, extra_g: Iterable = (), **kw) -> LaminateResult:
    """Dovetail over refinement levels and samples of ``g``.

    At every level the still-suspicious ``g`` from the previous level are
    rechecked on the finer grid, together with fresh uniform draws and a
    deterministic net that doubles in size with the level.  Only margins
    that stay positive up to the last level are reported.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    K = len(measure.points)
    pending: list[np.ndarray] = [np.asarray(x, dtype=float) for x in extra_g]
    tested, eps, last_level = 0, 2.0, None
    history: list[list[float]] = []
    last: list[JensenVerdict] = []
    for level, params in enumerate(schedule):
        net = g_net(K, level, net_base)
        fresh = list(rng.uniform(-1, 1, size=(g_samples, K))) + list(net)
        candidates = pending + fresh
        if not candidates:
            continue
        grid = params.grid(measure.m)
        D = params.directions(grid, measure.spec)
        verdicts = [check_pair(measure, g, params, gamma, directions=D, **kw) for g in candidates]
        tested += len(verdicts)
        history.append([v.margin for v in verdicts])
        last = [v for v in verdicts if v.status is Status.SUSPICIOUS]
        pending = [np.asarray(v.g) for v in last]
        eps = min(eps, net_dispersion(np.array(fresh), rng))
        last_level = level
    if tested == 0:
        return LaminateResult("budget_exhausted", tested=0)
    if last:
        worst = max(last, key=lambda v: v.margin)
        return LaminateResult("suspicious", last_level, None, worst.g, worst.margin, tested, history)
    return LaminateResult("certified_up_to", last_level, eps, None, None, tested, history)


# --- fixed functions ---------------------------------------------------------

FunctionRegistry = dict[str, Callable[[np.ndarray], np.ndarray]]


def _det(A: np.ndarray) -> np.ndarray:
    if A.shape[-2:] != (2, 2):
        raise ValueError("det needs 2x2 matrices")
    return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]


FUNCTIONS: FunctionRegistry = {
    "det": _det,
    "negdet": lambda A: -_det(A),
    "frobenius": lambda A: np.sqrt((A**2).sum(axis=(-2, -1))),
    "frobenius_sq": lambda A: (A**2).sum(axis=(-2, -1)),
    "max_abs": lambda A: np.abs(A).max(axis=(-2, -1)),
}


def register_function(name: str, fn: Callable[[np.ndarray], np.ndarray]) -> None:
    """Add a function of ``(..., m, 2)`` matrix stacks to the registry."""
    FUNCTIONS[name] = fn


def jensen_fixed_function(fn: str | Callable, base, spec: PlaneWaveSpec,
                          measure: DiscreteGYMeasure | None = None, resolution: int = 4096) -> float:
    """``f(base) - sum_eps nu_eps f(base + X_eps)``; nonpositive means Jensen holds."""
    if isinstance(fn, str):
        try:
            fn = FUNCTIONS[fn]
        except KeyError:
            raise KeyError(f"function {fn!r} is not registered") from None
    measure = build_measure(spec, resolution) if measure is None else measure
    base = np.asarray(base, dtype=float)
    vals = fn(base[None] + measure.points)
    return float(fn(base[None])[0] - measure.expectation(vals))
