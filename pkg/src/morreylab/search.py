"""Randomized search for measures violating Jensen's inequality.

Directions, phases and amplitudes are nested (``M_n x M_c x M_a``
measures); each measure gets up to ``M_g`` boundary vectors ``g`` and is
left as soon as one of them gives a margin above ``gamma``.  Every random
draw comes from a Philox stream keyed by the master seed and the position
of the draw in the nesting, so a trial can be reproduced in isolation and
an interrupted run resumes exactly.

The trial log is JSONL: one header line with the effective configuration,
then one record per ``(measure, g)`` pair.  Wall-clock timings go to a
sidecar file so that the log itself is byte-reproducible.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .laminate import DEFAULT_GAMMA, MARGIN_TOL, GridParams, RefinementSchedule, Status, check_pair, default_params
from .measure import (DEFAULT_RESOLUTION, REJECTION_BUDGET, PlaneWaveSpec, UnsatisfiableSampling,
                      WaveComponent, amplitudes_feasible, build_measure, compute_weights, sample_amplitudes,
                      sample_frequencies, sample_phases)

log = logging.getLogger(__name__)

LOG_FORMAT = "morreylab-trials"
LOG_VERSION = 1

# Stream tags: one Philox stream per draw kind and position in the nesting
_N, _C, _A, _G = 1, 2, 3, 4

# M_n, M_c, M_a, M_g used for the m = 2 experiments
TABLE3 = {3: (7, 1, 30, 50), 4: (7, 7, 20, 160), 5: (7, 7, 20, 320)}

SUSPICIOUS = "suspicious"
SUFFICIENTLY_SUSPICIOUS = "sufficiently_suspicious"
REFINED_CERTIFIED = "refined_certified"
SURVIVED_REFINEMENT = "survived_refinement"


class ConfigMismatch(ValueError):
    """An existing log was written with a different configuration."""


class PersistenceError(RuntimeError):
    def __init__(self, message: str, last_trial: int | None):
        super().__init__(f"{message} (last durable trial: {last_trial})")
        self.last_trial = last_trial


@dataclass(frozen=True)
class SearchConfig:
    m: int = 2
    N: int = 3
    L: int = 25
    bound_p: int | None = None
    bound_q: int | None = None
    limit: int | None = None
    gamma: float = DEFAULT_GAMMA
    M_n: int = 7
    M_c: int = 1
    M_a: int = 30
    M_g: int = 50
    seed: int = 0
    resolution: int = DEFAULT_RESOLUTION
    refine_depth: int = 1
    refine_all: bool = True
    freq_bound: int | None = None
    pin_phases: bool = False
    tol_conv: float = 1e-7
    max_iter: int = 10_000
    trial_time_cap: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.L < 3 or self.L % 2 == 0:
            raise ValueError("L must be odd and >= 3")
        if min(self.M_n, self.M_c, self.M_a, self.M_g) < 0:
            raise ValueError("sample counts must be nonnegative")

    @property
    def M_nu(self) -> int:
        return self.M_n * self.M_c * self.M_a

    def grid_params(self) -> GridParams:
        base = default_params(self.m, self.L)
        return replace(base,
                       bound_p=base.bound_p if self.bound_p is None else self.bound_p,
                       bound_q=base.bound_q if self.bound_q is None else self.bound_q,
                       limit=base.limit if self.limit is None else self.limit)

    def schedule(self) -> RefinementSchedule:
        return RefinementSchedule.ladder(self.grid_params(), self.refine_depth)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown search options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def table3(cls, N: int, **kw) -> "SearchConfig":
        """Sample counts of the published m = 2 runs for N = 3, 4, 5."""
        M_n, M_c, M_a, M_g = TABLE3[N]
        return cls(N=N, M_n=M_n, M_c=M_c, M_a=M_a, M_g=M_g, **kw)


@dataclass
class TrialRecord:
    trial: int
    path: tuple[int, int, int, int]  # (i_n, i_c, i_a, i_g)
    measure: int
    spec: dict
    weights: list[float]
    g: list[float]
    margin: float
    status: str
    L: int
    dir_bounds: tuple[int, int]
    iterations: int
    stop_reason: str
    envelope_at_barycenter: float
    refinement: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["path"] = list(self.path)
        d["dir_bounds"] = list(self.dir_bounds)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        d = dict(d)
        d["path"] = tuple(d["path"])
        d["dir_bounds"] = tuple(d["dir_bounds"])
        return cls(**d)

    @property
    def flagged(self) -> bool:
        return self.status in (SUSPICIOUS, SUFFICIENTLY_SUSPICIOUS)


# --- randomness --------------------------------------------------------------

def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent Philox generator for one position in the nesting."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(path))
    return np.random.Generator(np.random.Philox(ss))


def draw_frequencies(cfg: SearchConfig, i_n: int) -> list[tuple[int, int]]:
    rng = substream(cfg.seed, _N, i_n)
    bound = (cfg.L - 1) // 2 if cfg.freq_bound is None else cfg.freq_bound
    for _ in range(REJECTION_BUDGET):
        ns = sample_frequencies(rng, cfg.N, bound)
        if amplitudes_feasible(ns, cfg.m, cfg.L):
            return ns
    raise UnsatisfiableSampling(f"no directions admit amplitudes for m={cfg.m}, N={cfg.N}, L={cfg.L}")


def draw_phases(cfg: SearchConfig, i_n: int, i_c: int) -> list[float]:
    return sample_phases(substream(cfg.seed, _C, i_n, i_c), cfg.N, cfg.pin_phases)


def draw_amplitudes(cfg: SearchConfig, ns, i_n: int, i_c: int, i_a: int) -> list[list[float]]:
    rng = substream(cfg.seed, _A, i_n, i_c, i_a)
    h = 2.0 / (cfg.L - 1)
    for _ in range(100):
        k = sample_amplitudes(rng, ns, cfg.m, cfg.L)
        if k is not None:
            return [[x * h for x in row] for row in k]
    raise UnsatisfiableSampling(f"amplitude budget exhausted for directions {ns}")


def draw_g(cfg: SearchConfig, path) -> np.ndarray:
    return substream(cfg.seed, _G, *path).uniform(-1.0, 1.0, size=2**cfg.N)


# --- log i/o -----------------------------------------------------------------

def header_line(cfg: SearchConfig) -> str:
    return json.dumps({"format": LOG_FORMAT, "version": LOG_VERSION, "config": cfg.to_dict()},
                      sort_keys=True)


def read_log(path: str | os.PathLike) -> tuple[dict | None, list[TrialRecord]]:
    """Header and complete records; a torn last line is ignored."""
    p = Path(path)
    if not p.exists() or p.stat().st_size == 0:
        return None, []
    text = p.read_text()
    lines = text.split("\n")
    if not text.endswith("\n"):
        lines = lines[:-1]
    lines = [x for x in lines if x]
    if not lines:
        return None, []
    header = json.loads(lines[0])
    if header.get("format") != LOG_FORMAT:
        raise ValueError(f"{path} is not a trial log")
    if header.get("version") != LOG_VERSION:
        raise ValueError(f"unsupported trial log version {header.get('version')}")
    return header, [TrialRecord.from_dict(json.loads(x)) for x in lines[1:]]


def _truncate_torn_tail(path: Path) -> None:
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        path.write_bytes(data[: data.rfind(b"\n") + 1])


# --- the search --------------------------------------------------------------

def _measures(cfg: SearchConfig) -> Iterator[tuple[int, tuple[int, int, int], PlaneWaveSpec]]:
    """Specs in nesting order with lazily computed weights per (n, c)."""
    mid = 0
    for i_n in range(cfg.M_n):
        ns = draw_frequencies(cfg, i_n)
        for i_c in range(cfg.M_c):
            cs = draw_phases(cfg, i_n, i_c)
            for i_a in range(cfg.M_a):
                amps = draw_amplitudes(cfg, ns, i_n, i_c, i_a)
                spec = PlaneWaveSpec(tuple(WaveComponent(a, n, c) for a, n, c in zip(amps, ns, cs)))
                yield mid, (i_n, i_c, i_a), spec
                mid += 1


def _status(verdict, gamma: float) -> str:
    if verdict.status is Status.CERTIFIED:
        return Status.CERTIFIED.value
    return SUFFICIENTLY_SUSPICIOUS if verdict.margin > gamma else SUSPICIOUS


def run_search(cfg: SearchConfig, out: str | os.PathLike | None = None, resume: bool = True,
               max_new_trials: int | None = None, threads: int | None = None) -> Iterator[TrialRecord]:
    """Yield every trial record in order, appending new ones to ``out``.

    Records already present in ``out`` (written by the same configuration)
    are replayed instead of recomputed.  ``max_new_trials`` stops after that
    many fresh trials, which is how interruptions are simulated in tests.
    """
    if threads:
        import numba
        numba.set_num_threads(threads)
    done: list[TrialRecord] = []
    fh = timing_fh = None
    if out is not None:
        out = Path(out)
        header, done = read_log(out) if resume else (None, [])
        if header is not None and header["config"] != cfg.to_dict():
            raise ConfigMismatch(f"{out} was written by a different configuration")
        if header is None or not resume:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(header_line(cfg) + "\n")
            Path(str(out) + ".timings").write_text("")
            done = []
        else:
            _truncate_torn_tail(out)
        fh = open(out, "a")
        timing_fh = open(str(out) + ".timings", "a")
    params = cfg.grid_params()
    D = None
    grid = params.grid(cfg.m)
    trial, fresh = 0, 0
    weights_cache: dict[tuple[int, int], np.ndarray] = {}
    last_durable = done[-1].trial if done else None
    try:
        for mid, (i_n, i_c, i_a), spec in _measures(cfg):
            measure = None
            for i_g in range(cfg.M_g):
                path = (i_n, i_c, i_a, i_g)
                if trial < len(done):
                    rec = done[trial]
                    if rec.path != path:
                        raise ConfigMismatch(f"log record {trial} has path {rec.path}, expected {path}")
                    yield rec
                else:
                    if max_new_trials is not None and fresh >= max_new_trials:
                        return
                    if measure is None:
                        key = (i_n, i_c)
                        if key not in weights_cache:
                            weights_cache.clear()
                            weights_cache[key] = compute_weights(spec, cfg.resolution)
                        measure = build_measure(spec, cfg.resolution, weights_cache[key])
                    if D is None:
                        D = params.directions(grid)
                    g = draw_g(cfg, path)
                    t0 = time.perf_counter()
                    v = check_pair(measure, g, params, cfg.gamma, tol_conv=cfg.tol_conv, max_iter=cfg.max_iter,
                                   directions=D, time_limit=cfg.trial_time_cap)
                    wall = time.perf_counter() - t0
                    rec = TrialRecord(trial, path, mid, spec.to_dict(), measure.weights.tolist(), v.g,
                                      v.margin, _status(v, cfg.gamma), params.L,
                                      (params.bound_p, params.bound_q), v.iterations, v.stop_reason,
                                      v.envelope_at_barycenter)
                    if fh is not None:
                        try:
                            fh.write(rec.to_json() + "\n")
                            fh.flush()
                            os.fsync(fh.fileno())
                            timing_fh.write(json.dumps({"trial": trial, "wall_time": wall}) + "\n")
                            timing_fh.flush()
                        except OSError as exc:
                            raise PersistenceError(f"could not append to {out}: {exc}", last_durable) from exc
                        last_durable = trial
                    fresh += 1
                    yield rec
                trial += 1
                if rec.status == SUFFICIENTLY_SUSPICIOUS:
                    break
    finally:
        if fh is not None:
            fh.close()
            timing_fh.close()


def resume(out: str | os.PathLike, cfg: SearchConfig, **kw) -> list[TrialRecord]:
    """Continue a log; refuses a log written by a different configuration."""
    header, _ = read_log(out)
    if header is not None and header["config"] != cfg.to_dict():
        raise ConfigMismatch(f"{out} was written by a different configuration")
    return list(run_search(cfg, out, resume=True, **kw))


# --- refinement --------------------------------------------------------------

def examine_suspicious(records: list[TrialRecord], schedule: RefinementSchedule, gamma: float = DEFAULT_GAMMA,
                       refine_all: bool = True, resolution: int = DEFAULT_RESOLUTION,
                       tol_conv: float = 1e-7, max_iter: int = 10_000) -> list[TrialRecord]:
    """Recheck flagged pairs on the finer levels of ``schedule``.

    The first level of the schedule is the one the records were screened
    on.  A pair stops at the first level that certifies it.  With
    ``refine_all=False`` only margins above ``gamma`` are refined.
    """
    out = []
    levels = list(schedule)[1:]
    for rec in records:
        wanted = rec.status == SUFFICIENTLY_SUSPICIOUS or (refine_all and rec.status == SUSPICIOUS)
        if not levels or not wanted:
            out.append(rec)
            continue
        spec = PlaneWaveSpec.from_dict(rec.spec)
        measure = build_measure(spec, resolution, np.array(rec.weights))
        steps = []
        status = SURVIVED_REFINEMENT
        for params in levels:
            v = check_pair(measure, rec.g, params, gamma, tol_conv=tol_conv, max_iter=max_iter)
            steps.append({"L": params.L, "dir_bounds": [params.bound_p, params.bound_q],
                          "margin": v.margin, "status": v.status.value, "iterations": v.iterations})
            if v.status is Status.CERTIFIED:
                status = REFINED_CERTIFIED
                break
        out.append(replace(rec, status=status, refinement=rec.refinement + steps))
    return out


# --- reporting ---------------------------------------------------------------

def summarize(records: list[TrialRecord], m: int | None = None, N: int | None = None, gamma: float = DEFAULT_GAMMA,
              timings: list[float] | None = None) -> dict:
    """Counts and percentages of flagged pairs and measures."""
    pairs = len(records)
    measures = {r.measure for r in records}

    # refined records keep their screening margin
    susp = [r for r in records if r.margin > MARGIN_TOL]
    suff = [r for r in susp if r.margin > gamma]
    pct = lambda k, n: 100.0 * k / n if n else 0.0
    report = {
        "m": m, "N": N, "gamma": gamma,
        "pairs": pairs, "measures": len(measures),
        "suspicious_pairs": len(susp), "suspicious_pct": pct(len(susp), pairs),
        "sufficiently_suspicious_pairs": len(suff), "sufficiently_suspicious_pct": pct(len(suff), pairs),
        "suspicious_measures": len({r.measure for r in susp}),
        "sufficiently_suspicious_measures": len({r.measure for r in suff}),
        "refined_certified": sum(r.status == REFINED_CERTIFIED for r in records),
        "survived_refinement": sum(r.status == SURVIVED_REFINEMENT for r in records),
        "max_margin": max((r.margin for r in records), default=None),
        "mean_iterations": float(np.mean([r.iterations for r in records])) if records else 0.0,
    }
    if timings:
        report["wall_time_total"] = float(np.sum(timings))
        report["wall_time_mean"] = float(np.mean(timings))
    return report


def read_timings(out: str | os.PathLike) -> list[float]:
    p = Path(str(out) + ".timings")
    if not p.exists():
        return []
    return [json.loads(x)["wall_time"] for x in p.read_text().splitlines() if x]


def format_table(report: dict) -> str:
    rows = [
        ("m, N", f"{report['m']}, {report['N']}"),
        ("measures / pairs", f"{report['measures']} / {report['pairs']}"),
        ("suspicious pairs", f"{report['suspicious_pairs']} ({report['suspicious_pct']:.2f}%)"),
        (f"margin > {report['gamma']}", f"{report['sufficiently_suspicious_pairs']} "
                                        f"({report['sufficiently_suspicious_pct']:.2f}%)"),
        ("suspicious measures", str(report["suspicious_measures"])),
        ("sufficiently suspicious measures", str(report["sufficiently_suspicious_measures"])),
        ("refined certified", str(report["refined_certified"])),
        ("survived refinement", str(report["survived_refinement"])),
    ]
    if report["max_margin"] is not None:
        rows.append(("max margin", f"{report['max_margin']:.4g}"))
    if "wall_time_total" in report:
        rows.append(("wall time (s)", f"{report['wall_time_total']:.1f}"))
    w = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{w}}  {v}" for k, v in rows)
