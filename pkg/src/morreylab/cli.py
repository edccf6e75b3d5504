"""Command line entry point: ``morreylab <subcommand> [options]``.

Every file written starts with a one-line JSON header holding the format
name, version and the effective configuration, so a run can be repeated
from its own output.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config, merge
from .cube import SurveyRow, connection_survey
from .envelope import GridFunction, ks_envelope, spike_function
from .grid import Grid, dump_table, generate_directions
from .laminate import (FUNCTIONS, DEFAULT_GAMMA, RefinementSchedule, check_laminate, default_params,
                       jensen_fixed_function)
from .measure import (DEFAULT_RESOLUTION, PlaneWaveSpec, UnsatisfiableSampling, build_measure, is_degenerate,
                      sample_spec, weight_tolerance)
from .search import (ConfigMismatch, PersistenceError, SearchConfig, examine_suspicious, format_table,
                     read_timings, run_search, summarize)

log = logging.getLogger("morreylab")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVALID = 3
EXIT_MISMATCH = 4
EXIT_MEMORY = 5
EXIT_SAMPLING = 6
EXIT_IO = 7

DEFAULT_MEMORY_CAP_GB = 1.0


class MemoryRefused(RuntimeError):
    pass


def header(kind: str, command: str, config: dict) -> str:
    return json.dumps({"format": f"morreylab-{kind}", "version": 1, "tool_version": __version__,
                       "command": command, "config": config}, sort_keys=True)


def write_json(path: Path, kind: str, command: str, config: dict, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(header(kind, command, config) + "\n")
        fh.write(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _common(args, section: str, defaults: dict) -> dict:
    flags = {k: getattr(args, k, None) for k in ("seed", "threads", "m", "N", "L", "gamma", "resolution")}
    if getattr(args, "pin_phases", False):
        flags["pin_phases"] = True
    own = {k: v for k, v in vars(args).items() if k in defaults and k not in flags}
    flags.update(own)
    cfg = merge(defaults, load_config(args.config, section, set(defaults) | set(flags)), flags)
    if cfg.get("threads"):
        import numba
        numba.set_num_threads(int(cfg["threads"]))
    return cfg


def _load_spec(cfg: dict) -> PlaneWaveSpec:
    if cfg.get("spec"):
        d = json.loads(Path(cfg["spec"]).read_text())
        return PlaneWaveSpec.from_dict(d.get("spec", d))
    return sample_spec(_rng(cfg["seed"]), cfg["m"], cfg["N"], cfg["L"], pin_phases=bool(cfg.get("pin_phases")))


def _out(cfg: dict) -> Path:
    p = Path(cfg.get("out") or ".")
    p.mkdir(parents=True, exist_ok=True)
    return p


# --- subcommands -------------------------------------------------------------

def cmd_weights(args) -> int:
    cfg = _common(args, "weights", {"seed": 0, "m": 2, "N": 3, "L": 25, "resolution": DEFAULT_RESOLUTION,
                                    "spec": None, "pin_phases": False, "out": None})
    spec = _load_spec(cfg)
    meas = build_measure(spec, cfg["resolution"])
    report = {
        "spec": spec.to_dict(),
        "support": meas.points.tolist(),
        "weights": meas.weights.tolist(),
        "barycenter_norm": float(np.linalg.norm(meas.barycenter())),
        "degenerate": is_degenerate(meas.weights, cfg["resolution"]),
        "weight_sum": float(meas.weights.sum()),
        "tolerance_bound": weight_tolerance(spec, cfg["resolution"]),
    }
    print(header("weights", "weights", cfg))
    for e, (X, w) in enumerate(zip(meas.points, meas.weights)):
        print(f"eps={e:0{spec.N}b}  nu={w:.6f}  X={np.round(X, 6).tolist()}")
    print(f"barycenter norm {report['barycenter_norm']:.3g}  degenerate {report['degenerate']}  "
          f"tolerance bound {report['tolerance_bound']:.3g}")
    if cfg.get("out"):
        write_json(_out(cfg) / "weights.json", "weights", "weights", cfg, report)
    return EXIT_OK


def memory_estimate(m: int, L: int, n: int = 2) -> tuple[int, int]:
    """Grid points and bytes for the two value tables of a sweep."""
    points = L ** (m * n)
    return points, 2 * 8 * points


def cmd_convexify(args) -> int:
    cfg = _common(args, "convexify", {"seed": 0, "m": 2, "N": 3, "L": 25, "resolution": DEFAULT_RESOLUTION,
                                      "fn": "spike", "bound_p": None, "bound_q": None, "limit": None,
                                      "multiples": "dyadic", "tol_conv": 1e-7, "max_iter": 10_000,
                                      "memory_cap_gb": DEFAULT_MEMORY_CAP_GB, "checkpoint": None,
                                      "checkpoint_every": 50, "dump": None, "spec": None, "pin_phases": False,
                                      "out": None})
    m, L = cfg["m"], cfg["L"]
    points, nbytes = memory_estimate(m, L)
    print(f"grid m={m} L={L}: {points} points, {nbytes / 2**30:.3f} GiB for two tables", file=sys.stderr)
    if nbytes > cfg["memory_cap_gb"] * 2**30:
        raise MemoryRefused(f"estimated {nbytes / 2**30:.2f} GiB exceeds the cap of {cfg['memory_cap_gb']} GiB")
    params = default_params(m, L)
    bp = params.bound_p if cfg["bound_p"] is None else cfg["bound_p"]
    bq = params.bound_q if cfg["bound_q"] is None else cfg["bound_q"]
    limit = params.limit if cfg["limit"] is None else cfg["limit"]
    multiples = cfg["multiples"] if cfg["multiples"] not in ("none", False) else False
    grid = Grid(m, 2, L)
    D = generate_directions(grid, bp, bq, multiples, limit)
    target = None
    if cfg["fn"] == "spike":
        spec = _load_spec(cfg)
        meas = build_measure(spec, cfg["resolution"])
        g = _rng(cfg["seed"] + 1).uniform(-1, 1, 2**spec.N)
        _, f = spike_function(grid, meas, g)
        target = meas.expectation(g)
    else:
        if cfg["fn"] not in FUNCTIONS:
            raise ValueError(f"unknown function {cfg['fn']!r}; known: {sorted(FUNCTIONS)}")
        f = GridFunction.from_callable(grid, FUNCTIONS[cfg["fn"]])
    res = ks_envelope(f, D, tol_conv=cfg["tol_conv"], max_iter=cfg["max_iter"], checkpoint=cfg["checkpoint"],
                      checkpoint_every=cfg["checkpoint_every"])
    summary = res.summary()
    summary.update({"points": points, "directions": D.count,
                    "max_drift": float(np.max(np.abs(res.final.values - f.values)))})
    if target is not None:
        summary["expectation"] = target
        summary["margin"] = res.value_at_barycenter - target
    print(header("envelope", "convexify", cfg))
    print(json.dumps(summary, sort_keys=True))
    if cfg.get("dump"):
        with open(cfg["dump"], "wb") as fh:
            dump_table(grid, res.final.values, fh, command="convexify", config=cfg)
    if cfg.get("out"):
        timing = {"wall_time": summary.pop("wall_time")}
        write_json(_out(cfg) / "envelope.json", "envelope", "convexify", cfg, {**summary, "timings": timing})
    return EXIT_OK


def cmd_search(args) -> int:
    base = SearchConfig().to_dict()
    cfg = _common(args, "search", {**base, "out": None, "threads": None, "table3": False, "refine_gamma_only": False})
    if cfg.pop("table3"):
        M = SearchConfig.table3(cfg["N"])
        for k in ("M_n", "M_c", "M_a", "M_g"):
            flag = getattr(args, k, None)
            cfg[k] = flag if flag is not None else getattr(M, k)
    if cfg.pop("refine_gamma_only"):
        cfg["refine_all"] = False
    out = _out(cfg)
    threads = cfg.pop("threads", None)
    cfg.pop("out", None)
    sc = SearchConfig.from_dict({k: v for k, v in cfg.items() if k in base})
    log_path = out / "trials.jsonl"
    records = list(run_search(sc, log_path, resume=not args.fresh, threads=threads))
    refined = examine_suspicious(records, sc.schedule(), sc.gamma, sc.refine_all, sc.resolution, sc.tol_conv,
                                 sc.max_iter)
    with open(out / "refined.jsonl", "w") as fh:
        fh.write(header("refined", "search", sc.to_dict()) + "\n")
        for r in refined:
            if r.refinement:
                fh.write(r.to_json() + "\n")
    report = summarize(refined, sc.m, sc.N, sc.gamma)
    timings = read_timings(log_path)
    write_json(out / "summary.json", "summary", "search", sc.to_dict(),
               {**report, "timings": {"wall_time_total": float(np.sum(timings)) if timings else 0.0}})
    print(format_table(report))
    return EXIT_OK


def cmd_connections(args) -> int:
    cfg = _common(args, "connections", {"seed": 0, "m": 2, "N": 3, "L": 25, "samples": 500, "law": "grid",
                                        "freq_bound": 25, "per_config": False, "out": None})
    per = [] if cfg["per_config"] else None
    row = connection_survey(cfg["seed"], cfg["m"], cfg["N"], cfg["samples"], cfg["law"], cfg["L"],
                            cfg["freq_bound"], per)
    out = _out(cfg)
    with open(out / "connections.csv", "w", newline="") as fh:
        fh.write(header("connections", "connections", cfg) + "\n")
        w = csv.writer(fh)
        w.writerow(SurveyRow.CSV_FIELDS)
        w.writerow(row.csv_row())
    if per is not None:
        with open(out / "connections.jsonl", "w") as fh:
            fh.write(header("connection-lists", "connections", cfg) + "\n")
            for item in per:
                fh.write(json.dumps(item, sort_keys=True) + "\n")
    v, e = row.table_cell()
    print(f"m={row.m} N={row.N} samples={row.samples}: vertex {v}  edge {e}")
    return EXIT_OK


def cmd_laminate(args) -> int:
    cfg = _common(args, "laminate", {"seed": 0, "m": 2, "N": 3, "L": 13, "resolution": DEFAULT_RESOLUTION,
                                     "gamma": DEFAULT_GAMMA, "depth": 1, "g_samples": 8, "net_base": 8,
                                     "spec": None, "pin_phases": False, "out": None})
    spec = _load_spec(cfg)
    meas = build_measure(spec, cfg["resolution"])
    schedule = RefinementSchedule.ladder(default_params(spec.m, cfg["L"]), cfg["depth"])
    res = check_laminate(meas, schedule, cfg["g_samples"], cfg["net_base"], _rng(cfg["seed"] + 1), cfg["gamma"])
    payload = {"spec": spec.to_dict(), "weights": meas.weights.tolist(), **res.to_dict()}
    print(header("laminate", "laminate", cfg))
    print(json.dumps({k: payload[k] for k in ("status", "level", "epsilon", "margin", "tested", "note")}))
    if cfg.get("out"):
        write_json(_out(cfg) / "laminate.json", "laminate", "laminate", cfg, payload)
    return EXIT_OK


def cmd_jensen(args) -> int:
    cfg = _common(args, "jensen", {"seed": 0, "m": 2, "N": 3, "L": 25, "resolution": DEFAULT_RESOLUTION,
                                   "fn": "det", "samples": 100, "pin_phases": False, "out": None})
    if cfg["fn"] not in FUNCTIONS:
        raise ValueError(f"unknown function {cfg['fn']!r}; known: {sorted(FUNCTIONS)}")
    rng = _rng(cfg["seed"])
    rows = []
    for k in range(cfg["samples"]):
        spec = sample_spec(rng, cfg["m"], cfg["N"], cfg["L"], pin_phases=bool(cfg["pin_phases"]))
        gap = jensen_fixed_function(cfg["fn"], np.zeros((cfg["m"], 2)), spec, resolution=cfg["resolution"])
        rows.append({"sample": k, "spec": spec.to_dict(), "gap": gap})
    gaps = np.array([r["gap"] for r in rows])
    print(header("jensen", "jensen", cfg))
    print(f"{cfg['fn']}: {len(rows)} samples, max gap {gaps.max():.3g}, min gap {gaps.min():.3g}")
    if cfg.get("out"):
        with open(_out(cfg) / "jensen.jsonl", "w") as fh:
            fh.write(header("jensen", "jensen", cfg) + "\n")
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [common] and per-command sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--m", type=int)
    common.add_argument("--N", type=int)
    common.add_argument("--L", type=int)
    common.add_argument("--gamma", type=float)
    common.add_argument("--resolution", type=int)
    common.add_argument("--pin-phases", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="morreylab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("weights", parents=[common], help="support matrices and torus weights")
    s.add_argument("--spec", help="JSON spec file")
    s.set_defaults(func=cmd_weights)

    s = sub.add_parser("convexify", parents=[common], help="discrete rank-one convex envelope")
    s.add_argument("--fn", help="'spike' (random measure and g) or a registered function")
    s.add_argument("--spec")
    s.add_argument("--bound-p", type=int)
    s.add_argument("--bound-q", type=int)
    s.add_argument("--limit", type=int)
    s.add_argument("--multiples", choices=["dyadic", "none"])
    s.add_argument("--tol-conv", type=float)
    s.add_argument("--max-iter", type=int)
    s.add_argument("--memory-cap-gb", type=float)
    s.add_argument("--checkpoint")
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--dump", help="write the final table here")
    s.set_defaults(func=cmd_convexify)

    s = sub.add_parser("search", parents=[common], help="randomized counterexample search")
    s.add_argument("--M_n", "--Mn", dest="M_n", type=int)
    s.add_argument("--M_c", "--Mc", dest="M_c", type=int)
    s.add_argument("--M_a", "--Ma", dest="M_a", type=int)
    s.add_argument("--M_g", "--Mg", dest="M_g", type=int)
    s.add_argument("--table3", action="store_true", default=None, help="published sample counts for this N")
    s.add_argument("--refine-depth", type=int)
    s.add_argument("--refine-gamma-only", action="store_true", default=None)
    s.add_argument("--freq-bound", type=int)
    s.add_argument("--bound-p", type=int)
    s.add_argument("--bound-q", type=int)
    s.add_argument("--limit", type=int)
    s.add_argument("--max-iter", type=int)
    s.add_argument("--trial-time-cap", type=float)
    s.add_argument("--fresh", action="store_true", help="overwrite instead of resuming")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("connections", parents=[common], help="rank-one connection census")
    s.add_argument("--samples", type=int)
    s.add_argument("--law", choices=["grid", "real", "integer"])
    s.add_argument("--freq-bound", type=int)
    s.add_argument("--per-config", action="store_true", default=None)
    s.set_defaults(func=cmd_connections)

    s = sub.add_parser("laminate", parents=[common], help="laminate semidecision for one measure")
    s.add_argument("--spec")
    s.add_argument("--depth", type=int)
    s.add_argument("--g-samples", type=int)
    s.add_argument("--net-base", type=int)
    s.set_defaults(func=cmd_laminate)

    s = sub.add_parser("jensen", parents=[common], help="Jensen gaps of a fixed function")
    s.add_argument("--fn")
    s.add_argument("--samples", type=int)
    s.set_defaults(func=cmd_jensen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MemoryRefused as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_MEMORY
    except ConfigMismatch as exc:
        print(f"config mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except UnsatisfiableSampling as exc:
        print(f"sampling failed: {exc}", file=sys.stderr)
        return EXIT_SAMPLING
    except (PersistenceError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
