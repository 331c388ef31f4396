"""``dualshield`` command line: precompute, simulate, batch.

Exit codes: 0 success, 2 configuration error, 3 file-format error,
4 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import export, provision
from .diffusion import PlannerConfig
from .grid import ValueFunctionFormatError, save
from .hj_solver import HV_REDUCED_COUNTS, STATIC_REDUCED_COUNTS, SolverDivergenceError
from .scenario import ScenarioError, ValueFunctionGrids, load_scenario
from .shield import QPError, ShieldConfig
from .sim import run_batch, run_trial, trial_seeds

logger = logging.getLogger("dualshield")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_RUNTIME = 0, 2, 3, 4

GRID_PRESETS = {
    "reduced": {"hv5d": HV_REDUCED_COUNTS, "static3d": STATIC_REDUCED_COUNTS},
    "full": {"hv5d": (100, 100, 64, 8, 8), "static3d": (100, 100, 8)},
}


class ConfigError(ValueError):
    pass


def _counts(text: str, n: int, what: str) -> tuple:
    try:
        c = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"{what}: expected {n} comma-separated integers, got {text!r}") from None
    if len(c) != n or min(c) < 2:
        raise ConfigError(f"{what}: expected {n} counts of at least 2, got {text!r}")
    return c


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", help="scenario JSON (default: shipped default scenario)")
    p.add_argument("--grid", help="value-function grid preset: reduced or full (default: scenario setting)")
    p.add_argument("--hv-counts", help="explicit 5-d HV grid counts, e.g. 50,50,32,5,5")
    p.add_argument("--static-counts", help="explicit 3-d static grid counts, e.g. 50,50,5")
    p.add_argument("--t-hj", type=float, help="value-function horizon [s]")
    p.add_argument("--samples", type=int, help="candidates per denoising step")
    p.add_argument("--denoise-steps", type=int, help="reverse-chain length from scratch")
    p.add_argument("--warm-steps", type=int, help="reverse-chain length after a warm start")
    p.add_argument("--lambda", dest="temperature", type=float, help="Gibbs temperature")
    p.add_argument("--gamma-cbf", type=float, help="shield class-K gain")
    p.add_argument("--no-shield", action="store_true", help="execute the planned control unfiltered")
    p.add_argument("--guidance", choices=("hj", "distance"), help="safety term used by the planner")
    p.add_argument("--vf-dir", help="value-function cache directory (default: $DUALSHIELD_VF_DIR)")


def build_scenario(args):
    scn = load_scenario(args.scenario)
    grids = scn.grids
    hv, st, t_hj = grids.hv_counts, grids.static_counts, grids.t_hj
    if args.grid:
        if args.grid not in GRID_PRESETS:
            raise ConfigError(f"--grid must be one of {sorted(GRID_PRESETS)}, got {args.grid!r}")
        hv, st = GRID_PRESETS[args.grid]["hv5d"], GRID_PRESETS[args.grid]["static3d"]
    if args.hv_counts:
        hv = _counts(args.hv_counts, 5, "--hv-counts")
    if args.static_counts:
        st = _counts(args.static_counts, 3, "--static-counts")
    if args.t_hj is not None:
        t_hj = args.t_hj
    scn.grids = ValueFunctionGrids(hv, st, t_hj)

    planner = scn.planner.to_dict()
    for flag, key in (("samples", "n_samples"), ("denoise_steps", "n_denoise"), ("warm_steps", "n_warm"),
                      ("temperature", "temperature"), ("guidance", "guidance")):
        if getattr(args, flag) is not None:
            planner[key] = getattr(args, flag)
    scn.planner = PlannerConfig.from_dict(planner)
    shield = scn.shield.to_dict()
    if args.gamma_cbf is not None:
        shield["gamma_cbf"] = args.gamma_cbf
    if args.no_shield:
        shield["enabled"] = False
    scn.shield = ShieldConfig.from_dict(shield)
    return scn


def _value_fns(scn, args):
    if not scn.shield.enabled and scn.planner.guidance == "distance":
        # nothing consumes them except the logged V_min; use them only if cached
        try:
            d = provision.vf_dir(args.vf_dir)
            names = [provision.vf_filename("hv5d", scn.grids.hv_counts, scn.grids.t_hj),
                     provision.vf_filename("static3d", scn.grids.static_counts, scn.grids.t_hj)]
            if not all((d / n).exists() for n in names):
                return None
        except OSError:
            return None
    return provision.value_functions(scn.grids, args.vf_dir)


def cmd_precompute(args) -> int:
    default = GRID_PRESETS[args.grid if args.grid in GRID_PRESETS else "reduced"][args.model]
    n = 5 if args.model == "hv5d" else 3
    if args.counts and args.counts not in GRID_PRESETS:
        counts = _counts(args.counts, n, "--grid")
    elif args.counts:
        counts = GRID_PRESETS[args.counts][args.model]
    else:
        counts = default
    if args.t_hj < 0:
        raise ConfigError("--t-hj must be non-negative")
    out = Path(args.out) if args.out else provision.vf_dir(args.vf_dir) / provision.vf_filename(args.model, counts,
                                                                                                 args.t_hj)
    t0 = time.perf_counter()
    vf = provision.build(args.model, counts, args.t_hj)
    wall = time.perf_counter() - t0
    save(vf, out)
    print(f"model      {args.model}")
    print(f"grid       {' x '.join(str(c) for c in counts)}")
    for ax, name in zip(vf.spec.axes, vf.meta.get("axis_names", [f"x{i}" for i in range(vf.ndim)])):
        print(f"  {name:<6} [{ax.lo:g}, {ax.hi:g}] n={ax.count}{' periodic' if ax.periodic else ''}")
    print(f"horizon    {args.t_hj:g} s")
    print(f"min V      {float(vf.values.min()):.6g}")
    print(f"max V      {float(vf.values.max()):.6g}")
    print(f"wall time  {wall:.2f} s")
    print(f"written    {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    scn = build_scenario(args)
    vfs = _value_fns(scn, args)
    r = run_trial(scn, args.seed, vfs, config_seed=args.config_seed)
    export_dir = Path(args.export_dir) if args.export_dir else None
    out = Path(args.out) if args.out else (export_dir or Path(".")) / f"trial_{args.seed}.json"
    export.write_json(out, r.to_dict())
    export.write_json(Path(str(out) + ".timing.json"), r.timing())
    if export_dir is not None:
        export.export_trial(r, scn, export_dir, stem=f"trial_{args.seed}")
    s = r.summary()
    print(f"seed {r.seed}  modes {','.join(r.modes)}  success {s['success']}  T_m {s['completion_time']}  "
          f"l_min {s['min_distance']}  collision {s['collision']}  jerk {s['avg_jerk']:.3f}  "
          f"T_c {r.mean_plan_time:.3f} s")
    print(f"written    {out}")
    return EXIT_OK


def cmd_batch(args) -> int:
    scn = build_scenario(args)
    if args.configs < 1 or args.trials < 1 or args.workers < 1:
        raise ConfigError("--configs, --trials and --workers must be at least 1")
    vfs = _value_fns(scn, args)
    rep = run_batch(scn, args.configs, args.trials, args.seed, vfs, workers=args.workers)
    out = Path(args.out or "batch_report.json")
    export.write_json(out, rep.to_dict())
    export.write_json(Path(str(out) + ".timing.json"), rep.timing())
    label = args.label or ("DualShield" if scn.shield.enabled and scn.planner.guidance == "hj" else
                           "MBD" if not scn.shield.enabled and scn.planner.guidance == "distance" else "custom")
    print(rep.summary_table(label))
    print(f"written    {out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualshield", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("precompute", help="solve and store a value function")
    p.add_argument("--model", choices=("hv5d", "static3d"), required=True)
    p.add_argument("--grid", "--counts", dest="counts",
                   help="grid counts (comma separated) or a preset: reduced, full (default reduced)")
    p.add_argument("--t-hj", type=float, default=1.0, help="horizon [s] (default 1.0)")
    p.add_argument("--out", help="output file (default: cache directory)")
    p.add_argument("--vf-dir", help="cache directory (default: $DUALSHIELD_VF_DIR)")
    p.set_defaults(func=cmd_precompute, grid=None)

    p = sub.add_parser("simulate", help="run one closed-loop trial")
    _add_scenario_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config-seed", type=int, help="seed for HV modes and speeds (default: --seed)")
    p.add_argument("--export-dir", help="write CSV traces and an SVG plot here")
    p.add_argument("--out", help="result JSON path (default trial_<seed>.json)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("batch", help="seeded batch evaluation with a summary table")
    _add_scenario_flags(p)
    p.add_argument("--configs", type=int, default=10, help="scenario configurations (default 10)")
    p.add_argument("--trials", type=int, default=10, help="trials per configuration (default 10)")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--label", help="method name for the summary row")
    p.add_argument("--out", help="report JSON path (default batch_report.json)")
    p.set_defaults(func=cmd_batch)
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, ScenarioError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueFunctionFormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (SolverDivergenceError, QPError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
