"""Command-line entry point: ``pedas {fit,plan,run,compare}``.

Exit codes: 0 success, 1 usage, 2 validation (bad input files or values),
3 runtime (simulation or solver failure).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__, data_path
from .config import Configs, load_configs
from .planner import dp_stage_costs, enumerate_paths_cost
from .scenario import ScenarioError, load_scenario
from .sim import (DriverModel, RunJob, RunMode, SimSetup, SimulationError, TripMetrics,
                  _atomic_write, compare_runs, compute_metrics, prepare, run_batch, scenario_vehicle)
from .vehicle import (VehicleParams, coeffs_to_dict, fit_power_map, linearized, load_vehicle,
                      params_to_dict)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
DRIVERS = ("cautious", "normal", "sporty", "ideal")
ENUM_PATH_LIMIT = 2_000_000  # plan prints the enumeration oracle cost below this many paths


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass(frozen=True)
class RunConfig:
    scenario: Path
    params: Path
    mpc_config: Optional[Path]
    driver: str
    seed: int
    out: Path
    modes: tuple
    assisted_driver: Optional[str] = None


# -- helpers ------------------------------------------------------------------------------

def _resolve(path: Optional[str], what: str) -> Optional[Path]:
    """Accept a file path or the name of a bundled data file."""
    if path is None:
        return None
    p = Path(path)
    if p.is_file():
        return p
    for name in (path, f"{path}.json"):
        q = data_path(name)
        if q.is_file():
            return q
    raise FileNotFoundError(f"{what} not found: {path}")


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(cfg: Configs, items: Sequence[str]) -> Configs:
    """Apply ``section.key=value`` scalar overrides."""
    for item in items or ():
        key, sep, val = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in ("mpc", "planner", "dp"):
            raise ValueError(f"override must look like mpc.key=value, got {item!r}")
        sub = getattr(cfg, section)
        if name not in sub.__dataclass_fields__:
            raise ValueError(f"unknown key {key!r}")
        value = _parse_scalar(val)
        if isinstance(value, (list, dict)):
            raise ValueError(f"override {key!r} must be a scalar")
        cfg = replace(cfg, **{section: replace(sub, **{name: value})})
    return cfg


def _configs(args) -> Configs:
    return _apply_overrides(load_configs(_resolve(args.mpc_config, "config")), args.set)


def _driver(style: str, dt: float) -> DriverModel:
    return DriverModel.ideal(dt) if style == "ideal" else DriverModel.for_style(style)


def _write_json(path: Path, doc) -> None:
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_grid(path: Path):
    if path.suffix.lower() == ".csv":
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"v", "F_t", "P"} <= set(rows[0]):
            raise ValueError(f"{path}: CSV grid needs columns v, F_t, P")
        return [(float(r["v"]), float(r["F_t"]), float(r["P"])) for r in rows], {}
    vf = load_vehicle(path)
    if not vf.grid:
        raise ValueError(f"{path}: no 'power_map_grid' section")
    return vf.grid, vf.raw


# -- subcommands ------------------------------------------------------------------------------

def cmd_fit(args) -> int:
    if not (args.grid or args.params):
        raise UsageError("fit needs --grid or --params")
    grid_path = _resolve(args.grid or args.params, "grid file")
    grid, raw = _read_grid(grid_path)
    fit = fit_power_map(grid)
    params_path = _resolve(args.params, "params file") if args.params else (
        None if grid_path.suffix.lower() == ".csv" else grid_path)
    doc = dict(raw) if params_path in (None, grid_path) else dict(load_vehicle(params_path).raw)
    doc["power_map"] = coeffs_to_dict(fit.coeffs)
    doc["power_map_fit"] = {"rms_residual_w": fit.rms_residual, "max_residual_w": fit.max_residual,
                            "max_power_w": fit.max_power}
    if args.v_range:
        if "vehicle" not in doc:
            raise ValueError("--v-range needs a 'vehicle' section in the params file")
        doc["vehicle"] = params_to_dict(linearized(VehicleParams(**doc["vehicle"]), *args.v_range))
    if args.out is None and params_path is None:
        raise UsageError("fit from a CSV grid needs --out or --params")
    out = Path(args.out) if args.out else params_path
    _write_json(out, doc)
    rel = fit.rms_residual / fit.max_power if fit.max_power else 0.0
    print(f"fitted {len(grid)} points -> {out}")
    for k, v in coeffs_to_dict(fit.coeffs).items():
        print(f"  {k} = {v:.10g}")
    print(f"  rms residual {fit.rms_residual:.3f} W ({100 * rel:.2f}% of max power), "
          f"max residual {fit.max_residual:.3f} W")
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _configs(args)
    scenario = load_scenario(_resolve(args.scenario, "scenario"))
    vf = load_vehicle(_resolve(args.params, "params file"))
    if vf.coeffs is None:
        raise ValueError("params file has no power_map coefficients; run 'pedas fit' first")
    setup = prepare(scenario, vf.params, vf.coeffs, cfg.mpc, cfg.dp, cfg.planner)
    prof = setup.dp_profile
    vmin, vmax = prof.envelope._eval(prof.positions)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["position_m", "v_min", "v_max", "v_dp"])
    for row in zip(prof.positions, vmin, vmax, prof.speeds):
        w.writerow([f"{x:.10g}" for x in row])
    out = Path(args.out)
    if out.suffix.lower() != ".csv":
        out = out / f"{scenario.label}_plan.csv"
    _atomic_write(out, buf.getvalue())
    print(f"dp profile: {len(prof.positions)} nodes -> {out}")
    print(f"dp cost {prof.cost:.10g}")
    oracle = _enumeration_cost(scenario, setup.params, vf.coeffs, cfg, prof)
    if oracle is not None:
        print(f"enumeration oracle cost {oracle:.10g}")
    return EXIT_OK


def _enumeration_cost(scenario, params, coeffs, cfg: Configs, prof) -> Optional[float]:
    grid = np.asarray(cfg.dp.speed_grid, dtype=float)
    lo, hi = prof.envelope._eval(prof.positions)
    adm = [grid[(grid >= a - 1e-9) & (grid <= b + 1e-9)] for a, b in zip(lo, hi)]
    if sum(np.log(max(a.size, 1)) for a in adm) > np.log(ENUM_PATH_LIMIT):
        return None
    p = prof.positions
    costs = [dp_stage_costs(adm[k], adm[k + 1], p[k + 1] - p[k],
                            float(scenario.route.grade_at(0.5 * (p[k] + p[k + 1]))), params, coeffs,
                            cfg.dp) for k in range(len(p) - 1)]
    return enumerate_paths_cost(costs)


def _run_config(args, modes) -> RunConfig:
    return RunConfig(_resolve(args.scenario, "scenario"), _resolve(args.params, "params file"),
                     _resolve(args.mpc_config, "config"), args.driver, args.seed, Path(args.out),
                     modes, getattr(args, "assisted_driver", None))


def _simulate(rc: RunConfig, cfg: Configs, jobs_modes: List[RunMode]):
    scenario = load_scenario(rc.scenario)
    vf = load_vehicle(rc.params)
    if vf.coeffs is None:
        raise ValueError("params file has no power_map coefficients; run 'pedas fit' first")
    if RunMode.ASSISTED in jobs_modes:
        setup = prepare(scenario, vf.params, vf.coeffs, cfg.mpc, cfg.dp, cfg.planner)
    else:
        setup = SimSetup(scenario_vehicle(vf.params, scenario), vf.coeffs, cfg.mpc, None, cfg.planner)
    dt = cfg.mpc.dT
    jobs = []
    for m in jobs_modes:
        style = rc.assisted_driver if m is RunMode.ASSISTED and rc.assisted_driver else rc.driver
        jobs.append(RunJob(scenario, m, _driver(style, dt), rc.seed))
    logs = run_batch(jobs, setup, max_workers=len(jobs))
    metrics = [compute_metrics(lg, scenario, vf.coeffs) for lg in logs]
    return scenario, logs, metrics


def _emit_runs(rc: RunConfig, scenario, logs, metrics, tags) -> None:
    for lg, m, tag in zip(logs, metrics, tags):
        lg.write_csv(rc.out / f"{scenario.label}_{tag}_trace.csv")
        _write_json(rc.out / f"{scenario.label}_{tag}_metrics.json", m.to_dict())
        print(f"{tag}: energy {m.energy_kwh:.4f} kWh, time {m.trip_time_s:.1f} s, "
              f"violation time {m.speed_violation_time_s:.1f} s, "
              f"green crossings {m.signals_crossed_green}/{m.signals_encountered}")


def cmd_run(args) -> int:
    modes = {"baseline": (RunMode.BASELINE,), "assisted": (RunMode.ASSISTED,),
             "both": (RunMode.BASELINE, RunMode.ASSISTED)}[args.mode]
    rc = _run_config(args, modes)
    scenario, logs, metrics = _simulate(rc, _configs(args), list(modes))
    _emit_runs(rc, scenario, logs, metrics, [m.value.lower() for m in modes])
    return EXIT_OK


def cmd_compare(args) -> int:
    out = Path(args.out)
    if args.baseline_metrics or args.assisted_metrics:
        if not (args.baseline_metrics and args.assisted_metrics):
            raise UsageError("compare needs both --baseline-metrics and --assisted-metrics")
        base, assi = (TripMetrics.from_dict(json.loads(Path(p).read_text(encoding="utf-8")))
                      for p in (args.baseline_metrics, args.assisted_metrics))
    else:
        if args.scenario is None:
            raise UsageError("compare needs --scenario or two metrics files")
        modes = {"both": (RunMode.BASELINE, RunMode.ASSISTED),
                 "baseline": (RunMode.BASELINE, RunMode.BASELINE),
                 "assisted": (RunMode.ASSISTED, RunMode.ASSISTED)}[args.mode]
        rc = _run_config(args, modes)
        scenario, logs, metrics = _simulate(rc, _configs(args), list(modes))
        tags = ("baseline", "assisted") if args.mode == "both" else (f"{args.mode}_a", f"{args.mode}_b")
        _emit_runs(rc, scenario, logs, metrics, tags)
        base, assi = metrics
    report = compare_runs(base, assi)
    _write_json(out / f"{report.label}_comparison.json", report.to_dict())
    print(report.table())
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pedas", description="Eco-driving speed advisory simulator.")
    p.add_argument("--version", action="version", version=f"pedas {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver warnings")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", help="scenario JSON (path or bundled name)")
        sp.add_argument("--params", default="nissan_leaf_like.json",
                        help="vehicle params JSON (default: bundled nissan_leaf_like.json)")
        sp.add_argument("--mpc-config", help="config JSON with mpc/planner/dp sections")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one scalar config value (repeatable)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=".", help="output directory (or .csv file for plan)")

    f = sub.add_parser("fit", help="fit power-map coefficients from a (v, F_t, P) grid")
    f.add_argument("--grid", help="grid file: vehicle JSON with power_map_grid, or CSV v,F_t,P")
    f.add_argument("--params", help="params file to update (default: the grid file)")
    f.add_argument("--out", help="output params file (default: update in place)")
    f.add_argument("--v-range", nargs=2, type=float, metavar=("LO", "HI"),
                   help="also relinearise p1..p4 over this speed range")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fit)

    pl = sub.add_parser("plan", help="export the DP profile and allowed-speed envelope as CSV")
    common(pl)
    pl.set_defaults(func=cmd_plan)

    for name, func, default_mode, help_ in (
            ("run", cmd_run, "assisted", "simulate one trip and write trace + metrics"),
            ("compare", cmd_compare, "both", "run baseline and assisted and report KPI deltas")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--driver", choices=DRIVERS, default="normal")
        sp.add_argument("--mode", choices=("baseline", "assisted", "both"), default=default_mode)
        sp.add_argument("--assisted-driver", choices=DRIVERS,
                        help="driver style for assisted runs (default: --driver)")
        if name == "compare":
            sp.add_argument("--baseline-metrics", help="compare saved metrics instead of running")
            sp.add_argument("--assisted-metrics")
        sp.set_defaults(func=func)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "command", None) in ("plan", "run") and args.scenario is None:
            raise UsageError(f"pedas {args.command}: --scenario is required")
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"pedas: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ScenarioError, ValueError, KeyError, TypeError, FileNotFoundError,
            json.JSONDecodeError) as e:
        print(f"pedas: invalid input: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SimulationError, RuntimeError, OSError, ArithmeticError) as e:
        print(f"pedas: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
