"""Run every bundled scenario for each driver style, Baseline against Assisted, and tabulate.

Usage: python3 scripts/run_experiment.py [--out results] [--seed 0] [--scenarios a b ...]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from pedas import data_path
from pedas.scenario import load_scenario
from pedas.sim import (DriverModel, RunJob, RunMode, compare_runs, compute_metrics, prepare,
                       run_batch)
from pedas.vehicle import load_vehicle

SCENARIOS = ("flat_cruise", "stop_sign", "signal_corridor", "car_following", "urban_highway")
STYLES = ("cautious", "normal", "sporty")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scenarios", nargs="+", default=SCENARIOS)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vf = load_vehicle(data_path("nissan_leaf_like.json"))

    rows, results = [], {}
    for name in args.scenarios:
        sc = load_scenario(data_path(f"{name}.json"))
        setup = prepare(sc, vf.params, vf.coeffs)
        jobs = [RunJob(sc, mode, DriverModel.for_style(style), args.seed)
                for style in STYLES for mode in (RunMode.BASELINE, RunMode.ASSISTED)]
        logs = run_batch(jobs, setup)
        metrics = [compute_metrics(lg, sc, setup.coeffs) for lg in logs]
        for i, style in enumerate(STYLES):
            base, assi = metrics[2 * i], metrics[2 * i + 1]
            rep = compare_runs(base, assi)
            results[f"{name}/{style}"] = rep.to_dict()
            rows.append((name, style, base.energy_kwh, assi.energy_kwh, rep.energy_saving_pct,
                         base.speed_violation_time_s, assi.speed_violation_time_s,
                         f"{base.signals_crossed_green}->{assi.signals_crossed_green}/"
                         f"{base.signals_encountered}"))
            logs[2 * i].write_csv(out / f"{name}_{style}_baseline_trace.csv")
            logs[2 * i + 1].write_csv(out / f"{name}_{style}_assisted_trace.csv")

    (out / "experiment.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    head = ("scenario", "driver", "E base kWh", "E assist kWh", "saving %", "viol base s",
            "viol assist s", "green")
    print("  ".join(f"{h:>14}" for h in head))
    for r in rows:
        print("  ".join(f"{x:>14.4f}" if isinstance(x, float) else f"{x:>14}" for x in r))


if __name__ == "__main__":
    main()
