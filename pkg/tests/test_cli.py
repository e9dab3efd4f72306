"""Command-line interface: fit, plan, run and compare, exit codes and reproducibility."""

from __future__ import annotations

import csv
import json
import re

import numpy as np
import pytest

from pedas import data_path
from pedas.cli import main
from pedas.scenario import LimitSegment, RouteProfile, Scenario, StopSign, save_scenario
from pedas.vehicle import PowerMapCoeffs, _power_design, load_vehicle


def write_scenario(tmp_path, name="mini", length=300.0, vmax=13.89, **kw):
    sc = Scenario(RouteProfile(length, limits=(LimitSegment(0.0, length, 0.0, vmax),)), label=name,
                  **kw)
    path = tmp_path / f"{name}.json"
    save_scenario(sc, path)
    return path


def write_config(tmp_path, **dp):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"dp": dp}))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- fit ----------------------------------------------------------------------------------

def test_fit_recovers_exact_polynomial(tmp_path):
    truth = np.array([300.0, 12.0, 0.05, 1.1, 0.8, 2e-5])
    v, F = np.meshgrid(np.linspace(0, 30, 7), np.linspace(0, 5000, 6))
    v, F = v.ravel(), F.ravel()
    grid = tmp_path / "grid.csv"
    grid.write_text("v,F_t,P\n" + "".join(f"{float(a)!r},{float(b)!r},{float(c)!r}\n"
                                           for a, b, c in zip(v, F, _power_design(v, F) @ truth)))
    out = tmp_path / "coeffs.json"
    assert main(["fit", "--grid", str(grid), "--out", str(out)]) == 0
    got = PowerMapCoeffs(**json.loads(out.read_text())["power_map"]).as_array()
    np.testing.assert_allclose(got, truth, rtol=1e-9)


def test_fit_physical_map_quality(tmp_path):
    out = tmp_path / "leaf.json"
    assert main(["fit", "--grid", str(data_path("nissan_leaf_like.json")), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())["power_map_fit"]
    assert rep["rms_residual_w"] < 0.03 * rep["max_power_w"]
    assert load_vehicle(out).coeffs is not None


def test_fit_rank_deficient_grid(tmp_path, capsys):
    grid = tmp_path / "flat.csv"
    grid.write_text("v,F_t,P\n" + "".join(f"{v},{100 * v},1.0\n" for v in range(5)))
    assert main(["fit", "--grid", str(grid), "--out", str(tmp_path / "x.json")]) == 2
    assert "rank" in capsys.readouterr().err.lower()


# -- plan ---------------------------------------------------------------------------------

def test_plan_singleton_grid_constant(tmp_path):
    sc = write_scenario(tmp_path)
    cfg = write_config(tmp_path, ds=50.0, speed_grid=[10.0])
    out = tmp_path / "plan.csv"
    assert main(["plan", "--scenario", str(sc), "--mpc-config", str(cfg), "--out", str(out)]) == 0
    assert {row["v_dp"] for row in read_csv(out)} == {"10"}


def test_plan_time_only_runs_at_limit(tmp_path):
    sc = write_scenario(tmp_path, vmax=12.0)
    cfg = write_config(tmp_path, ds=50.0, w_energy=0.0, max_accel=100.0,
                       speed_grid=list(np.arange(0.0, 16.01, 1.0)))
    out = tmp_path / "plan.csv"
    assert main(["plan", "--scenario", str(sc), "--mpc-config", str(cfg), "--out", str(out)]) == 0
    assert {float(row["v_dp"]) for row in read_csv(out)} == {12.0}


def test_plan_footer_matches_enumeration(tmp_path, capsys):
    sc = write_scenario(tmp_path)
    cfg = write_config(tmp_path, ds=50.0, speed_grid=[6.0, 8.0, 10.0, 12.0, 13.5])
    assert main(["plan", "--scenario", str(sc), "--mpc-config", str(cfg),
                 "--out", str(tmp_path / "p.csv")]) == 0
    text = capsys.readouterr().out
    dp = float(re.search(r"dp cost (\S+)", text).group(1))
    enum = float(re.search(r"enumeration oracle cost (\S+)", text).group(1))
    assert dp == enum


# -- run ----------------------------------------------------------------------------------

def test_run_empty_scenario(tmp_path):
    sc = write_scenario(tmp_path)
    assert main(["run", "--scenario", str(sc), "--out", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "mini_assisted_trace.csv")
    assert float(rows[-1]["s"]) >= 300.0
    assert json.loads((tmp_path / "o" / "mini_assisted_metrics.json").read_text())["energy_kwh"] > 0


def test_run_stop_sign_dwell(tmp_path):
    sc = write_scenario(tmp_path, stop_signs=(StopSign(200.0),))
    assert main(["run", "--scenario", str(sc), "--driver", "ideal", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "mini_assisted_trace.csv")
    at_rest = [float(r["t"]) for r in rows if float(r["v"]) == 0.0 and 150.0 < float(r["s"]) <= 200.0]
    assert at_rest and at_rest[-1] - at_rest[0] >= 3.0 - 1e-9


def test_run_same_seed_identical_files(tmp_path):
    sc = write_scenario(tmp_path, stop_signs=(StopSign(200.0),))
    for d in ("a", "b"):
        assert main(["run", "--scenario", str(sc), "--mode", "both", "--seed", "5",
                     "--out", str(tmp_path / d)]) == 0
    for name in ("mini_baseline_trace.csv", "mini_assisted_trace.csv", "mini_assisted_metrics.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# -- compare ------------------------------------------------------------------------------

def test_compare_identical_modes_zero(tmp_path):
    sc = write_scenario(tmp_path)
    assert main(["compare", "--scenario", str(sc), "--mode", "baseline", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "mini_comparison.json").read_text())
    assert rep["energy_saving_pct"] == 0.0 and rep["green_crossing_delta"] == 0
    assert rep["violation_time_reduction_pct"] == 0.0


def test_compare_urban_highway_saves_energy(tmp_path):
    assert main(["compare", "--scenario", "urban_highway", "--driver", "sporty",
                 "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "urban_highway_comparison.json").read_text())["energy_saving_pct"] > 0


def test_compare_mismatched_scenarios(tmp_path, capsys):
    paths = []
    for label in ("one", "two"):
        sc = write_scenario(tmp_path, name=label)
        assert main(["run", "--scenario", str(sc), "--mode", "baseline", "--out", str(tmp_path)]) == 0
        paths.append(str(tmp_path / f"{label}_baseline_metrics.json"))
    assert main(["compare", "--baseline-metrics", paths[0], "--assisted-metrics", paths[1],
                 "--out", str(tmp_path)]) == 2
    assert "mismatch" in capsys.readouterr().err


# -- exit codes -----------------------------------------------------------------------------

@pytest.mark.parametrize("argv", [[], ["bogus"], ["run"], ["run", "--scenario", "x", "--driver", "wild"],
                                  ["fit"]])
def test_usage_errors(argv):
    assert main(argv) == 1


def test_invalid_scenario_exit_two(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"route": {"length_m": -5}}')
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path)]) == 2


def test_missing_file_exit_two(tmp_path):
    assert main(["run", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_unknown_override_exit_two(tmp_path):
    sc = write_scenario(tmp_path)
    assert main(["run", "--scenario", str(sc), "--set", "mpc.nope=1", "--out", str(tmp_path)]) == 2


def test_unfinished_trip_exit_three(tmp_path, capsys):
    sc = write_scenario(tmp_path, length=100.0, stop_signs=(StopSign(50.0, dwell_s=1e5),))
    assert main(["run", "--scenario", str(sc), "--mode", "baseline", "--out", str(tmp_path)]) == 3
    assert "not finished" in capsys.readouterr().err
