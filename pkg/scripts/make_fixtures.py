"""Regenerate the bundled data files in src/pedas/data.

    python3 scripts/make_fixtures.py

Outputs are deterministic; rerunning rewrites identical files.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from pedas.scenario import (LimitSegment, Phase, PrecedingTrace, RouteProfile, Scenario, StopSign,
                            TrafficSignal, save_scenario, signal_phase_at)
from pedas.sim import DriverModel, DriverStyle, idm_accel
from pedas.vehicle import (ReferencePowerMap, VehicleParams, coeffs_to_dict, fit_power_map,
                           linearized, params_to_dict)

DATA = Path(__file__).resolve().parents[1] / "src" / "pedas" / "data"
URBAN = (8.33, 13.89)
KMH = 1 / 3.6


def _r(x, nd=6):
    return float(round(float(x), nd))


# -- vehicle ------------------------------------------------------------------------

def make_vehicle() -> dict:
    base = VehicleParams(m_v=1600.0, m_eq=1680.0, c_w=0.28, A_f=2.29, rho=1.2, c_r=0.0095,
                         F_b_max=10000.0, dF_t_max=300.0, F_t_peak=7000.0, P_max=80000.0)
    params = linearized(base, 0.0, 33.33)
    eta_v = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0]
    eta_f = [0.0, 500.0, 1000.0, 2000.0, 3000.0, 4000.0, 6000.0, 8000.0]
    eta = [[round(0.93 - 0.15 * math.exp(-F / 600.0) - 0.12 * math.exp(-v / 4.0)
                  - 0.05 * (F / 8000.0) ** 2, 3) for F in eta_f] for v in eta_v]
    ref = ReferencePowerMap(700.0, tuple(eta_v), tuple(eta_f), tuple(map(tuple, eta)))
    grid = [(_r(v), _r(F), _r(P, 4)) for v, F, P in ref.grid(params)]
    fit = fit_power_map(grid)
    vehicle = {k: (_r(v, 9) if isinstance(v, float) else v) for k, v in params_to_dict(params).items()}
    return {
        "vehicle": vehicle,
        "power_map": {k: float(v) for k, v in coeffs_to_dict(fit.coeffs).items()},
        "power_map_fit": {"rms_residual_w": _r(fit.rms_residual, 3),
                          "max_residual_w": _r(fit.max_residual, 3),
                          "max_power_w": _r(fit.max_power, 3)},
        "reference_map": {"p_aux_w": 700.0, "eta_v": eta_v, "eta_f": eta_f, "eta": eta},
        "power_map_grid": [list(row) for row in grid],
    }


# -- lead vehicle -------------------------------------------------------------------------

def lead_trace(route: RouteProfile, signals, stops, start_pos: float, t_end: float,
               v_init: float, exit_pos: float, seed: int, wobble: float = 0.0, dt: float = 0.2):
    """IDM lead car obeying signals and stop signs, with a slow speed-target wobble."""
    drv = DriverModel.for_style(DriverStyle.NORMAL)
    rng = np.random.default_rng(seed)
    phase0 = rng.uniform(0, 2 * math.pi)
    starts = [seg.start_m for seg in route.limits]
    s, v, t = start_pos, v_init, 0.0
    served, dwell = set(), 0.0
    rows = [(0.0, s, v)]
    while t < t_end and s < exit_pos:
        idx = max(0, int(np.searchsorted(starts, min(s, route.length_m), side="right")) - 1)
        vmax = route.limits[idx].v_max
        v0 = vmax * (0.92 + wobble * math.sin(0.03 * t + phase0))
        acc = idm_accel(v, v0, math.inf, 0.0, drv)
        for i, sig in enumerate(signals):
            d = sig.position_m - s
            if 0 < d < 200:
                ph, _ = signal_phase_at(sig, t)
                if ph is Phase.RED and v * v / (2 * drv.max_decel) <= d:
                    acc = min(acc, idm_accel(v, v0, d, v, drv))
                break
        for i, st in enumerate(stops):
            d = st.position_m - s
            if i not in served and 0 < d < 200:
                acc = min(acc, idm_accel(v, v0, d, v, drv))
                if d < 5.0 and v < 0.5:
                    acc = -10.0
                    if v == 0.0:
                        dwell += dt
                        if dwell >= st.dwell_s + 0.5:
                            served.add(i)
                            dwell = 0.0
                break
        v_new = max(0.0, v + max(acc, -8.0) * dt)
        s += 0.5 * (v + v_new) * dt
        v = v_new
        t = round(t + dt, 10)
        rows.append((t, _r(s, 4), _r(v, 5)))
    return rows


# -- scenarios ---------------------------------------------------------------------

def flat_cruise() -> Scenario:
    route = RouteProfile(3000.0, limits=(LimitSegment(0.0, 3000.0, *URBAN, "urban"),))
    return Scenario(route, label="flat_cruise")


def stop_sign() -> Scenario:
    route = RouteProfile(1500.0, limits=(LimitSegment(0.0, 1500.0, *URBAN, "urban"),))
    return Scenario(route, stop_signs=(StopSign(800.0),), label="stop_sign")


def signal_corridor() -> Scenario:
    route = RouteProfile(
        2500.0,
        elevation=((0.0, 0.0), (900.0, 0.0), (1000.0, 0.02), (1200.0, 0.02), (1300.0, 0.0),
                   (1700.0, 0.0), (1800.0, -0.015), (1950.0, 0.0)),
        curvature=((0.0, 0.0), (2150.0, 0.0), (2200.0, 0.02), (2250.0, 0.02), (2300.0, 0.0)),
        limits=(LimitSegment(0.0, 2500.0, *URBAN, "urban"),))
    cyc = ((Phase.GREEN, 30.0), (Phase.RED, 30.0))
    signals = (TrafficSignal(600.0, cyc, 0.0), TrafficSignal(1300.0, cyc, 20.0),
               TrafficSignal(2000.0, ((Phase.GREEN, 25.0), (Phase.RED, 35.0)), 40.0))
    return Scenario(route, signals, label="signal_corridor")


def car_following() -> Scenario:
    route = RouteProfile(3000.0, limits=(LimitSegment(0.0, 3000.0, *URBAN, "urban"),))
    rows = lead_trace(route, (), (), 60.0, 700.0, 10.0, 3200.0, seed=7, wobble=0.15)
    pre = PrecedingTrace(tuple(rows), entry_time_s=0.0, exit_time_s=rows[-1][0])
    return Scenario(route, preceding=pre, label="car_following")


def urban_highway() -> Scenario:
    hw = (80 * KMH, 120 * KMH)
    limits = (
        LimitSegment(0.0, 4500.0, *URBAN, "urban"),
        LimitSegment(4500.0, 5000.0, 0.0, 80 * KMH, "highway"),
        LimitSegment(5000.0, 12500.0, *hw, "highway"),
        LimitSegment(12500.0, 13000.0, 0.0, 80 * KMH, "highway"),
        LimitSegment(13000.0, 13200.0, *URBAN, "urban"),
    )
    elevation = ((0.0, 0.0), (1000.0, 0.0), (1100.0, 0.015), (1400.0, 0.015), (1500.0, 0.0),
                 (6000.0, 0.0), (6300.0, 0.02), (7000.0, 0.02), (7300.0, 0.0), (7800.0, -0.02),
                 (8500.0, -0.02), (8800.0, 0.0), (13200.0, 0.0))
    curvature = ((0.0, 0.0), (3650.0, 0.0), (3700.0, 0.02), (3800.0, 0.02), (3850.0, 0.0),
                 (9000.0, 0.0), (9200.0, 0.003), (9800.0, 0.003), (10000.0, 0.0), (13200.0, 0.0))
    route = RouteProfile(13200.0, elevation, curvature, limits)
    signals = (
        TrafficSignal(800.0, ((Phase.GREEN, 30.0), (Phase.RED, 30.0)), 10.0),
        TrafficSignal(1800.0, ((Phase.GREEN, 35.0), (Phase.RED, 25.0)), 45.0),
        TrafficSignal(3200.0, ((Phase.GREEN, 30.0), (Phase.RED, 30.0)), 25.0),
        TrafficSignal(4200.0, ((Phase.GREEN, 25.0), (Phase.RED, 35.0)), 5.0),
        TrafficSignal(13100.0, ((Phase.GREEN, 30.0), (Phase.RED, 30.0)), 0.0),
    )
    stops = (StopSign(2500.0),)
    rows = lead_trace(route, signals, stops, 150.0, 900.0, 8.0, 3500.0, seed=11, wobble=0.05)
    pre = PrecedingTrace(tuple(rows), entry_time_s=0.0, exit_time_s=rows[-1][0])
    return Scenario(route, signals, stops, pre, label="urban_highway")


# -- config ----------------------------------------------------------------------------

def default_config() -> dict:
    from dataclasses import asdict
    from pedas.mpc import MpcConfig
    from pedas.planner import DpConfig, PlannerConfig
    dp = asdict(DpConfig())
    dp.pop("speed_grid")
    dp["speed_grid"] = {"start": 0.0, "stop": 36.0, "step": 0.5}
    return {"mpc": asdict(MpcConfig()), "planner": asdict(PlannerConfig()), "dp": dp}


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    (DATA / "nissan_leaf_like.json").write_text(json.dumps(make_vehicle(), indent=1) + "\n")
    (DATA / "default_config.json").write_text(json.dumps(default_config(), indent=1) + "\n")
    for make in (flat_cruise, stop_sign, signal_corridor, car_following, urban_highway):
        sc = make()
        save_scenario(sc, DATA / f"{sc.label}.json")
        print("wrote", sc.label)


if __name__ == "__main__":
    main()
