"""Fixed-step closed-loop simulation, driver models, trip logs and KPIs."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .mpc import (Advisory, AdvisoryContext, ControllerMode, Direction, MpcConfig, MpcController,
                  advisory_from_solution, build_route_context)
from .planner import (DpConfig, PlannerConfig, SpeedEnvelope, SpeedProfile, allowed_speed_profile,
                      dp_speed_profile, reference_speed)
from .scenario import (Phase, Scenario, StopSign, TrafficSignal, next_its_feature,
                       signal_phase_at)
from .vehicle import (HostState, PowerMapCoeffs, VehicleParams, energy_consumed, linearized, power,
                      resistive_force, step_dynamics)

log = logging.getLogger(__name__)

VIOLATION_TOL = 0.1  # m/s over the limit before a sample counts as a violation
STOPPED_SPEED = 0.5  # m/s
STOP_WINDOW_M = 20.0  # a stop this close before a signal disqualifies a green crossing
NOISE_TAU_S = 2.0  # correlation time of the driver's speed-perception error


class DriverStyle(str, Enum):
    CAUTIOUS = "Cautious"
    NORMAL = "Normal"
    SPORTY = "Sporty"


class RunMode(str, Enum):
    BASELINE = "Baseline"
    ASSISTED = "Assisted"


# accel m/s^2, decel m/s^2, gain 1/s, delay s, noise m/s, speed factor, IDM headway s
_STYLES = {
    DriverStyle.CAUTIOUS: (1.2, 2.0, 0.8, 0.8, 0.10, 0.9, 2.0),
    DriverStyle.NORMAL: (1.8, 3.0, 1.0, 0.6, 0.15, 1.0, 1.5),
    DriverStyle.SPORTY: (2.5, 4.0, 1.5, 0.4, 0.20, 1.1, 1.0),
}


@dataclass(frozen=True)
class DriverModel:
    style: DriverStyle = DriverStyle.NORMAL
    reaction_delay_s: float = 0.6
    gain: float = 1.0
    noise_std: float = 0.15
    band_coast: bool = False  # coast on Hold; see README for why styles leave this off
    max_accel: float = 1.8
    max_decel: float = 3.0
    speed_factor: float = 1.0
    headway_s: float = 1.5
    standstill_gap_m: float = 2.0

    def __post_init__(self):
        if self.reaction_delay_s < 0 or self.gain <= 0 or self.noise_std < 0:
            raise ValueError("need reaction_delay_s >= 0, gain > 0, noise_std >= 0")

    @classmethod
    def for_style(cls, style: Union[str, DriverStyle]) -> "DriverModel":
        style = DriverStyle(style.capitalize() if isinstance(style, str) else style)
        acc, dec, gain, delay, noise, factor, T = _STYLES[style]
        return cls(style, delay, gain, noise, False, acc, dec, factor, T)

    @classmethod
    def ideal(cls, dt: float = 0.2) -> "DriverModel":
        """Tracks each advisory exactly within one step; no delay, noise or coasting."""
        return cls(DriverStyle.NORMAL, 0.0, 1.0 / dt, 0.0, False, math.inf, math.inf, 1.0, 1.5)


@dataclass
class DriverMemory:
    """Mutable per-run driver state (reaction-delay buffer, perception error)."""

    targets: deque = field(default_factory=deque)
    noise: float = 0.0


def perception_noise(driver: DriverModel, dt: float, rng: np.random.Generator,
                     memory: Optional[DriverMemory]) -> float:
    """Stationary AR(1) speed error with std ``noise_std``; white noise without memory."""
    if driver.noise_std <= 0:
        return 0.0
    xi = driver.noise_std * float(rng.standard_normal())
    if memory is None:
        return xi
    a = math.exp(-dt / NOISE_TAU_S)
    memory.noise = a * memory.noise + math.sqrt(1.0 - a * a) * xi
    return memory.noise


def forces_for_accel(a: float, v: float, theta: float, params: VehicleParams) -> Tuple[float, float]:
    """Inverse of the discrete speed update: split the net force into traction or braking."""
    net = params.m_eq * a + float(resistive_force(params, v, theta))
    if net >= 0:
        return min(net, max(float(params.traction_limit(v)), 0.0)), 0.0
    return 0.0, min(-net, params.F_b_max)


def driver_step(driver: DriverModel, advisory: Advisory, state: HostState, params: VehicleParams,
                dt: float, rng: np.random.Generator, theta: float = 0.0,
                memory: Optional[DriverMemory] = None) -> Tuple[float, float]:
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if advisory.direction is Direction.HOLD and driver.band_coast:
        return 0.0, 0.0
    target = advisory.target_speed
    if memory is not None and driver.reaction_delay_s > 0:
        lag = int(round(driver.reaction_delay_s / dt))
        memory.targets.append(target)
        while len(memory.targets) > lag + 1:
            memory.targets.popleft()
        target = memory.targets[0]
    target = target + perception_noise(driver, dt, rng, memory)
    if target <= 0.0 and state.v_h <= 1e-9:
        return 0.0, params.F_b_max
    a = float(np.clip(driver.gain * (target - state.v_h), -driver.max_decel, driver.max_accel))
    return forces_for_accel(a, state.v_h, theta, params)


def idm_accel(v: float, v0: float, gap: float, dv: float, driver: DriverModel) -> float:
    """Intelligent-driver-model acceleration; ``gap=inf`` means free road."""
    free = 1.0 - (v / max(v0, 0.1)) ** 4
    if not math.isfinite(gap):
        return driver.max_accel * free
    s_star = driver.standstill_gap_m + max(
        0.0, v * driver.headway_s + v * dv / (2.0 * math.sqrt(driver.max_accel * driver.max_decel)))
    return driver.max_accel * (free - (s_star / max(gap, 0.1)) ** 2)


# -- trip log -------------------------------------------------------------------------

COLUMNS = ("t", "s", "v", "F_t", "F_b", "P", "d_rel", "d_its", "feature", "v_min", "v_max",
           "violation", "controller", "v_ref", "target", "direction", "icons", "tl_countdown",
           "warning_tone", "qp_status")


@dataclass
class TripLog:
    records: List[tuple]
    dt: float
    label: str
    mode: RunMode
    seed: int

    def column(self, name: str) -> np.ndarray:
        i = COLUMNS.index(name)
        vals = [r[i] for r in self.records]
        if name in ("feature", "controller", "direction", "icons", "qp_status"):
            return np.array(vals, dtype=object)
        return np.array([np.nan if x is None else x for x in vals], dtype=float)

    @property
    def t(self):
        return self.column("t")

    @property
    def s(self):
        return self.column("s")

    @property
    def v(self):
        return self.column("v")

    @property
    def F_t(self):
        return self.column("F_t")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.records:
            w.writerow([_fmt(x) for x in r])
        return buf.getvalue()

    def write_csv(self, path: Union[str, Path]) -> None:
        _atomic_write(Path(path), self.to_csv())


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return "" if math.isnan(x) else format(x, ".10g")
    return str(x)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


# -- preparation -----------------------------------------------------------------------

def scenario_vehicle(params: VehicleParams, scenario: Scenario) -> VehicleParams:
    """Linearise aero and traction limit over the speed band the route allows."""
    lo = min(seg.v_min for seg in scenario.route.limits)
    hi = max(seg.v_max for seg in scenario.route.limits)
    return linearized(params, lo, hi)


class SimulationError(RuntimeError):
    """A run that cannot finish; ``log`` holds the partial trace."""

    def __init__(self, msg: str, log: Optional["TripLog"] = None):
        super().__init__(msg)
        self.log = log


# -- closed loop ---------------------------------------------------------------------

def _curve_ahead(env: SpeedEnvelope, s: float, horizon: float) -> bool:
    pos = s + np.linspace(0.0, horizon, 7)
    pos = pos[pos <= env.scenario.route.length_m]
    kappa = np.asarray(env.scenario.route.curvature_at(pos), dtype=float)
    if not np.any(kappa > 0):
        return False
    _, vmax = env._eval(pos)
    static = np.array([env.scenario.route.limits[env.scenario.route.segment_index(p)].v_max for p in pos])
    return bool(np.any(vmax < static - 1e-9))


def run_simulation(scenario: Scenario, mode: Union[str, RunMode], driver: DriverModel,
                   params: VehicleParams, coeffs: PowerMapCoeffs, mpc_cfg: MpcConfig = MpcConfig(),
                   dp_profile: Optional[SpeedProfile] = None, seed: int = 0,
                   planner_cfg: PlannerConfig = PlannerConfig(), v0: float = 0.0,
                   max_time_s: Optional[float] = None) -> TripLog:
    """Run one trip from s = 0 to the route end at the MPC step size."""
    mode = RunMode(mode)
    if mode is RunMode.ASSISTED and dp_profile is None:
        raise ValueError("assisted runs need a precomputed DP profile")
    dt = mpc_cfg.dT
    env = allowed_speed_profile(scenario, planner_cfg.a_lat_max)
    L = scenario.route.length_m
    if max_time_s is None:
        max_time_s = 600.0 + 3.0 * L / max(min(seg.v_max for seg in scenario.route.limits), 1.0)
    rng = np.random.default_rng(seed)
    memory = DriverMemory()
    ctrl = MpcController(params, coeffs, mpc_cfg) if mode is RunMode.ASSISTED else None

    state = HostState(0.0, 0.0, float(v0))
    v_prev = float(v0)
    served: List[StopSign] = []
    latch: Optional[StopSign] = None
    zero_steps = 0
    records: List[tuple] = []
    step = 0

    while True:
        s = state.s
        nxt = next_its_feature(scenario, min(s, L), served)
        feat, d_its = (nxt if nxt is not None else (None, None))
        lead = None
        if scenario.preceding is not None:
            ls = scenario.preceding.state_at(state.t)
            if ls is not None and ls[0] > s:
                lead = (ls[0] - s, ls[1])
        vmin, vmax = env.at(min(s, L))
        theta = float(scenario.route.grade_at(min(s, L)))
        host = HostState(state.t, s, state.v_h, state.F_t_prev, d_its,
                         lead[0] if lead else None)
        done = s >= L
        ctrl_mode = v_ref = target = None
        direction = icons = countdown = qp_status = None
        tone = False
        F_t = F_b = 0.0

        if not done:
            if mode is RunMode.ASSISTED:
                dec = reference_speed(scenario, s, state.v_h, state.t, dp_profile, env, planner_cfg,
                                      served)
                ctx = build_route_context(scenario, env, dp_profile, dec, host, mpc_cfg,
                                          car_following=lead is not None and lead[0] <= mpc_cfg.d_switch)
                sol = ctrl.step(host, dec, ctx, lead, v_prev)
                adv = advisory_from_solution(
                    sol, host, AdvisoryContext(dec, _curve_ahead(env, s, mpc_cfg.icon_range_m),
                                               lead[0] if lead else None), mpc_cfg)
                F_t, F_b = driver_step(driver, adv, host, params, dt, rng, theta, memory)
                ctrl_mode, v_ref, target = sol.mode.value, dec.tracking_speed, adv.target_speed
                direction, icons = adv.direction.value, "|".join(i.value for i in adv.icons)
                countdown, tone, qp_status = adv.tl_countdown, adv.warning_tone, sol.qp_status.value
            else:
                F_t, F_b = _baseline_forces(scenario, env, driver, host, feat, d_its, lead, theta,
                                            params, dt, rng, memory)
            # stop sign: brake to rest inside the stop zone and hold for the dwell time; a driver
            # who leaves it too late gets full braking once the line is within stopping distance
            if isinstance(feat, StopSign) and (latch is feat or (
                    d_its <= feat.stop_line_offset_m + 0.5 and state.v_h < STOPPED_SPEED) or (
                    d_its - feat.stop_line_offset_m <= _stop_distance(state.v_h, params, dt))):
                latch = feat
                F_t, F_b = 0.0, params.F_b_max

        P = float(power(coeffs, state.v_h, F_t))
        viol = bool(state.v_h > vmax + VIOLATION_TOL)
        records.append((
            round(state.t, 10), s, state.v_h, F_t, F_b, P, None if lead is None else lead[0], d_its,
            "" if feat is None else ("Signal" if isinstance(feat, TrafficSignal) else "StopSign"),
            vmin, vmax, viol, ctrl_mode, v_ref, target, direction, icons, countdown, tone, qp_status))
        if done:
            break
        if state.t > max_time_s:
            raise SimulationError(
                f"{scenario.label}: trip not finished after {max_time_s:.0f} s (s={s:.1f} m)",
                TripLog(records, dt, scenario.label, mode, seed))

        nxt_state = step_dynamics(HostState(state.t, s, state.v_h, state.F_t_prev), F_t, F_b, theta,
                                  params, dt)
        v_prev = state.v_h
        step += 1
        state = HostState(round(step * dt, 10), nxt_state.s, nxt_state.v_h, nxt_state.F_t_prev)
        if latch is not None:
            zero_steps = zero_steps + 1 if state.v_h == 0.0 else 0
            if zero_steps >= 1 and (zero_steps - 1) * dt >= latch.dwell_s - 1e-9:
                served.append(latch)
                latch, zero_steps = None, 0

    return TripLog(records, dt, scenario.label, mode, seed)


def _stop_distance(v: float, params: VehicleParams, dt: float) -> float:
    """Distance to rest under full service braking, plus one step of travel."""
    return v * v * params.m_eq / (2.0 * params.F_b_max) + v * dt


def _baseline_forces(scenario, env, driver, host, feat, d_its, lead, theta, params, dt, rng,
                     memory) -> Tuple[float, float]:
    v, s = host.v_h, host.s
    L = scenario.route.length_m
    if not (math.isfinite(driver.max_accel) and math.isfinite(driver.max_decel)):
        # an unbounded envelope (ideal driver) falls back to what the vehicle can do
        driver = replace(driver, max_accel=min(driver.max_accel, params.p4 / params.m_eq),
                         max_decel=min(driver.max_decel, params.F_b_max / params.m_eq))
    # anticipate lower limits within a short look-ahead using the style's braking
    look = np.minimum(s + np.arange(0.0, 201.0, 10.0), L)
    _, vmax_ahead = env._eval(look)
    cap = np.sqrt((driver.speed_factor * vmax_ahead) ** 2 + 2.0 * driver.max_decel * 0.5 * (look - s))
    v0 = float(np.min(cap))
    v0 += perception_noise(driver, dt, rng, memory)
    acc = idm_accel(v, v0, math.inf, 0.0, driver)
    if lead is not None:
        acc = min(acc, idm_accel(v, v0, lead[0], v - lead[1], driver))
    if feat is not None and d_its is not None:
        obstacle = False
        if isinstance(feat, StopSign):
            obstacle = True
        else:
            phase, _ = signal_phase_at(feat, host.t)
            obstacle = phase is Phase.RED and v * v / (2.0 * driver.max_decel) <= d_its
        if obstacle:
            acc = min(acc, idm_accel(v, v0, d_its, v, driver))
    acc = float(np.clip(acc, -params.F_b_max / params.m_eq, driver.max_accel))
    if v <= 1e-9 and acc <= 0:
        return 0.0, params.F_b_max
    return forces_for_accel(acc, v, theta, params)


# -- metrics ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentMetrics:
    distance_m: float
    time_s: float
    energy_kwh: float
    speed_violation_time_s: float


@dataclass(frozen=True)
class TripMetrics:
    label: str
    energy_kwh: float
    trip_time_s: float
    distance_m: float
    speed_violation_time_s: float
    speed_violation_count: int
    signals_encountered: int
    signals_crossed_green: int
    signals_stopped: int
    red_crossings: int
    stops_total: int
    mean_abs_jerk: float
    max_abs_jerk: float
    segments: Dict[str, SegmentMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "segments"}
        d["segments"] = {k: vars(v) if not hasattr(v, "__dataclass_fields__") else
                         {f: getattr(v, f) for f in v.__dataclass_fields__}
                         for k, v in self.segments.items()}
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TripMetrics":
        doc = dict(doc)
        segs = {k: SegmentMetrics(**v) for k, v in (doc.pop("segments", None) or {}).items()}
        return cls(**doc, segments=segs)


def compute_metrics(log: TripLog, scenario: Scenario, coeffs: PowerMapCoeffs) -> TripMetrics:
    t, s, v = log.t, log.s, log.v
    dt = log.dt
    viol = log.column("violation") > 0.5
    n = len(v)
    interval = viol[:-1] if n > 1 else np.zeros(0, dtype=bool)
    violation_time = float(np.sum(interval)) * dt
    rising = int(np.sum(interval[1:] & ~interval[:-1]) + (1 if interval.size and interval[0] else 0))

    crossed = stopped = red = 0
    for sig in scenario.signals:
        k = int(np.searchsorted(s, sig.position_m, side="left"))
        if k == 0 or k >= n:
            continue  # not passed during the trip
        frac = (sig.position_m - s[k - 1]) / max(s[k] - s[k - 1], 1e-12)
        t_cross = t[k - 1] + frac * dt
        phase, _ = signal_phase_at(sig, t_cross)
        near = (s >= sig.position_m - STOP_WINDOW_M) & (s < sig.position_m)
        halted = bool(np.any(v[near] < STOPPED_SPEED)) if np.any(near) else False
        if phase is Phase.RED:
            red += 1
        if phase is Phase.GREEN and not halted:
            crossed += 1
        else:
            stopped += 1

    moving = v >= STOPPED_SPEED
    stops_total = int(np.sum(moving[:-1] & ~moving[1:])) if n > 1 else 0
    if n >= 3:
        jerk = np.diff(v, 2) / (dt * dt)
        mean_j, max_j = float(np.mean(np.abs(jerk))), float(np.max(np.abs(jerk)))
    else:
        mean_j = max_j = 0.0

    segments: Dict[str, SegmentMetrics] = {}
    tags = scenario.segment_tags()
    if tags and n > 1:
        P = log.column("P")
        e_int = 0.5 * (P[1:] + P[:-1]) * dt / 3.6e6
        seg_idx = np.array([scenario.route.segment_index(min(x, scenario.route.length_m)) for x in s[:-1]])
        seg_tag = np.array([scenario.route.limits[i].tag for i in seg_idx], dtype=object)
        ds = np.diff(s)
        for tag in tags:
            m = seg_tag == tag
            segments[tag] = SegmentMetrics(float(np.sum(ds[m])), float(np.sum(m)) * dt,
                                           float(np.sum(e_int[m])), float(np.sum(interval[m])) * dt)

    return TripMetrics(
        label=log.label, energy_kwh=energy_consumed(log, coeffs), trip_time_s=float(t[-1] - t[0]),
        distance_m=float(s[-1] - s[0]), speed_violation_time_s=violation_time,
        speed_violation_count=rising, signals_encountered=crossed + stopped,
        signals_crossed_green=crossed, signals_stopped=stopped, red_crossings=red,
        stops_total=stops_total, mean_abs_jerk=mean_j, max_abs_jerk=max_j, segments=segments)


@dataclass(frozen=True)
class ComparisonReport:
    label: str
    energy_saving_pct: float
    violation_time_reduction_pct: float
    violation_count_delta: int
    green_crossing_delta: int
    signals_stopped_delta: int
    trip_time_delta_s: float
    segments: Dict[str, dict] = field(default_factory=dict)
    baseline: Optional[TripMetrics] = None
    assisted: Optional[TripMetrics] = None

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("baseline", "assisted")}
        d["baseline"] = self.baseline.to_dict() if self.baseline else None
        d["assisted"] = self.assisted.to_dict() if self.assisted else None
        return d

    def table(self) -> str:
        rows = [("energy saving %", f"{self.energy_saving_pct:.2f}"),
                ("violation time reduction %", f"{self.violation_time_reduction_pct:.2f}"),
                ("violation episodes delta", f"{self.violation_count_delta:+d}"),
                ("green crossings delta", f"{self.green_crossing_delta:+d}"),
                ("signal stops delta", f"{self.signals_stopped_delta:+d}"),
                ("trip time delta s", f"{self.trip_time_delta_s:+.1f}")]
        for tag, seg in self.segments.items():
            rows.append((f"[{tag}] energy saving %", f"{seg['energy_saving_pct']:.2f}"))
            rows.append((f"[{tag}] violation time reduction %", f"{seg['violation_time_reduction_pct']:.2f}"))
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{w}}  {val}" for k, val in rows)


def _pct_drop(base: float, new: float) -> float:
    return 0.0 if base == 0 else (base - new) / base * 100.0


def compare_runs(baseline: TripMetrics, assisted: TripMetrics) -> ComparisonReport:
    if baseline.label != assisted.label:
        raise ValueError(f"scenario mismatch: {baseline.label!r} vs {assisted.label!r}")
    segs = {}
    for tag in baseline.segments:
        if tag in assisted.segments:
            b, a = baseline.segments[tag], assisted.segments[tag]
            segs[tag] = {"energy_saving_pct": _pct_drop(b.energy_kwh, a.energy_kwh),
                         "violation_time_reduction_pct": _pct_drop(b.speed_violation_time_s,
                                                                   a.speed_violation_time_s)}
    return ComparisonReport(
        label=baseline.label,
        energy_saving_pct=_pct_drop(baseline.energy_kwh, assisted.energy_kwh),
        violation_time_reduction_pct=_pct_drop(baseline.speed_violation_time_s,
                                               assisted.speed_violation_time_s),
        violation_count_delta=assisted.speed_violation_count - baseline.speed_violation_count,
        green_crossing_delta=assisted.signals_crossed_green - baseline.signals_crossed_green,
        signals_stopped_delta=assisted.signals_stopped - baseline.signals_stopped,
        trip_time_delta_s=assisted.trip_time_s - baseline.trip_time_s,
        segments=segs, baseline=baseline, assisted=assisted)


# -- batch -------------------------------------------------------------------------------

@dataclass(frozen=True)
class RunJob:
    scenario: Scenario
    mode: RunMode
    driver: DriverModel
    seed: int = 0


@dataclass(frozen=True)
class SimSetup:
    """Everything shared read-only by the runs on one scenario."""

    params: VehicleParams
    coeffs: PowerMapCoeffs
    mpc_cfg: MpcConfig
    dp_profile: Optional[SpeedProfile]
    planner_cfg: PlannerConfig = PlannerConfig()


def prepare(scenario: Scenario, params: VehicleParams, coeffs: PowerMapCoeffs,
            mpc_cfg: MpcConfig = MpcConfig(), dp_cfg: DpConfig = DpConfig(),
            planner_cfg: PlannerConfig = PlannerConfig()) -> SimSetup:
    p = scenario_vehicle(params, scenario)
    prof = dp_speed_profile(scenario, p, coeffs, dp_cfg, planner_cfg.a_lat_max)
    return SimSetup(p, coeffs, mpc_cfg, prof, planner_cfg)


def run_job(job: RunJob, setup: SimSetup) -> TripLog:
    return run_simulation(job.scenario, job.mode, job.driver, setup.params, setup.coeffs,
                          setup.mpc_cfg, setup.dp_profile, job.seed, setup.planner_cfg)


def run_batch(jobs: Sequence[RunJob], setup: SimSetup, max_workers: int = 4) -> List[TripLog]:
    """Run independent jobs concurrently; results come back in job order."""
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda j: run_job(j, setup), jobs))
