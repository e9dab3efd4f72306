"""Reference speed planning: allowed-speed envelope, green-wave band over SPaT
windows, the offline DP speed profile and the per-step reference selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from .scenario import (ItsFeature, Phase, Scenario, ScenarioValidationError, StopSign,
                       TrafficSignal, curvature_speed_cap, green_windows, next_its_feature,
                       signal_phase_at)
from .vehicle import PowerMapCoeffs, VehicleParams, power, resistive_force


class RefSource(str, Enum):
    GREEN_WAVE = "GreenWave"
    DP_FALLBACK = "DpFallback"


# -- allowed speed envelope ------------------------------------------------------

@dataclass(frozen=True)
class SpeedEnvelope:
    """v_min(s) = static minimum, v_max(s) = min(static maximum, curvature cap)."""

    scenario: Scenario
    a_lat_max: float = 2.0

    def v_min(self, s):
        return self._eval(s)[0]

    def v_max(self, s):
        return self._eval(s)[1]

    def at(self, s) -> Tuple[float, float]:
        lo, hi = self._eval(s)
        return float(lo), float(hi)

    def _eval(self, s):
        route = self.scenario.route
        s_arr = np.clip(np.asarray(s, dtype=float), 0.0, route.length_m)
        starts = np.array([seg.start_m for seg in route.limits])
        idx = np.clip(np.searchsorted(starts, s_arr, side="right") - 1, 0, len(starts) - 1)
        vmin = np.array([seg.v_min for seg in route.limits])[idx]
        vmax = np.array([seg.v_max for seg in route.limits])[idx]
        kappa = np.asarray(route.curvature_at(s_arr), dtype=float)
        with np.errstate(divide="ignore"):
            cap = np.where(kappa > 0, np.sqrt(self.a_lat_max / np.where(kappa > 0, kappa, 1.0)),
                           np.inf)
        return vmin, np.minimum(vmax, cap)

    def sample(self, ds: float = 10.0):
        L = self.scenario.route.length_m
        pos = np.append(np.arange(0.0, L, ds), L)
        lo, hi = self._eval(pos)
        return pos, lo, hi


def allowed_speed_profile(scenario: Scenario, a_lat_max: float = 2.0) -> SpeedEnvelope:
    """Build the envelope and reject routes where a curve caps speed below v_min."""
    if a_lat_max <= 0:
        raise ValueError("a_lat_max must be > 0")
    env = SpeedEnvelope(scenario, a_lat_max)
    route = scenario.route
    # kappa is piecewise linear, so its maxima sit on sample vertices or segment ends
    probe = [p for p, _ in route.curvature]
    for seg in route.limits:
        probe += [seg.start_m, max(seg.start_m, np.nextafter(seg.end_m, -np.inf))]
    for i, seg in enumerate(route.limits):
        pts = [p for p in probe if seg.start_m <= p < seg.end_m] or [seg.start_m]
        for p in pts:
            cap = curvature_speed_cap(float(route.curvature_at(p)), a_lat_max)
            if seg.v_min > cap:
                raise ScenarioValidationError(
                    f"route.limits[{i}]",
                    f"v_min {seg.v_min} exceeds curvature cap {cap:.3f} at s={p}")
    return env


# -- green wave -----------------------------------------------------------------

@dataclass(frozen=True)
class GreenWaveBand:
    v_ref_min: float
    v_ref_max: float
    window: Tuple[float, float] = (0.0, math.inf)
    index: int = 0

    def __post_init__(self):
        if self.v_ref_min > self.v_ref_max:
            raise ValueError("v_ref_min > v_ref_max")


def green_wave_band(d_tl: float, windows: Sequence[Tuple[float, float]], v_min: float,
                    v_max: float) -> Optional[GreenWaveBand]:
    """Earliest window whose constant-speed band [d/r, d/g] meets [v_min, v_max].

    ``g == 0`` stands for a window that is already open, whose upper speed is unbounded.
    """
    if d_tl <= 0:
        raise ValueError("d_tl must be > 0")
    for n, (g, r) in enumerate(windows):
        if r <= g:
            continue
        lo = d_tl / r
        hi = d_tl / g if g > 0 else math.inf
        lo, hi = max(lo, v_min), min(hi, v_max)
        if lo <= hi:
            return GreenWaveBand(lo, hi, (g, r), n)
    return None


# -- DP speed profile ----------------------------------------------------------------

@dataclass(frozen=True)
class DpConfig:
    ds: float = 10.0
    speed_grid: Tuple[float, ...] = tuple(np.round(np.arange(0.0, 36.01, 0.5), 6))
    w_time: float = 1500.0
    w_energy: float = 1.0
    max_accel: float = 1.5
    max_decel: float = 2.0
    brake_idle_power: bool = False  # charge P(v, 0) on braking stages too

    def __post_init__(self):
        grid = np.asarray(self.speed_grid, dtype=float)
        if self.ds <= 0:
            raise ValueError("ds must be > 0")
        if grid.size == 0 or np.any(grid < 0) or np.any(np.diff(grid) <= 0):
            raise ValueError("speed grid must be non-empty, >= 0 and strictly ascending")
        if self.w_time < 0 or self.w_energy < 0 or (self.w_time == 0 and self.w_energy == 0):
            raise ValueError("weights must be >= 0 and not both zero")
        if self.max_accel <= 0 or self.max_decel <= 0:
            raise ValueError("max_accel and max_decel must be > 0")


@dataclass(frozen=True)
class SpeedProfile:
    """DP speeds at grid positions; lookups interpolate and clip into the envelope."""

    positions: np.ndarray
    speeds: np.ndarray
    cost: float = 0.0
    envelope: Optional[SpeedEnvelope] = field(default=None, compare=False, repr=False)

    def at(self, s):
        v = np.interp(s, self.positions, self.speeds)
        if self.envelope is not None:
            lo, hi = self.envelope._eval(s)
            v = np.clip(v, lo, hi)
        return float(v) if np.ndim(v) == 0 else v

    @property
    def samples(self):
        return list(zip(self.positions.tolist(), self.speeds.tolist()))


def dp_stage_costs(v_from: np.ndarray, v_to: np.ndarray, ds: float, theta: float,
                   params: VehicleParams, coeffs: PowerMapCoeffs, cfg: DpConfig) -> np.ndarray:
    """Matrix of transition costs ``C[i, j]`` from speed ``v_from[i]`` to ``v_to[j]``.

    Average-speed kinematics over one cell; inadmissible transitions cost ``inf``.
    Braking stages (required force < 0) cost ``w_time * dt`` only, unless
    ``cfg.brake_idle_power`` charges them the zero-traction power as well.
    """
    vi = np.asarray(v_from, dtype=float)[:, None]
    vj = np.asarray(v_to, dtype=float)[None, :]
    v_avg = 0.5 * (vi + vj)
    a = (vj * vj - vi * vi) / (2.0 * ds)
    ok = (v_avg > 0) & (a <= cfg.max_accel + 1e-12) & (a >= -cfg.max_decel - 1e-12)
    v_safe = np.where(ok, v_avg, 1.0)
    dt = ds / v_safe
    F = params.m_eq * a + resistive_force(params, v_safe, theta)
    ok &= F <= params.traction_limit(v_safe) + 1e-9
    P = power(coeffs, v_safe, np.maximum(F, 0.0))
    if not cfg.brake_idle_power:
        P = np.where(F < 0.0, 0.0, P)
    cost = cfg.w_energy * P * dt + cfg.w_time * dt
    return np.where(ok, cost, np.inf)


def solve_dp(stage_costs: Sequence[np.ndarray]) -> Tuple[float, list]:
    """Forward DP over a layered graph with a free start node.

    Costs accumulate left to right, exactly as a forward path sum would, so the
    optimum is bit-identical to exhaustive enumeration of all paths.
    """
    if not stage_costs:
        raise ValueError("need at least one stage")
    V = np.zeros(stage_costs[0].shape[0])
    back = []
    for C in stage_costs:
        tot = V[:, None] + C
        arg = np.argmin(tot, axis=0)
        back.append(arg)
        V = tot[arg, np.arange(C.shape[1])]
    j = int(np.argmin(V))
    best = float(V[j])
    if not np.isfinite(best):
        raise ValueError("infeasible grid: no admissible path")
    path = [j]
    for arg in reversed(back):
        j = int(arg[j])
        path.append(j)
    return best, path[::-1]


def enumerate_paths_cost(stage_costs: Sequence[np.ndarray]) -> float:
    """Brute-force minimum over all paths, summed in the same left-to-right order."""
    acc = np.zeros(stage_costs[0].shape[0])
    for C in stage_costs:
        acc = acc[..., None] + C.reshape((1,) * (acc.ndim - 1) + C.shape)
    return float(np.min(acc))


def dp_speed_profile(scenario: Scenario, params: VehicleParams, coeffs: PowerMapCoeffs,
                     cfg: DpConfig = DpConfig(), a_lat_max: float = 2.0) -> SpeedProfile:
    env = allowed_speed_profile(scenario, a_lat_max)
    L = scenario.route.length_m
    pos = np.append(np.arange(0.0, L, cfg.ds), L)
    if pos.size >= 2 and pos[-1] - pos[-2] < 1e-9:
        pos = pos[:-1]
    grid = np.asarray(cfg.speed_grid, dtype=float)
    lo, hi = env._eval(pos)
    admissible = []
    for k, p in enumerate(pos):
        sel = np.flatnonzero((grid >= lo[k] - 1e-9) & (grid <= hi[k] + 1e-9))
        if sel.size == 0:
            raise ValueError(f"infeasible grid: no admissible speed at s={p}")
        admissible.append(sel)
    costs = []
    for k in range(len(pos) - 1):
        d = pos[k + 1] - pos[k]
        theta = float(scenario.route.grade_at(0.5 * (pos[k] + pos[k + 1])))
        costs.append(dp_stage_costs(grid[admissible[k]], grid[admissible[k + 1]], d, theta,
                                    params, coeffs, cfg))
    best, path = solve_dp(costs)
    speeds = np.array([grid[admissible[k][j]] for k, j in enumerate(path)])
    return SpeedProfile(pos, speeds, best, env)


def profile_energy_time(profile: SpeedProfile, scenario: Scenario, params: VehicleParams,
                        coeffs: PowerMapCoeffs, cfg: DpConfig) -> Tuple[float, float]:
    """Energy (J) and time (s) terms of a DP profile under the stage model."""
    e = t = 0.0
    unit_e = replace(cfg, w_time=0.0, w_energy=1.0)
    unit_t = replace(cfg, w_time=1.0, w_energy=0.0)
    p, v = profile.positions, profile.speeds
    for k in range(len(p) - 1):
        theta = float(scenario.route.grade_at(0.5 * (p[k] + p[k + 1])))
        d = p[k + 1] - p[k]
        e += float(dp_stage_costs(v[k:k + 1], v[k + 1:k + 2], d, theta, params, coeffs, unit_e)[0, 0])
        t += float(dp_stage_costs(v[k:k + 1], v[k + 1:k + 2], d, theta, params, coeffs, unit_t)[0, 0])
    return e, t


# -- per-step reference -----------------------------------------------------------

@dataclass(frozen=True)
class PlannerConfig:
    a_lat_max: float = 2.0
    spat_horizon_s: float = 300.0
    green_margin_s: float = 2.0  # safety margin cut off the red end of each green window
    a_comf: float = 1.5  # comfortable deceleration for the stop approach speed
    commit_decel: float = 3.5  # above this stopping decel a running green is committed
    commit_margin_s: float = 0.2


@dataclass(frozen=True)
class ReferenceDecision:
    v_ref: float
    source: RefSource
    band: Optional[GreenWaveBand] = None
    feature: Optional[ItsFeature] = None
    d_its: Optional[float] = None
    stop_required: bool = False
    approach_speed: float = math.inf  # speed cap that brings the car to rest in the stop zone
    committed: bool = False
    phase: Optional[Phase] = None
    phase_remaining: Optional[float] = None

    @property
    def tracking_speed(self) -> float:
        return min(self.v_ref, self.approach_speed)


def stop_approach_speed(d_its: float, stop_line_offset: float, a_comf: float) -> float:
    """Speed from which a comfortable constant decel stops mid stop zone."""
    return math.sqrt(2.0 * a_comf * max(d_its - 0.5 * stop_line_offset, 0.0))


def reference_speed(scenario: Scenario, s: float, v_h: float, t: float, v_dp: SpeedProfile,
                    env: SpeedEnvelope, cfg: PlannerConfig = PlannerConfig(),
                    skip: Sequence[ItsFeature] = ()) -> ReferenceDecision:
    """Green-wave band minimum when a band exists, otherwise the DP speed."""
    v_dp_here = float(v_dp.at(s))
    nxt = next_its_feature(scenario, s, skip)
    if nxt is None:
        return ReferenceDecision(v_dp_here, RefSource.DP_FALLBACK)
    feat, d = nxt
    if isinstance(feat, StopSign):
        return ReferenceDecision(
            v_dp_here, RefSource.DP_FALLBACK, None, feat, d, True,
            stop_approach_speed(d, feat.stop_line_offset_m, cfg.a_comf))

    vmin, vmax = env.at(s)
    upper = min(vmax, v_dp_here)
    phase, remaining = signal_phase_at(feat, t)
    raw = green_windows(feat, t, cfg.spat_horizon_s)
    windows = [(g, r - cfg.green_margin_s) for g, r in raw if r - cfg.green_margin_s > g]
    band = green_wave_band(d, windows, vmin, upper)

    if phase is Phase.GREEN and (band is None or band.window[0] > 0) and v_h > 0:
        clear = d / v_h < remaining - cfg.commit_margin_s
        hard_stop = v_h * v_h / (2.0 * d) > cfg.commit_decel
        if clear and hard_stop:
            lo = d / max(remaining - cfg.commit_margin_s, 1e-9)
            v_ref = max(lo, min(v_h, upper))
            band = GreenWaveBand(min(lo, v_ref), max(v_ref, upper), (0.0, remaining), 0)
            return ReferenceDecision(v_ref, RefSource.GREEN_WAVE, band, feat, d, False,
                                     committed=True, phase=phase, phase_remaining=remaining)
    if band is not None:
        return ReferenceDecision(band.v_ref_min, RefSource.GREEN_WAVE, band, feat, d, False,
                                 phase=phase, phase_remaining=remaining)
    return ReferenceDecision(
        v_dp_here, RefSource.DP_FALLBACK, None, feat, d, True,
        stop_approach_speed(d, feat.stop_line_offset_m, cfg.a_comf), phase=phase,
        phase_remaining=remaining)
