"""Reference-tracking and car-following MPC, switching, driver-error corrections
and advisory events.

Both controllers condense the states out of the QP: with u_k = F_t,k - F_b,k the
discrete dynamics give v = c + Phi u, so every speed and distance along the
horizon is affine in the decision vector x = [F_t, F_b, eps1, eps2(, eps3)].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from .planner import ReferenceDecision, RefSource, SpeedEnvelope, SpeedProfile
from .qp import QpProblem, QpSolution, QpStatus, solve_qp
from .scenario import Scenario, StopSign, TrafficSignal
from .vehicle import HostState, PowerMapCoeffs, VehicleParams

log = logging.getLogger(__name__)

KMH = 1.0 / 3.6


class ControllerMode(str, Enum):
    REF_TRACKING = "RefTracking"
    CAR_FOLLOWING = "CarFollowing"


@dataclass(frozen=True)
class MpcConfig:
    N: int = 20
    dT: float = 0.2
    zeta1: float = 5.0e5  # speed tracking (reference tracking)
    zeta1_cf: float = 2.0e3  # comfortable-gap slack eps3 (car following)
    zeta2: float = 1.0e-3  # braking force
    zeta3: float = 1.0e3  # stop-zone slack eps1
    zeta4: float = 1.0e-1  # traction-step slack eps2
    h_m: float = 1.0
    h_c: float = 2.0
    d_min: float = 5.0
    d_switch: float = 100.0
    k1: float = 0.01
    k2: float = 0.4
    k3: float = 0.008
    k4: float = -0.05
    k5: float = 0.4
    corr_cap: float = 0.4
    gap_margin: float = 0.3  # tightening of the hard gap constraint against frozen-time error
    relax_decel: float = 2.0  # speed-cap ramp when the car already exceeds the cap
    min_speed_gap: float = 0.1  # keeps v_lower < v_upper so the QP has an interior
    hold_band_kmh: float = 2.0
    countdown_s: float = 10.0
    tone_margin_m: float = 1.0
    icon_range_m: float = 150.0
    qp_tol: float = 1e-6
    qp_max_iter: int = 100

    def __post_init__(self):
        if self.N < 1 or self.dT <= 0:
            raise ValueError("need N >= 1 and dT > 0")
        if min(self.zeta1, self.zeta1_cf, self.zeta2, self.zeta3, self.zeta4) < 0:
            raise ValueError("weights must be >= 0")
        if not (0 < self.h_m < self.h_c):
            raise ValueError("need 0 < h_m < h_c")
        if self.d_min <= 0 or self.d_switch <= 0:
            raise ValueError("d_min and d_switch must be > 0")

    def safe_distance(self, v: float) -> float:
        return self.d_min + self.h_m * v

    def comfortable_distance(self, v: float) -> float:
        return self.d_min + self.h_c * v


# -- route context over the horizon ---------------------------------------------------

@dataclass(frozen=True)
class RouteContext:
    """Per-step environment data along the horizon (nominal positions)."""

    theta: np.ndarray  # k = 0..N-1
    v_lower: np.ndarray  # k = 1..N
    v_upper: np.ndarray  # k = 1..N
    d_its: Optional[float] = None
    stop_line_offset: float = 5.0
    hold_steps: int = 0  # d_ITS,k >= 0 enforced for k = 1..hold_steps
    soft_stop: bool = False  # terminal d_ITS,N - eps1 <= d_s

    @staticmethod
    def flat(N: int, v_lower: float = 0.0, v_upper: float = 40.0, **kw) -> "RouteContext":
        return RouteContext(np.zeros(N), np.full(N, float(v_lower)), np.full(N, float(v_upper)), **kw)


def build_route_context(scenario: Scenario, env: SpeedEnvelope, v_dp: SpeedProfile,
                        decision: ReferenceDecision, state: HostState, cfg: MpcConfig,
                        car_following: bool = False) -> RouteContext:
    N, dT = cfg.N, cfg.dT
    k = np.arange(1, N + 1)
    L = scenario.route.length_m
    s_nom = np.minimum(state.s + np.arange(N + 1) * dT * state.v_h, L)
    theta = np.asarray(scenario.route.grade_at(s_nom[:N]), dtype=float)
    vmin, vmax = env._eval(s_nom[1:])
    upper = np.minimum(vmax, v_dp.at(s_nom[1:]))
    upper = np.maximum(upper, state.v_h - k * dT * cfg.relax_decel)
    if car_following or decision.stop_required:
        lower = np.zeros(N)
    else:
        lower = np.minimum(vmin, state.v_h)
    lower = np.minimum(lower, np.maximum(upper - cfg.min_speed_gap, 0.0))

    hold, soft, d_its, offset = 0, False, None, 5.0
    if decision.feature is not None and decision.d_its is not None:
        d_its = decision.d_its
        offset = decision.feature.stop_line_offset_m
        if decision.stop_required:
            hold = N
            soft = d_its - offset <= 0.5 * state.v_h * N * dT
        elif decision.band is not None:
            g = decision.band.window[0]
            hold = 0 if g <= 0 else min(N, int(math.ceil(g / dT - 1e-9)))
    return RouteContext(theta, lower, upper, d_its, offset, hold, soft)


# -- QP construction ---------------------------------------------------------------

@dataclass
class MpcProblem(QpProblem):
    mode: ControllerMode = ControllerMode.REF_TRACKING
    N: int = 0
    c_v: np.ndarray = field(default=None, repr=False)  # v = c_v + S_v x
    S_v: np.ndarray = field(default=None, repr=False)
    n_blocks: int = 4


def _dynamics(state: HostState, theta: np.ndarray, params: VehicleParams, N: int, dT: float):
    alpha = 1.0 - dT * params.aero * params.p1 / params.m_eq
    beta = dT / params.m_eq
    r = (params.aero * params.p2 + params.c_r * params.m_v * params.g * np.cos(theta)
         + params.m_v * params.g * np.sin(theta))
    Phi = np.zeros((N + 1, N))
    c = np.zeros(N + 1)
    c[0] = state.v_h
    for kk in range(1, N + 1):
        c[kk] = alpha * c[kk - 1] - beta * r[kk - 1]
        Phi[kk, :kk] = alpha * Phi[kk - 1, :kk]
        Phi[kk, kk - 1] = beta
    return c, Phi


def _distance_matrix(N: int, dT: float) -> np.ndarray:
    """Row k-1 maps v_0..v_N to the distance covered by step k (trapezoid)."""
    T = np.zeros((N, N + 1))
    for kk in range(1, N + 1):
        T[kk - 1, 0] = 0.5
        T[kk - 1, 1:kk] = 1.0
        T[kk - 1, kk] += 0.5
    return dT * T


def _build(state: HostState, ctx: RouteContext, params: VehicleParams, coeffs: PowerMapCoeffs,
           cfg: MpcConfig, v_ref: Optional[float], cf: Optional[Tuple[float, float]]) -> MpcProblem:
    if ctx.d_its is not None and ctx.d_its < 0:
        raise ValueError("infeasible geometry: d_ITS < 0")
    N, dT = cfg.N, cfg.dT
    nb = 5 if cf is not None else 4
    nx = nb * N
    c, Phi = _dynamics(state, np.asarray(ctx.theta, dtype=float), params, N, dT)
    Sv = np.zeros((N + 1, nx))
    Sv[:, :N] = Phi
    Sv[:, N:2 * N] = -Phi
    E = np.zeros((N, nx))
    E[:, :N] = np.eye(N)
    S0, c0 = Sv[:N], c[:N]
    S1, c1 = Sv[1:], c[1:]
    a = coeffs

    H = (a.a11 * (S0.T @ E + E.T @ S0) + 2 * a.a20 * S0.T @ S0 + 2 * a.a02 * E.T @ E)
    f = a.a10 * S0.sum(0) + a.a01 * E.sum(0) + a.a11 * (c0 @ E) + 2 * a.a20 * (c0 @ S0)
    const = N * a.a00 + a.a10 * c0.sum() + a.a20 * (c0 @ c0)
    if v_ref is not None:
        e = c1 - v_ref
        H += 2 * cfg.zeta1 * S1.T @ S1
        f += 2 * cfg.zeta1 * (e @ S1)
        const += cfg.zeta1 * (e @ e)
    diag = np.zeros(nx)
    diag[N:2 * N] = 2 * cfg.zeta2
    diag[2 * N:3 * N] = 2 * cfg.zeta3
    diag[3 * N:4 * N] = 2 * cfg.zeta4
    if nb == 5:
        diag[4 * N:] = 2 * cfg.zeta1_cf
    H += np.diag(diag)
    H = 0.5 * (H + H.T)

    rows, rhs = [], []
    # traction limit F_t,k <= p3 v_k + p4
    rows.append(E - params.p3 * S0)
    rhs.append(params.p4 + params.p3 * c0)
    # speed bounds on predicted states
    rows.append(S1)
    rhs.append(ctx.v_upper - c1)
    rows.append(-S1)
    rhs.append(c1 - ctx.v_lower)
    # traction step |F_t,k - F_t,k-1| <= dF_max + eps2,k
    D = np.zeros((N, nx))
    D[:, :N] = np.eye(N) - np.eye(N, k=-1)
    D2 = np.zeros((N, nx))
    D2[:, 3 * N:4 * N] = np.eye(N)
    prev = np.zeros(N)
    prev[0] = state.F_t_prev
    rows += [D - D2, -D - D2]
    rhs += [params.dF_t_max + prev, params.dF_t_max - prev]
    T = _distance_matrix(N, dT)
    TS, Tc = T @ Sv, T @ c
    if ctx.d_its is not None and ctx.hold_steps > 0:
        h = ctx.hold_steps
        rows.append(TS[:h])
        rhs.append(ctx.d_its - Tc[:h])
    if ctx.d_its is not None and ctx.soft_stop:
        row = -TS[N - 1].copy()
        row[2 * N + N - 1] = -1.0
        rows.append(row[None, :])
        rhs.append(np.array([ctx.stop_line_offset - ctx.d_its + Tc[N - 1]]))
    if cf is not None:
        v_p, d_rel = cf
        kdt = np.arange(1, N + 1) * dT
        base = d_rel + kdt * v_p
        rows.append(TS + cfg.h_m * S1)
        rhs.append(base - Tc - cfg.h_m * c1 - cfg.d_min - cfg.gap_margin)
        R = -TS - cfg.h_c * S1
        R[:, 4 * N:] -= np.eye(N)
        rows.append(R)
        rhs.append(cfg.d_min - base + Tc + cfg.h_c * c1)

    lb = np.zeros(nx)
    ub = np.full(nx, np.inf)
    ub[N:2 * N] = params.F_b_max
    if ctx.soft_stop:
        ub[2 * N:3 * N - 1] = 0.0
    else:
        ub[2 * N:3 * N] = 0.0
    return MpcProblem(H, f, np.vstack(rows), np.concatenate(rhs), lb, ub, float(const),
                      mode=ControllerMode.CAR_FOLLOWING if cf is not None else ControllerMode.REF_TRACKING,
                      N=N, c_v=c, S_v=Sv, n_blocks=nb)


def build_ref_tracking_qp(state: HostState, v_ref: float, ctx: RouteContext, params: VehicleParams,
                          coeffs: PowerMapCoeffs, cfg: MpcConfig) -> MpcProblem:
    """Energy plus speed tracking over the horizon; v_ref is clamped into the speed bounds."""
    v_ref = float(np.clip(v_ref, ctx.v_lower[0], ctx.v_upper[0]))
    return _build(state, ctx, params, coeffs, cfg, v_ref, None)


def build_car_following_qp(state: HostState, v_p: float, d_rel: float, ctx: RouteContext,
                           params: VehicleParams, coeffs: PowerMapCoeffs, cfg: MpcConfig
                           ) -> MpcProblem:
    """Energy plus comfortable-gap slack, lead speed frozen over the horizon."""
    if d_rel <= 0:
        raise ValueError("d_rel must be > 0")
    return _build(state, ctx, params, coeffs, cfg, None, (float(v_p), float(d_rel)))


# -- solutions -----------------------------------------------------------------------

@dataclass(frozen=True)
class ControlSolution:
    F_t_seq: np.ndarray
    F_b_seq: np.ndarray
    eps1_seq: np.ndarray
    eps2_seq: np.ndarray
    eps3_seq: np.ndarray
    v_pred_seq: np.ndarray
    objective: float
    mode: ControllerMode
    advisory_speed: float
    qp_status: QpStatus
    target_speed: float = math.nan  # after corrections; what the driver is asked to drive
    correction: str = "none"  # none | corr1 | corr2 | degraded
    iterations: int = 0


def solution_from_qp(problem: MpcProblem, qp: QpSolution) -> ControlSolution:
    N = problem.N
    x = qp.x
    v = problem.c_v + problem.S_v @ x
    blk = lambda i: x[i * N:(i + 1) * N]
    eps3 = np.maximum(blk(4), 0.0) if problem.n_blocks == 5 else np.zeros(N)
    return ControlSolution(
        F_t_seq=np.maximum(blk(0), 0.0), F_b_seq=np.maximum(blk(1), 0.0),
        eps1_seq=np.maximum(blk(2), 0.0), eps2_seq=np.maximum(blk(3), 0.0), eps3_seq=eps3,
        v_pred_seq=v, objective=qp.objective, mode=problem.mode,
        advisory_speed=float(v[1]), qp_status=qp.status, target_speed=float(v[1]),
        iterations=qp.iterations)


def select_controller(d_rel: Optional[float], cfg: MpcConfig) -> ControllerMode:
    if d_rel is None or d_rel > cfg.d_switch:
        return ControllerMode.REF_TRACKING
    return ControllerMode.CAR_FOLLOWING


def corrected_speed(v_h_k: float, v_h_km1: float, v_model_next: float, d_rel: float, d_c: float,
                    d_s: float, cfg: MpcConfig) -> float:
    """Gap-error correction of the advised speed.

    Above the safe distance the model speed gets k1*e^2 + k2*e with e = d_rel - d_c.
    Below it the update restarts from the speed one step back, scaled by a
    capped quadratic factor of x = d_rel - d_s.
    """
    if d_rel >= d_s:
        e = d_rel - d_c
        return v_model_next + cfg.k1 * e * e + cfg.k2 * e
    x = d_rel - d_s
    factor = abs(min(cfg.k3 * x * x, cfg.corr_cap))
    return v_h_km1 + factor * (cfg.k4 * x * x + cfg.k5 * x)


def _fallback(state: HostState, mode: ControllerMode, target: float, status: QpStatus,
              correction: str, N: int) -> ControlSolution:
    z = np.zeros(N)
    v = np.full(N + 1, float(state.v_h))
    return ControlSolution(z, z.copy(), z.copy(), z.copy(), z.copy(), v, math.nan, mode,
                           float(v[1]), status, float(target), correction)


class MpcController:
    """Per-simulation controller; keeps the warm start between calls."""

    def __init__(self, params: VehicleParams, coeffs: PowerMapCoeffs, cfg: MpcConfig = MpcConfig()):
        self.params = params
        self.coeffs = coeffs
        self.cfg = cfg
        self._warm: dict = {}

    def _solve(self, problem: MpcProblem) -> Tuple[ControlSolution, QpSolution]:
        x0 = self._warm.get(problem.mode)
        if x0 is not None:
            N = problem.N
            x0 = np.concatenate([np.append(b[1:], b[-1]) for b in np.split(x0, problem.n_blocks)])
        qp = solve_qp(problem, self.cfg.qp_tol, self.cfg.qp_max_iter, x0)
        if qp.status is QpStatus.OPTIMAL:
            self._warm[problem.mode] = qp.x.copy()
        else:
            self._warm.pop(problem.mode, None)
        return solution_from_qp(problem, qp), qp

    def step(self, state: HostState, decision: ReferenceDecision, ctx: RouteContext,
             lead: Optional[Tuple[float, float]], v_h_prev: float) -> ControlSolution:
        """One control update. ``lead`` is (d_rel, v_p) when a preceding car is sensed."""
        cfg, N = self.cfg, self.cfg.N
        d_rel = lead[0] if lead is not None else None
        mode = select_controller(d_rel, cfg)
        stop_target = 0.0 if decision.stop_required else None
        if mode is ControllerMode.CAR_FOLLOWING:
            v_p = lead[1]
            d_s = cfg.safe_distance(state.v_h)
            d_c = cfg.comfortable_distance(state.v_h)
            if d_rel < d_s:
                target = corrected_speed(state.v_h, v_h_prev, state.v_h, d_rel, d_c, d_s, cfg)
                return _fallback(state, mode, max(0.0, target), QpStatus.INFEASIBLE, "corr2", N)
            problem = build_car_following_qp(state, v_p, d_rel, ctx, self.params, self.coeffs, cfg)
            sol, qp = self._solve(problem)
            if qp.status is not QpStatus.OPTIMAL:
                target = corrected_speed(state.v_h, v_h_prev, state.v_h, d_rel, d_c, d_s, cfg)
                log.info("car-following QP %s; correction path", qp.status.value)
                return _fallback(state, mode, max(0.0, min(target, state.v_h)), qp.status, "corr2", N)
            target = corrected_speed(state.v_h, v_h_prev, sol.advisory_speed, d_rel, d_c, d_s, cfg)
            hi = min(float(ctx.v_upper[0]), self._safe_speed(state, d_rel, v_p))
            if ctx.hold_steps > 0 or decision.stop_required:
                hi = min(hi, sol.advisory_speed)
            hi = max(hi, sol.advisory_speed)
            target = float(np.clip(target, 0.0, hi))
            return _replace_target(sol, target, "corr1")
        v_ref = decision.tracking_speed
        problem = build_ref_tracking_qp(state, v_ref, ctx, self.params, self.coeffs, cfg)
        sol, qp = self._solve(problem)
        if qp.status is not QpStatus.OPTIMAL:
            target = stop_target if stop_target is not None else float(ctx.v_upper[0])
            log.info("reference-tracking QP %s; degraded mode", qp.status.value)
            return _fallback(state, mode, target, qp.status, "degraded", N)
        return sol

    def _safe_speed(self, state: HostState, d_rel: float, v_p: float) -> float:
        """Largest next speed that keeps the hard gap after one step and stays recoverable."""
        cfg, dT = self.cfg, self.cfg.dT
        one_step = (d_rel + dT * v_p - 0.5 * dT * state.v_h - cfg.d_min - cfg.gap_margin) / (
            cfg.h_m + 0.5 * dT)
        b_safe = 0.5 * self.params.F_b_max / self.params.m_eq
        return max(0.0, min(one_step, v_p + cfg.h_m * b_safe))


def _replace_target(sol: ControlSolution, target: float, correction: str) -> ControlSolution:
    from dataclasses import replace
    return replace(sol, target_speed=float(target), correction=correction)


# -- advisory --------------------------------------------------------------------------

class Direction(str, Enum):
    UP = "Up"
    DOWN = "Down"
    HOLD = "Hold"


class Icon(str, Enum):
    GREEN_WAVE = "GreenWave"
    STOP_SIGN_AHEAD = "StopSignAhead"
    YIELD_AHEAD = "YieldAhead"  # kept for the event vocabulary; the route model has no yield signs
    CURVE_AHEAD = "CurveAhead"


@dataclass(frozen=True)
class AdvisoryContext:
    decision: Optional[ReferenceDecision] = None
    curve_ahead: bool = False
    d_rel: Optional[float] = None


@dataclass(frozen=True)
class Advisory:
    target_speed: float
    direction: Direction
    magnitude: float
    icons: Tuple[Icon, ...] = ()
    tl_countdown: Optional[float] = None
    warning_tone: bool = False


def advisory_from_solution(sol: ControlSolution, state: HostState, context: AdvisoryContext,
                           cfg: MpcConfig) -> Advisory:
    target = sol.target_speed if not math.isnan(sol.target_speed) else sol.advisory_speed
    diff = target - state.v_h
    if abs(diff) <= cfg.hold_band_kmh * KMH:
        direction = Direction.HOLD
    else:
        direction = Direction.UP if diff > 0 else Direction.DOWN
    icons = []
    countdown = None
    dec = context.decision
    if dec is not None and dec.feature is not None:
        if dec.source is RefSource.GREEN_WAVE and dec.band is not None:
            icons.append(Icon.GREEN_WAVE)
        if isinstance(dec.feature, StopSign) and dec.d_its <= cfg.icon_range_m:
            icons.append(Icon.STOP_SIGN_AHEAD)
        if (isinstance(dec.feature, TrafficSignal) and dec.d_its <= cfg.icon_range_m
                and dec.phase_remaining is not None and dec.phase_remaining < cfg.countdown_s):
            countdown = float(dec.phase_remaining)
    if context.curve_ahead:
        icons.append(Icon.CURVE_AHEAD)
    tone = False
    if context.d_rel is not None and direction is Direction.DOWN:
        tone = context.d_rel < cfg.safe_distance(state.v_h) + cfg.tone_margin_m
    return Advisory(float(target), direction, float(abs(diff)), tuple(icons), countdown, tone)
