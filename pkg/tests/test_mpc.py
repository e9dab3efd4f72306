"""MPC controllers: switching, both QP formulations, corrections and advisories."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import conftest
from oracles import mpc_cost_by_simulation, mpc_grid_oracle
from pedas.mpc import (KMH, AdvisoryContext, ControllerMode, Direction, Icon, MpcConfig,
                       MpcController, RouteContext, advisory_from_solution, build_car_following_qp,
                       build_ref_tracking_qp, corrected_speed, select_controller, solution_from_qp)
from pedas.planner import GreenWaveBand, ReferenceDecision, RefSource
from pedas.qp import QpStatus, solve_qp
from pedas.scenario import Phase, StopSign, TrafficSignal
from pedas.vehicle import HostState, PowerMapCoeffs, resistive_force

CFG = MpcConfig()
VMAX = 13.89


@pytest.fixture(scope="module")
def car():
    st_ = conftest.setup("flat_cruise")
    return st_.params, st_.coeffs


def solve(problem):
    qp = solve_qp(problem)
    return solution_from_qp(problem, qp), qp


# -- switching and config -------------------------------------------------------------

@pytest.mark.parametrize("d_rel, mode", [(None, ControllerMode.REF_TRACKING),
                                         (150.0, ControllerMode.REF_TRACKING),
                                         (100.0, ControllerMode.CAR_FOLLOWING),
                                         (20.0, ControllerMode.CAR_FOLLOWING)])
def test_select_controller(d_rel, mode):
    assert select_controller(d_rel, CFG) is mode


@pytest.mark.parametrize("kw", [dict(N=0), dict(dT=0.0), dict(zeta2=-1.0), dict(h_m=2.0, h_c=1.0),
                                dict(h_m=0.0), dict(d_min=0.0), dict(d_switch=0.0)])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        MpcConfig(**kw)


def test_default_gains():
    assert (CFG.N, CFG.dT) == (20, 0.2)
    assert (CFG.k1, CFG.k2, CFG.k3, CFG.k4, CFG.k5, CFG.corr_cap) == (0.01, 0.4, 0.008, -0.05, 0.4, 0.4)
    assert CFG.d_switch == 100.0


# -- reference tracking ---------------------------------------------------------------

def test_steady_cruise_holds_reference(car):
    params, coeffs = car
    v_ref = 12.0
    f_res = float(resistive_force(params, v_ref, 0.0))
    state = HostState(0.0, 0.0, v_ref, F_t_prev=f_res)
    sol, qp = solve(build_ref_tracking_qp(state, v_ref, RouteContext.flat(CFG.N, 0.0, VMAX),
                                          params, coeffs, CFG))
    assert qp.status is QpStatus.OPTIMAL
    assert np.max(np.abs(sol.v_pred_seq - v_ref)) < 0.1
    assert sol.F_t_seq[0] == pytest.approx(f_res, rel=0.05)
    assert sol.advisory_speed == sol.v_pred_seq[1]


def test_red_signal_brakes_into_stop_zone(car):
    params, coeffs = car
    cfg = replace(CFG, N=2)
    state = HostState(0.0, 0.0, 10.0, F_t_prev=200.0, d_ITS=5.0)
    ctx = RouteContext(np.zeros(2), np.zeros(2), np.full(2, VMAX), d_its=5.0, stop_line_offset=5.0,
                       hold_steps=2, soft_stop=True)
    prob = build_ref_tracking_qp(state, 0.0, ctx, params, coeffs, cfg)
    sol, qp = solve(prob)
    assert qp.status is QpStatus.OPTIMAL
    assert sol.F_b_seq[0] > 0 and sol.v_pred_seq[-1] < 10.0
    v = sol.v_pred_seq
    travelled = 0.5 * cfg.dT * (v[:-1] + v[1:]).sum()
    d_end = 5.0 - travelled
    assert -1e-6 <= d_end <= 5.0 + sol.eps1_seq[-1] + 1e-6
    oracle = mpc_grid_oracle(state, ctx, params, coeffs, cfg, v_ref=0.0, levels=2)
    assert abs(qp.objective - oracle) <= 0.01 * abs(oracle)


def test_degenerate_objective_returns_feasible_point(car):
    params, _ = car
    cfg = replace(CFG, zeta1=0.0, zeta2=0.0, zeta3=0.0, zeta4=0.0)
    flat_p = PowerMapCoeffs(500.0, 0, 0, 0, 0, 0)
    prob = build_ref_tracking_qp(HostState(0.0, 0.0, 10.0), 10.0, RouteContext.flat(cfg.N, 0.0, VMAX),
                                 params, flat_p, cfg)
    qp = solve_qp(prob)
    assert qp.status is QpStatus.OPTIMAL
    G, h = prob.stacked()
    assert np.max(G @ qp.x - h) <= 1e-6


def test_negative_distance_rejected(car):
    params, coeffs = car
    ctx = RouteContext.flat(CFG.N, 0.0, VMAX, d_its=-1.0, hold_steps=1)
    with pytest.raises(ValueError):
        build_ref_tracking_qp(HostState(0.0, 0.0, 5.0), 5.0, ctx, params, coeffs, CFG)


# -- car following -------------------------------------------------------------------

def test_equilibrium_gap_no_slack(car):
    params, coeffs = car
    v = 10.0
    f_res = float(resistive_force(params, v, 0.0))
    state = HostState(0.0, 0.0, v, F_t_prev=f_res)
    prob = build_car_following_qp(state, v, CFG.comfortable_distance(v),
                                  RouteContext.flat(CFG.N, 0.0, VMAX), params, coeffs, CFG)
    sol, qp = solve(prob)
    assert qp.status is QpStatus.OPTIMAL
    # the gap error stays small next to the comfortable gap; it grows only where the
    # horizon end makes coasting free
    assert sol.eps3_seq[0] < 1e-2
    assert np.max(sol.eps3_seq) < 0.05 * CFG.comfortable_distance(v)
    # terminal coasting lets speed sag by a few percent over the horizon
    assert abs(sol.v_pred_seq[1] - v) < 0.1
    assert np.ptp(sol.v_pred_seq) < 0.05 * v


def test_large_gap_accelerates(car):
    params, coeffs = car
    cfg = replace(CFG, N=2)
    state = HostState(0.0, 0.0, 8.0, F_t_prev=1500.0)
    ctx = RouteContext.flat(2, 0.0, VMAX)
    prob = build_car_following_qp(state, 8.0, 90.0, ctx, params, coeffs, cfg)
    sol, qp = solve(prob)
    assert np.all(np.diff(sol.v_pred_seq) > 0)
    oracle = mpc_grid_oracle(state, ctx, params, coeffs, cfg, lead=(8.0, 90.0), levels=2)
    assert abs(qp.objective - oracle) <= 0.01 * abs(oracle)


def test_breached_gap_is_infeasible(car):
    params, coeffs = car
    v = 10.0
    d_rel = CFG.safe_distance(v) - 2.0
    state = HostState(0.0, 0.0, v)
    prob = build_car_following_qp(state, v, d_rel, RouteContext.flat(CFG.N, 0.0, VMAX), params,
                                  coeffs, CFG)
    assert solve_qp(prob).status is QpStatus.INFEASIBLE
    ctrl = MpcController(params, coeffs, CFG)
    dec = ReferenceDecision(VMAX, RefSource.DP_FALLBACK)
    sol = ctrl.step(state, dec, RouteContext.flat(CFG.N, 0.0, VMAX), (d_rel, v), v)
    assert sol.qp_status is QpStatus.INFEASIBLE and sol.correction == "corr2"
    assert sol.target_speed == pytest.approx(corrected_speed(v, v, v, d_rel, 0.0,
                                                             CFG.safe_distance(v), CFG))


def test_nonpositive_gap_rejected(car):
    params, coeffs = car
    with pytest.raises(ValueError):
        build_car_following_qp(HostState(0.0, 0.0, 5.0), 5.0, 0.0, RouteContext.flat(CFG.N), params,
                               coeffs, CFG)


# -- invariants of optimal solutions ----------------------------------------------------

def random_case(rng, params):
    v = float(rng.uniform(0.5, 13.5))
    state = HostState(0.0, 0.0, v, F_t_prev=float(rng.uniform(0.0, 2500.0)))
    theta = rng.uniform(-0.03, 0.03, CFG.N)
    ctx = RouteContext(theta, np.zeros(CFG.N), np.full(CFG.N, VMAX))
    return state, ctx


def check_constraints(sol, state, ctx, params, cfg, lead=None):
    tol = 1e-4
    v = sol.v_pred_seq
    assert np.all(sol.F_t_seq >= -tol)
    assert np.all(sol.F_t_seq <= params.p3 * v[:-1] + params.p4 + tol)
    assert np.all(sol.F_b_seq >= -tol) and np.all(sol.F_b_seq <= params.F_b_max + tol)
    assert np.all(v[1:] >= ctx.v_lower - tol) and np.all(v[1:] <= ctx.v_upper + tol)
    dF = np.diff(np.concatenate([[state.F_t_prev], sol.F_t_seq]))
    assert np.all(np.abs(dF) <= params.dF_t_max + sol.eps2_seq + tol)
    for eps in (sol.eps1_seq, sol.eps2_seq, sol.eps3_seq):
        assert np.all(eps >= 0)
    if lead is not None:
        v_p, d_rel = lead
        dist = np.cumsum(0.5 * cfg.dT * (v[:-1] + v[1:]))
        gap = d_rel + np.arange(1, cfg.N + 1) * cfg.dT * v_p - dist
        assert np.all(gap >= cfg.d_min + cfg.h_m * v[1:] - tol)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_ref_tracking_solutions_feasible(car, seed):
    params, coeffs = car
    rng = np.random.default_rng(seed)
    state, ctx = random_case(rng, params)
    sol, qp = solve(build_ref_tracking_qp(state, float(rng.uniform(0, VMAX)), ctx, params, coeffs, CFG))
    assert qp.status is QpStatus.OPTIMAL
    check_constraints(sol, state, ctx, params, CFG)
    assert sol.advisory_speed == sol.v_pred_seq[1]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_car_following_solutions_keep_gap(car, seed):
    params, coeffs = car
    rng = np.random.default_rng(seed)
    state, ctx = random_case(rng, params)
    v_p = float(rng.uniform(0.0, 14.0))
    d_rel = float(rng.uniform(CFG.safe_distance(state.v_h) + 4.0 + state.v_h, 100.0))
    sol, qp = solve(build_car_following_qp(state, v_p, d_rel, ctx, params, coeffs, CFG))
    assert qp.status is QpStatus.OPTIMAL
    check_constraints(sol, state, ctx, params, CFG, lead=(v_p, d_rel))


def test_qp_objective_equals_forward_simulation(car):
    """The condensed objective is the simulated cost of the returned forces."""
    params, coeffs = car
    rng = np.random.default_rng(3)
    for _ in range(5):
        state, ctx = random_case(rng, params)
        v_ref = float(rng.uniform(0, VMAX))
        prob = build_ref_tracking_qp(state, v_ref, ctx, params, coeffs, CFG)
        qp = solve_qp(prob)
        N = CFG.N
        x = qp.x.copy()
        x[:2 * N] = np.maximum(x[:2 * N], 0.0)
        x[2 * N:3 * N] = 0.0
        dF = np.diff(np.concatenate([[state.F_t_prev], x[:N]]))
        x[3 * N:4 * N] = np.maximum(np.abs(dF) - params.dF_t_max, 0.0)
        sim = mpc_cost_by_simulation(x[:N], x[N:2 * N], state, ctx, params, coeffs, CFG, v_ref=v_ref)
        assert sim == pytest.approx(prob.objective(x), rel=1e-9)
        # interior-point slacks sit marginally above their minimum
        assert sim <= qp.objective * (1 + 1e-9)


# -- corrections --------------------------------------------------------------------------

def test_zero_gap_error_unchanged():
    assert corrected_speed(10.0, 10.0, 11.0, 30.0, 30.0, 15.0, CFG) == 11.0


def test_positive_gap_correction():
    got = corrected_speed(10.0, 10.0, 10.0, 35.0, 30.0, 15.0, CFG)
    assert abs((got - 10.0) - 2.25) <= 1e-9


def test_breach_correction():
    got = corrected_speed(10.0, 9.0, 10.0, 13.0, 30.0, 15.0, CFG)
    assert abs((got - 9.0) - (-0.032)) <= 1e-9


def test_switch_is_discontinuous_at_safe_distance():
    above = corrected_speed(10.0, 10.0, 10.0, 15.0, 30.0, 15.0, CFG)
    below = corrected_speed(10.0, 10.0, 10.0, 15.0 - 1e-9, 30.0, 15.0, CFG)
    assert abs(above - below) > 1.0


# -- advisories ---------------------------------------------------------------------------

def advise(car, v_h, target, decision=None, d_rel=None, curve=False):
    params, coeffs = car
    state = HostState(0.0, 0.0, v_h)
    ctx = RouteContext.flat(CFG.N, 0.0, 40.0)
    prob = build_ref_tracking_qp(state, target, ctx, params, coeffs, CFG)
    sol = replace(solution_from_qp(prob, solve_qp(prob)), target_speed=target)
    return advisory_from_solution(sol, state, AdvisoryContext(decision, curve, d_rel), CFG)


def test_hold_inside_band(car):
    adv = advise(car, 36 * KMH, 37 * KMH)
    assert adv.direction is Direction.HOLD
    assert adv.magnitude == pytest.approx(KMH)


@pytest.mark.parametrize("delta_kmh, direction", [(2.5, Direction.UP), (-2.5, Direction.DOWN),
                                                  (1.99, Direction.HOLD), (-1.99, Direction.HOLD)])
def test_direction_band_edges(car, delta_kmh, direction):
    assert advise(car, 36 * KMH, (36 + delta_kmh) * KMH).direction is direction


def signal_decision(remaining):
    sig = TrafficSignal(100.0, ((Phase.GREEN, 30.0), (Phase.RED, 30.0)))
    return ReferenceDecision(8.33, RefSource.GREEN_WAVE, GreenWaveBand(8.33, 13.89), sig, 80.0,
                             phase=Phase.GREEN, phase_remaining=remaining)


@pytest.mark.parametrize("remaining, shown", [(8.0, True), (12.0, False)])
def test_countdown_below_ten_seconds(car, remaining, shown):
    adv = advise(car, 10.0, 10.0, signal_decision(remaining))
    assert (adv.tl_countdown is not None) is shown
    assert Icon.GREEN_WAVE in adv.icons


def test_warning_tone_when_gap_breached(car):
    v = 10.0
    d_s = CFG.safe_distance(v)
    adv = advise(car, v, 5.0, d_rel=d_s - 0.5)
    assert adv.direction is Direction.DOWN and adv.warning_tone
    assert not advise(car, v, 5.0, d_rel=d_s + 5.0).warning_tone
    assert not advise(car, v, 12.0, d_rel=d_s - 0.5).warning_tone


def test_stop_and_curve_icons(car):
    dec = ReferenceDecision(10.0, RefSource.DP_FALLBACK, None, StopSign(200.0), 120.0, True)
    adv = advise(car, 10.0, 10.0, dec, curve=True)
    assert Icon.STOP_SIGN_AHEAD in adv.icons and Icon.CURVE_AHEAD in adv.icons
