"""Vehicle model: resistive force, affine and power-map fits, discrete dynamics, energy."""

from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pedas.vehicle import (HostState, PowerMapCoeffs, VehicleParams, _power_design,
                           energy_consumed, fit_affine, fit_power_map, power, resistive_force,
                           step_dynamics)


def bare(**kw):
    """Vehicle with every resistance switched off unless overridden."""
    base = dict(m_v=1500.0, m_eq=1500.0, c_w=0.0, A_f=0.0, rho=0.0, c_r=0.0, p1=1.0, p2=0.0)
    base.update(kw)
    return VehicleParams(**base)


# -- resistive_force -----------------------------------------------------------------

def test_all_resistances_off():
    assert resistive_force(bare(), 12.0, 0.0) == 0.0


def test_pure_grade():
    assert resistive_force(bare(), 10.0, math.asin(0.1)) == pytest.approx(1471.5, rel=1e-12)


def test_linearised_aero_only():
    # half rho A_f c_w = 0.5 * 1 * 1 * 0.8 = 0.4
    p = bare(rho=1.0, A_f=1.0, c_w=0.8, p1=1.0, p2=0.0)
    assert resistive_force(p, 10.0, 0.0) == pytest.approx(4.0, rel=1e-12)


def test_downhill_negative(leaf):
    assert resistive_force(leaf.params, 5.0, -0.05) < 0


@given(st.floats(0, 40), st.floats(0, 40), st.floats(-0.1, 0.1))
def test_affine_in_speed(v1, v2, theta):
    p = VehicleParams(1600, 1680, 0.28, 2.29, 1.2, 0.0095, p1=30.0, p2=-150.0)
    mid = resistive_force(p, 0.5 * (v1 + v2), theta)
    avg = 0.5 * (resistive_force(p, v1, theta) + resistive_force(p, v2, theta))
    assert mid == pytest.approx(avg, rel=1e-12, abs=1e-9)


@pytest.mark.parametrize("kw", [dict(m_eq=1000.0), dict(rho=-1.0), dict(F_b_max=0.0),
                                dict(dF_t_max=-1.0), dict(m_v=0.0, m_eq=0.0)])
def test_params_invariants(kw):
    with pytest.raises(ValueError):
        bare(**kw)


# -- fit_affine ------------------------------------------------------------------------

def test_exact_line():
    slope, icpt = fit_affine([(x, 2 * x + 1) for x in range(5)])
    assert slope == pytest.approx(2.0, rel=1e-12) and icpt == pytest.approx(1.0, rel=1e-12)


def test_normal_equations_example():
    slope, icpt = fit_affine([(0, 0), (1, 1), (2, 4)])
    assert slope == pytest.approx(2.0, rel=1e-12)
    assert icpt == pytest.approx(-1.0 / 3.0, rel=1e-12)


@pytest.mark.parametrize("samples", [[(1.0, 2.0)], [(1.0, 2.0), (1.0, 3.0), (1.0, 5.0)]])
def test_degenerate_affine(samples):
    with pytest.raises(ValueError):
        fit_affine(samples)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-1e3, 1e3)), min_size=3, max_size=30))
def test_affine_residual_orthogonal(samples):
    xs = np.array([x for x, _ in samples])
    if np.ptp(xs) < 1e-3:
        return
    slope, icpt = fit_affine(samples)
    ys = np.array([y for _, y in samples])
    r = ys - (slope * xs + icpt)
    scale = np.linalg.norm(ys) * max(1.0, np.linalg.norm(xs)) + 1.0
    assert abs(r.sum()) <= 1e-8 * scale
    assert abs(r @ xs) <= 1e-8 * scale


# -- power and fit_power_map -----------------------------------------------------------

def test_constant_aux_power():
    c = PowerMapCoeffs(250.0, 0, 0, 0, 0, 0)
    assert power(c, 7.0, 900.0) == 250.0


def test_mechanical_power_only():
    assert power(PowerMapCoeffs(0, 0, 0, 1, 0, 0), 10.0, 100.0) == 1000.0


def test_fitted_map_matches_physical_map(leaf):
    fit = fit_power_map(leaf.grid)
    direct = float(leaf.reference_map(15.0, 500.0))
    assert abs(power(fit.coeffs, 15.0, 500.0) - direct) <= fit.max_residual


def test_exact_polynomial_recovered():
    truth = np.array([300.0, 12.0, 0.05, 1.1, 0.8, 2e-5])
    v, F = np.meshgrid(np.linspace(0, 30, 7), np.linspace(0, 5000, 6))
    v, F = v.ravel(), F.ravel()
    P = _power_design(v, F) @ truth
    fit = fit_power_map(list(zip(v, F, P)))
    np.testing.assert_allclose(fit.coeffs.as_array(), truth, rtol=1e-9)


def test_reference_map_fit_quality(leaf):
    fit = fit_power_map(leaf.grid)
    assert fit.rms_residual < 0.03 * fit.max_power


def test_rank_deficient_grid():
    with pytest.raises(ValueError):
        fit_power_map([(v, 100.0 * v, 1.0) for v in range(5)])


def test_power_map_residuals_orthogonal(leaf):
    fit = fit_power_map(leaf.grid)
    g = np.asarray(leaf.grid)
    X = _power_design(g[:, 0], g[:, 1])
    proj = X.T @ fit.residuals
    scale = np.linalg.norm(X, axis=0) * np.linalg.norm(g[:, 2])
    assert np.all(np.abs(proj) <= 1e-8 * scale)


def test_fitted_power_nonnegative_on_grid(leaf):
    g = np.asarray(leaf.grid)
    assert np.all(power(leaf.coeffs, g[:, 0], g[:, 1]) >= 0)


def test_bundled_coefficients_are_the_grid_fit(leaf):
    np.testing.assert_allclose(fit_power_map(leaf.grid).coeffs.as_array(),
                               leaf.coeffs.as_array(), rtol=1e-12)


# -- step_dynamics -----------------------------------------------------------------------

def test_coasting_in_vacuum():
    s0 = HostState(0.0, 0.0, 10.0, d_ITS=100.0)
    s1 = step_dynamics(s0, 0.0, 0.0, 0.0, bare(), 0.2)
    assert s1.v_h == 10.0 and s1.d_ITS == pytest.approx(98.0)


def test_hand_step():
    p = bare(m_v=1600.0, m_eq=1600.0)
    s1 = step_dynamics(HostState(0.0, 0.0, 10.0, d_ITS=50.0), 1600.0, 0.0, 0.0, p, 0.2)
    assert s1.v_h == pytest.approx(10.2, rel=1e-12)
    assert 50.0 - s1.d_ITS == pytest.approx(2.02, rel=1e-12)
    assert s1.s == pytest.approx(2.02, rel=1e-12) and s1.F_t_prev == 1600.0


def test_speed_clamped_at_zero():
    s1 = step_dynamics(HostState(0.0, 0.0, 0.1), 0.0, 1e5, 0.0, bare(), 0.2)
    assert s1.v_h == 0.0


def test_relative_distance_update():
    s0 = HostState(0.0, 0.0, 10.0, d_rel=30.0)
    s1 = step_dynamics(s0, 0.0, 0.0, 0.0, bare(), 0.2, v_p_pair=(12.0, 12.0))
    assert s1.d_rel == pytest.approx(30.0 + 0.2 * 12.0 - 0.2 * 10.0)


@pytest.mark.parametrize("F_t, F_b, dt", [(-1.0, 0.0, 0.2), (0.0, -1.0, 0.2), (0.0, 0.0, 0.0)])
def test_step_preconditions(F_t, F_b, dt):
    with pytest.raises(ValueError):
        step_dynamics(HostState(0.0, 0.0, 5.0), F_t, F_b, 0.0, bare(), dt)


def test_error_halves_with_dt(leaf):
    """Halving dt about halves the error at a fixed horizon (first-order scheme)."""
    p = leaf.params

    def speed_after(T, n):
        st_ = HostState(0.0, 0.0, 5.0)
        for k in range(n):
            F = 2000.0 + 1000.0 * math.sin(k * T / n)
            st_ = step_dynamics(st_, F, 0.0, 0.0, p, T / n)
        return st_.v_h

    T = 1.0
    ref = speed_after(T, 4096)
    e1 = abs(speed_after(T, 8) - ref)
    e2 = abs(speed_after(T, 16) - ref)
    assert e2 < 0.6 * e1


# -- energy_consumed -----------------------------------------------------------------

def log_of(v, F, dt=1.0):
    return SimpleNamespace(v=np.asarray(v, float), F_t=np.asarray(F, float), dt=dt)


def test_constant_power_one_kwh():
    c = PowerMapCoeffs(3600.0, 0, 0, 0, 0, 0)
    assert energy_consumed(log_of(np.zeros(1001), np.zeros(1001)), c) == pytest.approx(1.0, rel=1e-12)


def test_zero_power_log():
    assert energy_consumed(log_of([5, 6, 7], [0, 0, 0]), PowerMapCoeffs(0, 0, 0, 0, 0, 0)) == 0.0


def test_single_sample_zero():
    assert energy_consumed(log_of([5], [100]), PowerMapCoeffs(3600.0, 0, 0, 0, 0, 0)) == 0.0


def test_empty_log_rejected():
    with pytest.raises(ValueError):
        energy_consumed(log_of([], []), PowerMapCoeffs(0, 0, 0, 0, 0, 0))
