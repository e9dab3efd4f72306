"""Longitudinal BEV model: resistive forces with linearised aerodynamics, the
traction-limit line, the quadratic half-map power approximation and its fit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

KWH = 3.6e6


@dataclass(frozen=True)
class VehicleParams:
    m_v: float
    m_eq: float
    c_w: float
    A_f: float
    rho: float
    c_r: float
    g: float = 9.81
    p1: float = 0.0  # aero linearisation: v^2 ~ p1*v + p2
    p2: float = 0.0
    p3: float = 0.0  # traction limit line: F_t,max ~ p3*v + p4
    p4: float = 0.0
    F_b_max: float = 10000.0
    dF_t_max: float = 300.0
    F_t_peak: Optional[float] = None  # motor envelope, only used to refit p3/p4
    P_max: Optional[float] = None

    def __post_init__(self):
        if not (self.m_eq >= self.m_v > 0):
            raise ValueError("need m_eq >= m_v > 0")
        for name in ("A_f", "rho", "c_w", "c_r"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.F_b_max <= 0 or self.dF_t_max <= 0:
            raise ValueError("F_b_max and dF_t_max must be > 0")

    @property
    def aero(self) -> float:
        """Half rho A_f c_w."""
        return 0.5 * self.rho * self.A_f * self.c_w

    def traction_limit(self, v):
        return self.p3 * np.asarray(v, dtype=float) + self.p4 if np.ndim(v) else self.p3 * v + self.p4

    def motor_envelope(self, v):
        """True motor force envelope min(F_peak, P_max / v)."""
        v = np.asarray(v, dtype=float)
        return np.minimum(self.F_t_peak, self.P_max / np.maximum(v, 1e-9))


@dataclass(frozen=True)
class PowerMapCoeffs:
    a00: float
    a10: float
    a01: float
    a11: float
    a20: float
    a02: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a00, self.a10, self.a01, self.a11, self.a20, self.a02])


@dataclass(frozen=True)
class PowerMapFit:
    coeffs: PowerMapCoeffs
    rms_residual: float
    max_residual: float
    residuals: np.ndarray
    max_power: float


@dataclass(frozen=True)
class HostState:
    t: float
    s: float
    v_h: float
    F_t_prev: float = 0.0
    d_ITS: Optional[float] = None
    d_rel: Optional[float] = None

    def __post_init__(self):
        if self.v_h < 0:
            raise ValueError("v_h must be >= 0")
        if self.d_ITS is not None and self.d_ITS < 0:
            raise ValueError("d_ITS must be >= 0 when present")


def resistive_force(params: VehicleParams, v, theta):
    """Aero (linearised) + rolling + grade resistance in N. Negative downhill."""
    return (params.aero * (params.p1 * v + params.p2)
            + params.c_r * params.m_v * params.g * np.cos(theta)
            + params.m_v * params.g * np.sin(theta))


def fit_affine(samples: Iterable[Tuple[float, float]]) -> Tuple[float, float]:
    """Least-squares line ``y = slope*x + intercept``."""
    pts = np.asarray(list(samples), dtype=float).reshape(-1, 2)
    if len(pts) < 2 or np.ptp(pts[:, 0]) == 0:
        raise ValueError("degenerate samples: need >= 2 distinct x values")
    X = np.column_stack([pts[:, 0], np.ones(len(pts))])
    (slope, intercept), *_ = np.linalg.lstsq(X, pts[:, 1], rcond=None)
    return float(slope), float(intercept)


def _power_design(v, F) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    F = np.asarray(F, dtype=float)
    return np.column_stack([np.ones_like(v), v, F, v * F, v * v, F * F])


def fit_power_map(grid: Sequence[Tuple[float, float, float]]) -> PowerMapFit:
    """Least-squares fit of the six-term quadratic in (v, F_t) to ``(v, F_t, P)`` samples."""
    pts = np.asarray(list(grid), dtype=float).reshape(-1, 3)
    X = _power_design(pts[:, 0], pts[:, 1])
    if len(pts) < 6 or np.linalg.matrix_rank(X) < 6:
        raise ValueError("rank-deficient power-map grid: need >= 6 points spanning (v, F)")
    c, *_ = np.linalg.lstsq(X, pts[:, 2], rcond=None)
    res = pts[:, 2] - X @ c
    return PowerMapFit(
        coeffs=PowerMapCoeffs(*map(float, c)),
        rms_residual=float(np.sqrt(np.mean(res ** 2))),
        max_residual=float(np.max(np.abs(res))),
        residuals=res,
        max_power=float(np.max(np.abs(pts[:, 2]))),
    )


def power(coeffs: PowerMapCoeffs, v, F_t):
    """Electrical power (W) from the quadratic half-map."""
    c = coeffs
    return c.a00 + c.a10 * v + c.a01 * F_t + c.a11 * v * F_t + c.a20 * v * v + c.a02 * F_t * F_t


def step_dynamics(state: HostState, F_t: float, F_b: float, theta: float, params: VehicleParams,
                  dt: float, v_p_pair: Optional[Tuple[float, float]] = None) -> HostState:
    """Advance one discrete step; velocity is clamped at zero (no reversing)."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if F_t < 0 or F_b < 0:
        raise ValueError("forces must be >= 0")
    v = state.v_h
    v_next = v + dt / params.m_eq * (F_t - F_b - resistive_force(params, v, theta))
    v_next = max(0.0, float(v_next))
    ds = dt * 0.5 * (v + v_next)
    d_its = None if state.d_ITS is None else state.d_ITS - ds
    if d_its is not None and d_its < 0:
        d_its = None  # feature passed
    d_rel = state.d_rel
    if d_rel is not None and v_p_pair is not None:
        d_rel = d_rel + dt * 0.5 * (v_p_pair[0] + v_p_pair[1]) - ds
    return HostState(t=state.t + dt, s=state.s + ds, v_h=v_next, F_t_prev=float(F_t),
                     d_ITS=d_its, d_rel=d_rel)


def energy_consumed(log, coeffs: PowerMapCoeffs) -> float:
    """Trapezoidal integral of the power map over a trip log, in kWh.

    ``log`` is anything exposing ``dt`` and per-record ``v`` / ``F_t`` arrays
    (a :class:`~pedas.sim.TripLog` qualifies).
    """
    v = np.asarray(log.v, dtype=float)
    if v.size == 0:
        raise ValueError("empty log")
    p = power(coeffs, v, np.asarray(log.F_t, dtype=float))
    if v.size == 1:
        return 0.0
    return float(np.sum(0.5 * (p[1:] + p[:-1])) * log.dt / KWH)


# -- linearisation ---------------------------------------------------------------

def linearized(params: VehicleParams, v_lo: float, v_hi: float, n: int = 64) -> VehicleParams:
    """Refit p1/p2 (aero) and, when the motor envelope is known, p3/p4 over [v_lo, v_hi]."""
    v = np.linspace(v_lo, v_hi, n)
    p1, p2 = fit_affine(zip(v, v * v))
    out = replace(params, p1=p1, p2=p2)
    if params.F_t_peak is not None and params.P_max is not None:
        p3, p4 = fit_affine(zip(v, params.motor_envelope(v)))
        out = replace(out, p3=p3, p4=p4)
    return out


# -- reference physical map (fitting oracle) ----------------------------------------

@dataclass(frozen=True)
class ReferencePowerMap:
    """P = F*v/eta(v, F) + P_aux with eta bilinearly interpolated from a table."""

    p_aux_w: float
    eta_v: Tuple[float, ...]
    eta_f: Tuple[float, ...]
    eta: Tuple[Tuple[float, ...], ...]

    def efficiency(self, v, F):
        vg, fg, tab = np.asarray(self.eta_v), np.asarray(self.eta_f), np.asarray(self.eta)
        v = np.clip(np.asarray(v, dtype=float), vg[0], vg[-1])
        F = np.clip(np.asarray(F, dtype=float), fg[0], fg[-1])
        i = np.clip(np.searchsorted(vg, v, side="right") - 1, 0, len(vg) - 2)
        j = np.clip(np.searchsorted(fg, F, side="right") - 1, 0, len(fg) - 2)
        tv = (v - vg[i]) / (vg[i + 1] - vg[i])
        tf = (F - fg[j]) / (fg[j + 1] - fg[j])
        return ((1 - tv) * (1 - tf) * tab[i, j] + tv * (1 - tf) * tab[i + 1, j]
                + (1 - tv) * tf * tab[i, j + 1] + tv * tf * tab[i + 1, j + 1])

    def __call__(self, v, F):
        return np.asarray(F) * np.asarray(v) / self.efficiency(v, F) + self.p_aux_w

    def grid(self, params: VehicleParams, v_max: float = 35.0, dv: float = 2.5,
             F_cap: float = 6000.0, dF: float = 250.0) -> list:
        """Sample the traction half-map under the motor envelope."""
        rows = []
        for v in np.arange(0.0, v_max + 1e-9, dv):
            f_top = min(float(params.motor_envelope(v)), F_cap)
            for F in np.arange(0.0, f_top + 1e-9, dF):
                rows.append((float(v), float(F), float(self(v, F))))
        return rows


# -- parameter file ------------------------------------------------------------------

@dataclass(frozen=True)
class VehicleFile:
    params: VehicleParams
    coeffs: Optional[PowerMapCoeffs]
    grid: Optional[list]
    reference_map: Optional[ReferencePowerMap]
    raw: dict


def load_vehicle(path: Union[str, Path]) -> VehicleFile:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or "vehicle" not in doc and "power_map_grid" not in doc:
        raise ValueError(f"{path}: expected 'vehicle' and/or 'power_map_grid' sections")
    params = VehicleParams(**doc["vehicle"]) if "vehicle" in doc else None
    coeffs = PowerMapCoeffs(**doc["power_map"]) if doc.get("power_map") else None
    grid = [tuple(r) for r in doc["power_map_grid"]] if doc.get("power_map_grid") else None
    ref = None
    if doc.get("reference_map"):
        r = doc["reference_map"]
        ref = ReferencePowerMap(float(r["p_aux_w"]), tuple(r["eta_v"]), tuple(r["eta_f"]),
                                tuple(tuple(row) for row in r["eta"]))
    return VehicleFile(params, coeffs, grid, ref, doc)


def params_to_dict(params: VehicleParams) -> dict:
    return {k: getattr(params, k) for k in params.__dataclass_fields__}


def coeffs_to_dict(coeffs: PowerMapCoeffs) -> dict:
    return {k: getattr(coeffs, k) for k in coeffs.__dataclass_fields__}
