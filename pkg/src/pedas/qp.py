"""Dense convex QP solver used by both MPC formulations.

    minimise    1/2 x'Hx + f'x + constant
    subject to  A_ineq x <= b_ineq,  lb <= x <= ub

Mehrotra predictor-corrector interior point on the stacked inequality form
G x <= h, with Ruiz equilibration and an active-set polish of the final
iterate. Non-convergence triggers a phase-1 problem whose optimum is the
smallest achievable uniform constraint violation; a positive value certifies
infeasibility.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lu_factor, lu_solve

log = logging.getLogger(__name__)
_warned = False  # the eigenvalue-shift warning is emitted once per process


class QpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    A_ineq: Optional[np.ndarray] = None
    b_ineq: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    constant: float = 0.0

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.asarray(self.f, dtype=float).ravel()
        n = self.f.size
        if self.H.shape != (n, n):
            raise ValueError(f"H has shape {self.H.shape}, expected {(n, n)}")
        scale = max(1.0, float(np.max(np.abs(self.H))) if n else 1.0)
        if n and np.max(np.abs(self.H - self.H.T)) > 1e-9 * scale:
            raise ValueError("H is not symmetric")
        if (self.A_ineq is None) != (self.b_ineq is None):
            raise ValueError("A_ineq and b_ineq must be given together")
        if self.A_ineq is not None:
            self.A_ineq = np.asarray(self.A_ineq, dtype=float).reshape(-1, n)
            self.b_ineq = np.asarray(self.b_ineq, dtype=float).ravel()
            if self.A_ineq.shape[0] != self.b_ineq.size:
                raise ValueError("A_ineq rows and b_ineq length differ")
        for name in ("lb", "ub"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float).ravel()
                if v.size != n:
                    raise ValueError(f"{name} has length {v.size}, expected {n}")
                setattr(self, name, v)
        if self.lb is not None and self.ub is not None and np.any(self.lb > self.ub):
            raise ValueError("lb > ub for some component")

    @property
    def n(self) -> int:
        return self.f.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.H @ x + self.f @ x + self.constant)

    def stacked(self):
        """All constraints as one ``G x <= h`` block (finite bounds only)."""
        n = self.n
        rows, rhs = [], []
        if self.A_ineq is not None and self.A_ineq.shape[0]:
            rows.append(self.A_ineq)
            rhs.append(self.b_ineq)
        eye = np.eye(n)
        if self.ub is not None:
            m = np.isfinite(self.ub)
            rows.append(eye[m])
            rhs.append(self.ub[m])
        if self.lb is not None:
            m = np.isfinite(self.lb)
            rows.append(-eye[m])
            rhs.append(-self.lb[m])
        if not rows:
            return np.zeros((0, n)), np.zeros(0)
        return np.vstack(rows), np.concatenate(rhs)


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: QpStatus
    kkt_residual: float
    iterations: int
    max_violation: float = 0.0
    z: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


def _ruiz(H, G, iters=8):
    n, m = H.shape[0], G.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Hs, Gs = H.copy(), G.copy()
    for _ in range(iters):
        cn = np.max(np.abs(Hs), axis=0) if n else np.zeros(0)
        if m:
            cn = np.maximum(cn, np.max(np.abs(Gs), axis=0))
            rn = np.max(np.abs(Gs), axis=1)
        else:
            rn = np.zeros(0)
        dx = 1.0 / np.sqrt(np.where(cn > 1e-12, cn, 1.0))
        dz = 1.0 / np.sqrt(np.where(rn > 1e-12, rn, 1.0))
        Hs = dx[:, None] * Hs * dx[None, :]
        Gs = dz[:, None] * Gs * dx[None, :]
        D *= dx
        E *= dz
    return Hs, Gs, D, E


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _ipm(H, f, G, h, x0, eps, max_iter):
    """Core predictor-corrector loop on scaled data. Returns (x, s, z, iters, converged)."""
    n, m = H.shape[0], G.shape[0]
    reg0 = 1e-11 * max(1.0, np.max(np.abs(H), initial=0.0))
    if x0 is None:
        # least-squares start: (H + G'G) x = G'h - f, z = Gx - h, s = -z, then shift positive
        x = np.linalg.solve(H + G.T @ G + reg0 * np.eye(n), G.T @ h - f)
        s = h - G @ x
        z = -s.copy()
    else:
        x = x0.copy()
        s = h - G @ x
        z = np.ones(m)
    # Mehrotra's heuristic: shift into the interior, then balance s and z
    s = s + max(-1.5 * float(np.min(s)), 0.0)
    z = z + max(-1.5 * float(np.min(z)), 0.0)
    if not np.any(s > 0):
        s = s + 1.0
    if not np.any(z > 0):
        z = z + 1.0
    sz = float(s @ z)
    s = s + 0.5 * sz / float(np.sum(z))
    z = z + 0.5 * sz / float(np.sum(s))
    reg = 1e-11 * max(1.0, np.max(np.abs(H), initial=0.0))
    I = np.eye(n)
    r0d = r0p = mu0 = None
    best = (np.inf, x.copy(), s.copy(), z.copy(), 0)
    for it in range(1, max_iter + 1):
        rd = H @ x + f + G.T @ z
        rp = G @ x + s - h
        mu = float(s @ z) / m
        if mu0 is None:
            r0d = max(float(np.max(np.abs(rd), initial=0.0)), 1e-300)
            r0p = max(float(np.max(np.abs(rp), initial=0.0)), 1e-300)
            mu0 = max(mu, 1e-300)
        Hx, Gtz, Gx = H @ x, G.T @ z, G @ x
        merit = max(
            np.max(np.abs(rd)) / (1.0 + max(np.max(np.abs(f)), np.max(np.abs(Hx)), np.max(np.abs(Gtz)))),
            np.max(np.abs(rp)) / (1.0 + max(np.max(np.abs(h)), np.max(np.abs(Gx)))),
            mu / (1.0 + abs(0.5 * x @ Hx + f @ x)))
        if merit < best[0]:
            best = (merit, x.copy(), s.copy(), z.copy(), it - 1)
        if merit <= eps:
            return x, s, z, it - 1, True
        if merit > 1e6 * best[0]:
            break  # numerical breakdown; fall back to the best iterate
        W = z / s
        M = H + G.T @ (W[:, None] * G) + reg * I
        try:
            cf = cho_factor(M, check_finite=False)
        except LinAlgError:
            cf = cho_factor(M + 1e-8 * np.trace(M) / n * I, check_finite=False)

        def direction(rc):
            dx = cho_solve(cf, -rd - G.T @ (W * rp - rc / s), check_finite=False)
            dz = W * (G @ dx + rp) - rc / s
            ds = -(rc + s * dz) / z
            return dx, ds, dz

        dx, ds, dz = direction(s * z)
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
        sigma = (mu_aff / mu) ** 3
        # keep centring while infeasibility lags behind the complementarity gap
        lag = max(np.max(np.abs(rd)) / r0d, np.max(np.abs(rp)) / r0p)
        if lag > 10.0 * mu / mu0:
            sigma = max(sigma, 0.3)
        dx, ds, dz = direction(s * z + ds * dz - sigma * mu)
        a = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        x += a * dx
        s += a * ds
        z += a * dz
        if not np.all(np.isfinite(x)) or np.max(z) > 1e14:
            break
    _, x, s, z, it = best
    return x, s, z, it, False


def _residuals(problem, G, h, x, z):
    Hx = problem.H @ x
    Gtz = G.T @ z if G.shape[0] else np.zeros_like(x)
    obj = problem.objective(x)
    stat = np.max(np.abs(Hx + problem.f + Gtz), initial=0.0) / max(
        1.0, np.max(np.abs(Hx), initial=0.0), np.max(np.abs(problem.f), initial=0.0),
        np.max(np.abs(Gtz), initial=0.0))
    if G.shape[0] == 0:
        return stat, 0.0
    gap = h - G @ x
    viol = float(np.max(np.maximum(-gap, 0.0)))
    prim = float(np.max(np.maximum(-gap, 0.0) / np.maximum(1.0, np.abs(h))))
    comp = float(np.max(np.abs(z * np.maximum(gap, 0.0)))) / max(1.0, abs(obj))
    dual = float(np.max(np.maximum(-z, 0.0)))
    return max(stat, prim, comp, dual), viol


def _polish(problem, G, h, x, z, s):
    """Re-solve the KKT system on the apparent active set."""
    act = z > s
    H, f = problem.H, problem.f
    n, k = H.shape[0], int(act.sum())
    Ga = G[act]
    # quasi-definite regularisation plus refinement against the exact KKT matrix
    K = np.zeros((n + k, n + k))
    K[:n, :n] = H
    K[:n, n:] = Ga.T
    K[n:, :n] = Ga
    Kr = K.copy()
    delta = 1e-9 * max(1.0, float(np.max(np.abs(H), initial=0.0)))
    Kr[:n, :n] += delta * np.eye(n)
    Kr[n:, n:] -= delta * np.eye(k)
    rhs = np.concatenate([-f, h[act]])
    try:
        lu = lu_factor(Kr, check_finite=False)
    except (LinAlgError, ValueError):
        return None
    sol = lu_solve(lu, rhs, check_finite=False)
    for _ in range(3):
        sol = sol + lu_solve(lu, rhs - K @ sol, check_finite=False)
    xp = sol[:n]
    zp = np.zeros_like(z)
    zp[act] = sol[n:]
    if not np.all(np.isfinite(xp)) or np.any(zp < -1e-9 * max(1.0, np.max(np.abs(zp)))):
        return None
    return xp, np.maximum(zp, 0.0)


def regularize_hessian(H: np.ndarray) -> np.ndarray:
    """Shift an indefinite Hessian to PSD: H + (|lambda_min| + 1e-8) I."""
    n = H.shape[0]
    if n == 0:
        return H
    scale = max(1.0, float(np.max(np.abs(np.diag(H)))))
    try:
        np.linalg.cholesky(H + 1e-9 * scale * np.eye(n))
        return H
    except np.linalg.LinAlgError:
        pass
    lam = float(np.linalg.eigvalsh(H)[0])
    if lam >= -1e-9 * scale:
        return H
    global _warned
    (log.debug if _warned else log.warning)(
        "indefinite QP Hessian (lambda_min=%.3e); shifting diagonal", lam)
    _warned = True
    return H + (abs(lam) + 1e-8) * np.eye(n)


def solve_qp(problem: QpProblem, tol: float = 1e-6, max_iter: int = 100,
             x0: Optional[np.ndarray] = None) -> QpSolution:
    """Solve ``problem``; ``Optimal`` certifies KKT residual and violation <= ``tol``."""
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float).ravel()
        if x0.size != problem.n:
            raise ValueError("x0 has wrong length")
    H = regularize_hessian(problem.H)
    if H is not problem.H:
        problem = QpProblem(H, problem.f, problem.A_ineq, problem.b_ineq, problem.lb,
                            problem.ub, problem.constant)
    if problem.lb is None or problem.ub is None:
        return _solve(problem, tol, max_iter, x0)
    fixed = np.isfinite(problem.lb) & (problem.lb == problem.ub)
    if not np.any(fixed):
        return _solve(problem, tol, max_iter, x0)
    # substitute fixed components out: lb == ub leaves no interior for the barrier
    free = ~fixed
    xf = problem.lb[fixed]
    Hff = problem.H[np.ix_(free, free)]
    f_red = problem.f[free] + problem.H[np.ix_(free, fixed)] @ xf
    const = problem.constant + 0.5 * xf @ problem.H[np.ix_(fixed, fixed)] @ xf + problem.f[fixed] @ xf
    A = b = None
    if problem.A_ineq is not None:
        A = problem.A_ineq[:, free]
        b = problem.b_ineq - problem.A_ineq[:, fixed] @ xf
    red = QpProblem(Hff, f_red, A, b, problem.lb[free], problem.ub[free], float(const))
    sol = _solve(red, tol, max_iter, None if x0 is None else x0[free])
    x = np.empty(problem.n)
    x[free] = sol.x
    x[fixed] = xf
    G, h = problem.stacked()
    viol = float(np.max(np.maximum(G @ x - h, 0.0), initial=0.0)) if np.all(np.isfinite(x)) else np.inf
    if sol.status is QpStatus.INFEASIBLE:
        viol = sol.max_violation
    return QpSolution(x, problem.objective(x), sol.status, sol.kkt_residual, sol.iterations, viol,
                      sol.z)


def _solve(problem: QpProblem, tol: float, max_iter: int, x0: Optional[np.ndarray]) -> QpSolution:
    H = problem.H
    G, h = problem.stacked()
    n, m = problem.n, G.shape[0]

    if m == 0:
        x = np.linalg.lstsq(H, -problem.f, rcond=None)[0]
        kkt, _ = _residuals(problem, G, h, x, np.zeros(0))
        status = QpStatus.OPTIMAL if kkt <= tol else QpStatus.MAX_ITER
        return QpSolution(x, problem.objective(x), status, kkt, 1)

    Hs, Gs, D, E = _ruiz(H, G)
    fs = D * problem.f
    hs = E * h
    c = 1.0 / max(np.mean(np.max(np.abs(Hs), axis=0)) if n else 0.0,
                  np.max(np.abs(fs), initial=0.0), 1e-4)
    c = min(c, 1e4)
    eps = min(1e-2 * tol, 1e-9)
    xs0 = None if x0 is None else x0 / D
    xs, ss, zs, iters, ok = _ipm(c * Hs, c * fs, Gs, hs, xs0, eps, max_iter)
    x = D * xs
    z = E * zs / c
    s = ss / E

    if np.all(np.isfinite(x)):
        pol = _polish(problem, G, h, x, z, s)
        if pol is not None:
            xp, zp = pol
            kp, vp = _residuals(problem, G, h, xp, zp)
            k0, v0 = _residuals(problem, G, h, x, z)
            if kp <= k0 and vp <= max(v0, 1e-12):
                x, z = xp, zp
        kkt, viol = _residuals(problem, G, h, x, z)
    else:
        kkt, viol = np.inf, np.inf

    if kkt <= tol and viol <= tol:
        return QpSolution(x, problem.objective(x), QpStatus.OPTIMAL, kkt, iters, viol, z)

    t_star = _phase1(G, h, max_iter)
    if t_star > tol:
        return QpSolution(x, problem.objective(x) if np.all(np.isfinite(x)) else np.inf,
                          QpStatus.INFEASIBLE, kkt, iters, t_star, z)
    return QpSolution(x, problem.objective(x), QpStatus.MAX_ITER, kkt, iters, viol, z)


def _phase1(G, h, max_iter) -> float:
    """Smallest uniform violation t with G x - t <= h (bounded below by t >= -1)."""
    m, n = G.shape
    Gp = np.vstack([np.hstack([G, -np.ones((m, 1))]), np.hstack([np.zeros((1, n)), -np.ones((1, 1))])])
    hp = np.concatenate([h, [1.0]])
    Hp = np.zeros((n + 1, n + 1))
    Hp[:n, :n] = 1e-10 * np.eye(n)
    fp = np.zeros(n + 1)
    fp[-1] = 1.0
    Hs, Gs, D, E = _ruiz(Hp, Gp)
    x, s, z, it, ok = _ipm(Hs, D * fp, Gs, E * hp, None, 1e-10, max_iter)
    xp = D * x
    return float(np.max(G @ xp[:n] - h))
