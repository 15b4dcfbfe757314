"""Dense convex QP solver used by the leader.

Solves ``min 1/2 x'Qx + c'x  s.t.  A x = b,  G x <= h`` with a Mehrotra
predictor-corrector interior-point method, then polishes the result by
re-solving the equality-constrained KKT system on the identified active set.
Q must be positive semidefinite. Sizes here are a few hundred variables at
most, so everything is dense numpy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import lsq_linear

log = logging.getLogger(__name__)


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray  # equality multipliers
    z: np.ndarray  # inequality multipliers (>= 0)
    status: str  # "optimal", "max-iter", "stalled", "infeasible", "numerical"
    iterations: int
    kkt_residual: float
    polished: bool
    objective: float

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _objective(Q, c, x) -> float:
    return float(0.5 * x @ Q @ x + c @ x)


def kkt_residual(Q, c, G, h, A, b, x, y, z) -> float:
    """Largest violation among stationarity, primal feasibility, dual sign and
    complementary slackness."""
    stat = Q @ x + c
    if A.shape[0]:
        stat = stat + A.T @ y
    parts = []
    if G.shape[0]:
        stat = stat + G.T @ z
        slack = h - G @ x
        parts += [np.max(np.maximum(-slack, 0.0)), np.max(np.maximum(-z, 0.0)), np.max(np.abs(z * slack))]
    if A.shape[0]:
        parts.append(np.max(np.abs(A @ x - b)))
    parts.append(np.max(np.abs(stat)))
    return float(max(parts))


def _solve_kkt(H, A, rhs_x, rhs_y, reg=1e-13):
    n, m = H.shape[0], A.shape[0]
    if m == 0:
        try:
            return np.linalg.solve(H, rhs_x), np.zeros(0)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(H, rhs_x, rcond=None)[0], np.zeros(0)
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = A.T
    K[n:, :n] = A
    K[n:, n:] = -reg * np.eye(m)
    rhs = np.concatenate([rhs_x, rhs_y])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _step_length(v, dv, frac=0.995):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, frac * float(np.min(-v[neg] / dv[neg])))


def interior_point(Q, c, G, h, A, b, tol=1e-10, max_iter=200, x0=None):
    n = len(c)
    m_in, m_eq = G.shape[0], A.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    y = np.zeros(m_eq)
    s = np.maximum(h - G @ x, 1.0)
    z = np.ones(m_in)
    scale_d = 1.0 + np.max(np.abs(c), initial=0.0)
    scale_p = 1.0 + max(np.max(np.abs(h), initial=0.0), np.max(np.abs(b), initial=0.0))
    status = "max-iter"
    best = None
    it = 0
    for it in range(1, max_iter + 1):
        r_d = Q @ x + c + A.T @ y + G.T @ z
        r_eq = A @ x - b
        r_in = G @ x + s - h
        mu = float(s @ z) / m_in if m_in else 0.0
        res_p = max(np.max(np.abs(r_eq), initial=0.0), np.max(np.abs(r_in), initial=0.0))
        res_d = np.max(np.abs(r_d))
        merit = max(res_p / scale_p, res_d / scale_d, mu)
        if best is None or merit < best[0]:
            best = (merit, x.copy(), y.copy(), z.copy())
        if merit <= tol:
            status = "optimal"
            break
        if m_in and np.max(z) > 1e14:
            status = "infeasible"
            break
        w = z / s
        H = Q + (G.T * w) @ G

        def direction(r_c):
            rhs = -r_d + G.T @ ((r_c - z * r_in) / s)
            dx, dy = _solve_kkt(H, A, rhs, -r_eq)
            ds = -r_in - G @ dx
            dz = -(r_c + z * ds) / s
            return dx, dy, ds, dz

        r_c = s * z
        dx, dy, ds, dz = direction(r_c)
        a_aff = min(_step_length(s, ds, 1.0), _step_length(z, dz, 1.0))
        if m_in:
            mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m_in
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            r_c = s * z + ds * dz - sigma * mu
            dx, dy, ds, dz = direction(r_c)
        alpha = min(_step_length(s, ds), _step_length(z, dz))
        if alpha < 1e-10:
            # stalled at the limit of floating-point accuracy
            status = "stalled"
            break
        x += alpha * dx
        y += alpha * dy
        s += alpha * ds
        z += alpha * dz
        if not np.all(np.isfinite(x)):
            status = "numerical"
            break
    if status in ("max-iter", "stalled") and best is not None:
        _, x, y, z = best
    return x, y, z, status, it


def polish(Q, c, G, h, A, b, x, z, feas_tol=1e-9, ratio=1.0):
    """Solve the KKT system restricted to the active set guessed from (x, z).

    A constraint is taken as active when its multiplier exceeds ``ratio``
    times its slack. Returns (x, y, z) or None when the guess does not give
    a KKT point.
    """
    n = len(c)
    slack = h - G @ x
    active = np.flatnonzero(z > ratio * np.maximum(slack, 1e-12))
    C = np.vstack([A, G[active]]) if active.size else A
    d = np.concatenate([b, h[active]]) if active.size else b
    k = C.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = Q
    K[:n, n:] = C.T
    K[n:, :n] = C
    rhs = np.concatenate([-c, d])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    xp = sol[:n]
    mult = sol[n:]
    yp = mult[: A.shape[0]]
    zp = np.zeros(G.shape[0])
    zp[active] = mult[A.shape[0]:]
    scale = 1.0 + np.max(np.abs(h), initial=0.0)
    if G.shape[0] and np.max(G @ xp - h) > feas_tol * scale:
        return None
    if A.shape[0] and np.max(np.abs(A @ xp - b)) > feas_tol * scale:
        return None
    if zp.size and np.min(zp) < -feas_tol * (1.0 + np.max(np.abs(zp))):
        if active.size == 0:
            return None
        # dependent active rows leave the multipliers non-unique; pick
        # sign-correct ones by bounded least squares on stationarity
        m = A.shape[0]
        lower = np.concatenate([np.full(m, -np.inf), np.zeros(active.size)])
        fit = lsq_linear(C.T, -(Q @ xp + c), bounds=(lower, np.inf), method="bvls")
        yp = fit.x[:m]
        zp = np.zeros(G.shape[0])
        zp[active] = fit.x[m:]
    return xp, yp, np.maximum(zp, 0.0)


def solve_qp(Q, c, G=None, h=None, A=None, b=None, tol=1e-8, max_iter=200, x0=None) -> QPResult:
    Q = np.asarray(Q, dtype=float)
    c = np.asarray(c, dtype=float)
    n = len(c)
    G = np.zeros((0, n)) if G is None else np.asarray(G, dtype=float)
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float)
    A = np.zeros((0, n)) if A is None else np.asarray(A, dtype=float)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float)

    x, y, z, status, iters = interior_point(Q, c, G, h, A, b, tol=min(tol, 1e-9), max_iter=max_iter, x0=x0)
    if status in ("infeasible", "numerical"):
        return QPResult(x, y, z, status, iters, float("inf"), False, _objective(Q, c, x))

    res = kkt_residual(Q, c, G, h, A, b, x, y, z)
    polished = False
    # small multipliers on weakly binding constraints can sit below their
    # slacks, so looser active-set guesses are tried as well
    for ratio in (1.0, 1e-2, 1e-4):
        cand = polish(Q, c, G, h, A, b, x, z, ratio=ratio)
        if cand is None:
            continue
        xp, yp, zp = cand
        res_p = kkt_residual(Q, c, G, h, A, b, xp, yp, zp)
        if res_p < res:
            x, y, z, res, polished = xp, yp, zp, res_p, True
    scale = 1.0 + max(np.max(np.abs(c), initial=0.0), np.max(np.abs(h), initial=0.0), np.max(np.abs(b), initial=0.0))
    if res <= tol * scale:
        status = "optimal"
    elif status in ("optimal", "stalled"):
        status = "numerical"
    log.debug("qp: status=%s iters=%d kkt=%.3g polished=%s", status, iters, res, polished)
    return QPResult(x, y, z, status, iters, res, polished, _objective(Q, c, x))
