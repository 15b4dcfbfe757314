"""VCG payments with the Clarke pivot, user costs, retailer payoff and the
truthfulness audit.

All functions here work on a single time step unless stated otherwise. Steps
are 1-based, as in the rest of the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import _check_step, user_grid_bounds
from .errors import InfeasibleAllocationError, MechanismError
from .pricing import TariffParams, grid_price
from .retailer import ALLOC_TOL, LeaderStrategyPoint, allocate, leader_band, optimal_aggregate, social_cost

DOMINANCE_TOL = 1e-7
AUDIT_POINTS = 41


@dataclass(frozen=True)
class PaymentRecord:
    user_id: str
    k: float  # paid to the retailer; negative means income
    ses_component: float  # -p_s * x_hat

    @property
    def total_cost(self) -> float:
        return self.ses_component + self.k


@dataclass(frozen=True)
class RetailerPayoff:
    per_step: np.ndarray

    @property
    def cumulative(self) -> float:
        return float(np.sum(self.per_step))


def simplified_payment(e_hat: float, p_s: float) -> float:
    """Closed-form Clarke payment: the user's grid trade at the SES price."""
    return p_s * e_hat


def user_cost(x_hat: float, k: float, p_s: float) -> float:
    return -p_s * x_hat + k


def _others_social_cost(alloc, rho, tariff, e_n, t, skip=None) -> float:
    keep = np.ones(len(alloc.grid), dtype=bool)
    if skip is not None:
        keep[skip] = False
    p_g = grid_price(rho.e_s + e_n + alloc.aggregate, t, tariff)
    return float(np.sum(-rho.p_s * alloc.ses[keep] + p_g * alloc.grid[keep]))


def clarke_payment(n: int, declared, rho: LeaderStrategyPoint, tariff: TariffParams, e_n: float, t: int,
                   tol: float = ALLOC_TOL) -> float:
    """Full VCG payment of user ``n`` (index into ``declared``) at step t.

    The pivot re-solves the retailer problem with user n removed from the
    system; non-participant load is unchanged. Raises ``MechanismError`` if
    either instance cannot be allocated under ``rho``.
    """
    declared = np.asarray(declared, dtype=float)
    if not 0 <= n < len(declared):
        raise IndexError(f"user index {n} out of range")
    target = optimal_aggregate(rho, tariff, e_n, t)
    try:
        full = allocate(target, declared, tol=tol)
    except InfeasibleAllocationError as exc:
        raise MechanismError(f"allocation infeasible with user {n} present: {exc}", step=t) from exc
    others = np.delete(declared, n)
    if others.size:
        try:
            reduced = allocate(target, others, tol=tol)
        except InfeasibleAllocationError as exc:
            raise MechanismError(f"pivot instance without user {n} is infeasible: {exc}", step=t, user=n) from exc
        pivot = social_cost(reduced, rho, tariff, e_n, t)
    else:
        lo, hi = leader_band(others)
        if target < lo - tol or target > hi + tol:
            raise MechanismError(
                f"pivot instance without user {n} is empty and cannot absorb aggregate {target:.6g}",
                step=t, user=n,
            )
        pivot = 0.0
    p_g = grid_price(rho.e_s + e_n + full.aggregate, t, tariff)
    h_with = _others_social_cost(full, rho, tariff, e_n, t, skip=n)
    return p_g * full.grid[n] + h_with - pivot


def payment_records(user_ids, grid, ses, p_s) -> list[list[PaymentRecord]]:
    """Records per user and step from an allocation of shape (users, H)."""
    grid = np.atleast_2d(grid)
    ses = np.atleast_2d(ses)
    return [
        [PaymentRecord(uid, simplified_payment(e, p), -p * x) for e, x, p in zip(g_row, x_row, p_s)]
        for uid, g_row, x_row in zip(user_ids, grid, ses)
    ]


def retailer_payoff(p_s, p_g, e_a) -> RetailerPayoff:
    return RetailerPayoff(per_step=(np.asarray(p_s, dtype=float) - np.asarray(p_g, dtype=float)) * np.asarray(e_a, dtype=float))


def payoff_condition_bound(e_s: float, e_n: float, tariff: TariffParams, t: int) -> float:
    """Price level M(t) the SES price must not undercut (E_A >= 0) or exceed (E_A < 0)."""
    i = _check_step(t, tariff.horizon)
    return float(tariff.phi[i] * (e_s + e_n) + tariff.delta[i])


# --------------------------------------------------------------------- audit


@dataclass(frozen=True)
class AuditRow:
    report: float
    truthful: bool
    feasible: bool
    physical: bool  # assigned grid trade respects the user's true bounds
    grid: float
    payment: float
    cost: float
    pivot: str = "full"  # "full" Clarke form, or "closed-form" when the pivot instance is infeasible


@dataclass
class AuditTable:
    user_id: str
    step: int
    true_surplus: float
    rows: list[AuditRow] = field(default_factory=list)
    tol: float = DOMINANCE_TOL

    @property
    def truthful_cost(self) -> float:
        return next(r.cost for r in self.rows if r.truthful)

    @property
    def best_cost(self) -> float:
        return min(r.cost for r in self.rows if r.feasible)

    @property
    def margin(self) -> float:
        """How much the truthful cost exceeds the best feasible misreport."""
        return self.truthful_cost - self.best_cost

    @property
    def passed(self) -> bool:
        return self.margin <= self.tol

    def as_records(self) -> list[dict]:
        return [
            {"user": self.user_id, "step": self.step, "true_surplus": self.true_surplus,
             "report": r.report, "truthful": r.truthful, "feasible": r.feasible, "physical": r.physical,
             "grid": r.grid, "payment": r.payment, "cost": r.cost, "pivot": r.pivot}
            for r in self.rows
        ]


def misreport_grid(true_surplus: float, points: int = AUDIT_POINTS, min_width: float = 1.0) -> np.ndarray:
    """Evenly spaced reports over [s - |s|, s + |s|] plus the truth."""
    half = max(abs(true_surplus), 0.5 * min_width)
    grid = np.linspace(true_surplus - half, true_surplus + half, points)
    return np.unique(np.append(grid, true_surplus))


def ic_audit(n: int, true_surplus, rho: LeaderStrategyPoint, tariff: TariffParams, e_n: float, t: int,
             reports=None, user_id: str | None = None, tol: float = DOMINANCE_TOL) -> AuditTable:
    """Cost of user n under each candidate report, others truthful, rho fixed.

    ``true_surplus`` holds every participant's true surplus at step t. The
    allocator sees the report; the user's SES trade follows the true energy
    balance x = e_hat + s. Payments use the full Clarke form, falling back to
    the closed form when the pivot instance cannot be allocated. Reports the
    allocator cannot serve are kept as infeasible rows.
    """
    truth = np.asarray(true_surplus, dtype=float)
    s_n = float(truth[n])
    if reports is None:
        reports = misreport_grid(s_n)
    reports = np.unique(np.append(np.asarray(reports, dtype=float), s_n))
    table = AuditTable(user_id or str(n), t, s_n, tol=tol)
    target = optimal_aggregate(rho, tariff, e_n, t)
    lo, hi = user_grid_bounds(s_n)
    for r in reports:
        declared = truth.copy()
        declared[n] = r
        try:
            alloc = allocate(target, declared)
        except InfeasibleAllocationError:
            table.rows.append(AuditRow(float(r), r == s_n, False, False, np.nan, np.nan, np.nan, "none"))
            continue
        e_hat = float(alloc.grid[n])
        try:
            k, pivot = clarke_payment(n, declared, rho, tariff, e_n, t), "full"
        except MechanismError:
            k, pivot = simplified_payment(e_hat, rho.p_s), "closed-form"
        cost = user_cost(e_hat + s_n, k, rho.p_s)
        physical = lo - ALLOC_TOL <= e_hat <= hi + ALLOC_TOL
        table.rows.append(AuditRow(float(r), r == s_n, True, physical, e_hat, k, cost, pivot))
    if not any(row.truthful and row.feasible for row in table.rows):
        raise MechanismError("truthful report is not feasible under the given strategy", step=t, user=n)
    return table
