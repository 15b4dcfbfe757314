"""The follower: social-cost minimisation by the retailer and the proportional
grid-energy allocation among participating users."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import _check_step, user_grid_bounds
from .errors import InfeasibleAllocationError
from .pricing import TariffParams, grid_price

ALLOC_TOL = 1e-7


class StepType(str, Enum):
    SURPLUS = "surplus"
    DEFICIT = "deficit"
    MIXED = "mixed"
    EMPTY = "empty"  # every declared surplus is exactly zero


def step_type(declared) -> StepType:
    declared = np.asarray(declared, dtype=float)
    pos = bool(np.any(declared > 0))
    neg = bool(np.any(declared < 0))
    if pos and neg:
        return StepType.MIXED
    if pos:
        return StepType.SURPLUS
    if neg:
        return StepType.DEFICIT
    return StepType.EMPTY


def leader_band(declared) -> tuple[float, float]:
    """Range of aggregate grid trade the leader must keep the follower optimum in.

    Same-type steps allow the full aggregate range; mixed (and all-zero) steps
    force the aggregate to zero.
    """
    kind = step_type(declared)
    total = float(np.sum(declared))
    if kind is StepType.SURPLUS:
        return (-total, 0.0)
    if kind is StepType.DEFICIT:
        return (0.0, -total)
    return (0.0, 0.0)


def aggregate_bounds(declared) -> tuple[float, float]:
    """Minkowski sum of the per-user bounds, i.e. every attainable E_P."""
    lo = hi = 0.0
    for s in np.asarray(declared, dtype=float):
        a, b = user_grid_bounds(s)
        lo += a
        hi += b
    return lo, hi


@dataclass(frozen=True)
class LeaderStrategyPoint:
    p_s: float
    e_s: float

    def __post_init__(self):
        if self.p_s < 0:
            raise ValueError("SES price must be non-negative")


@dataclass(frozen=True)
class Allocation:
    grid: np.ndarray  # per-user e_hat
    ses: np.ndarray  # per-user x_hat
    declared: np.ndarray

    @property
    def aggregate(self) -> float:
        return float(np.sum(self.grid))

    @property
    def ses_total(self) -> float:
        return float(np.sum(self.ses))

    def within_bounds(self, tol: float = ALLOC_TOL) -> bool:
        for e, s in zip(self.grid, self.declared):
            lo, hi = user_grid_bounds(s)
            if e < lo - tol or e > hi + tol:
                return False
        return True


def optimal_aggregate(rho: LeaderStrategyPoint, tariff: TariffParams, e_n: float, t: int) -> float:
    """Unconstrained minimiser of the social cost in the aggregate E_P at 1-based step t."""
    i = _check_step(t, tariff.horizon)
    return 0.5 * ((rho.p_s - tariff.delta[i]) / tariff.phi[i] - e_n - rho.e_s)


def optimal_aggregates(p_s, e_s, tariff: TariffParams, e_n) -> np.ndarray:
    """Vectorised ``optimal_aggregate`` over the horizon."""
    return 0.5 * ((np.asarray(p_s) - tariff.delta) / tariff.phi - np.asarray(e_n) - np.asarray(e_s))


def allocate(aggregate: float, declared, tol: float = ALLOC_TOL) -> Allocation:
    """Split the aggregate grid trade among users.

    Same-type steps share ``aggregate`` in proportion to the declared surplus
    (zero reporters get zero). Mixed steps give every user a zero grid trade.
    The caller is responsible for the aggregate lying in the leader band; a
    violation larger than ``tol`` raises ``InfeasibleAllocationError``.
    """
    declared = np.array(declared, dtype=float)
    kind = step_type(declared)
    if kind in (StepType.MIXED, StepType.EMPTY):
        if abs(aggregate) > tol:
            raise InfeasibleAllocationError(
                f"{kind.value} step cannot absorb a non-zero aggregate {aggregate:.6g}",
                aggregate=aggregate,
            )
        grid = np.zeros_like(declared)
    else:
        lo, hi = leader_band(declared)
        if aggregate < lo - tol or aggregate > hi + tol:
            raise InfeasibleAllocationError(
                f"aggregate {aggregate:.6g} outside feasible band [{lo:.6g}, {hi:.6g}]",
                aggregate=aggregate,
                band=(lo, hi),
            )
        grid = aggregate * declared / declared.sum()
    return Allocation(grid=grid, ses=grid + declared, declared=declared)


def social_cost(allocation: Allocation, rho: LeaderStrategyPoint, tariff: TariffParams, e_n: float, t: int) -> float:
    """Social cost at one step, evaluated term by term from the allocation."""
    p_g = grid_price(rho.e_s + e_n + allocation.aggregate, t, tariff)
    return float(np.sum(-rho.p_s * allocation.ses + p_g * allocation.grid))


def social_cost_of_aggregate(
    aggregate, rho: LeaderStrategyPoint, tariff: TariffParams, e_n: float, declared_total: float, t: int
):
    """Social cost written as a quadratic in the aggregate grid trade (accepts arrays)."""
    i = _check_step(t, tariff.horizon)
    phi, delta = tariff.phi[i], tariff.delta[i]
    return (
        phi * aggregate**2
        + (phi * (e_n + rho.e_s) + delta - rho.p_s) * aggregate
        - rho.p_s * declared_total
    )


@dataclass(frozen=True)
class FollowerResponse:
    """Best response of the retailer over the whole horizon.

    ``grid`` and ``ses`` have shape (users, H). ``target`` is the closed-form
    optimum, ``aggregate`` the allocated sum (they differ only by round-off).
    """

    target: np.ndarray
    grid: np.ndarray
    ses: np.ndarray

    @property
    def aggregate(self) -> np.ndarray:
        return self.grid.sum(axis=0)

    @property
    def ses_total(self) -> np.ndarray:
        return self.ses.sum(axis=0)

    @property
    def ses_plus(self) -> np.ndarray:
        return np.maximum(self.ses, 0.0).sum(axis=0)

    @property
    def ses_minus(self) -> np.ndarray:
        return np.maximum(-self.ses, 0.0).sum(axis=0)


def follower_response(p_s, e_s, declared: np.ndarray, tariff: TariffParams, e_n, tol: float = ALLOC_TOL) -> FollowerResponse:
    declared = np.atleast_2d(np.asarray(declared, dtype=float))
    target = optimal_aggregates(p_s, e_s, tariff, e_n)
    grid = np.empty_like(declared)
    ses = np.empty_like(declared)
    for t in range(declared.shape[1]):
        alloc = allocate(target[t], declared[:, t], tol=tol)
        grid[:, t] = alloc.grid
        ses[:, t] = alloc.ses
    return FollowerResponse(target=target, grid=grid, ses=ses)
