"""Time grid, user profiles, storage physics and the feasibility bounds shared by
the rest of the package.

Energies are kWh. Time steps are 1-based in the public API (t = 1..H) and
0-based in arrays; the initial storage charge ``b0`` is kept apart from the
length-H trajectory so that ``charge[t-1]`` is the level at the end of step t.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_STORAGE_TOL = 1e-6


def _as_vector(values, name: str, length: int | None = None) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if length is not None and arr.shape[0] != length:
        raise ValueError(f"{name}: expected length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite entries")
    arr.setflags(write=False)
    return arr


def _check_step(t: int, horizon: int) -> int:
    if not 1 <= t <= horizon:
        raise IndexError(f"time step {t} outside 1..{horizon}")
    return t - 1


@dataclass(frozen=True)
class TimeGrid:
    steps: int
    step_hours: float = 0.5

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")
        if not self.step_hours > 0:
            raise ValueError("step_hours must be positive")

    @property
    def hours(self) -> np.ndarray:
        """Clock time (hours since midnight) at the start of each step."""
        return np.arange(self.steps) * self.step_hours


@dataclass(frozen=True)
class UserProfile:
    id: str
    demand: np.ndarray
    generation: np.ndarray
    participating: bool = True

    def __post_init__(self):
        d = _as_vector(self.demand, f"user {self.id}: demand")
        g = _as_vector(self.generation, f"user {self.id}: generation", len(d))
        if np.any(d < 0):
            raise ValueError(f"user {self.id}: negative demand")
        if np.any(g < 0):
            raise ValueError(f"user {self.id}: negative generation")
        object.__setattr__(self, "demand", d)
        object.__setattr__(self, "generation", g)

    @property
    def horizon(self) -> int:
        return len(self.demand)

    @property
    def surplus_vector(self) -> np.ndarray:
        return self.generation - self.demand


def surplus(profile: UserProfile, t: int) -> float:
    """Surplus g(t) - d(t) of a user at 1-based step t.

    Positive values put the user in the surplus set at t, negative values in
    the deficit set.
    """
    i = _check_step(t, profile.horizon)
    return float(profile.generation[i] - profile.demand[i])


@dataclass(frozen=True)
class SurplusReport:
    user_id: str
    declared: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "declared", _as_vector(self.declared, f"report {self.user_id}"))


def truthful_report(profile: UserProfile) -> SurplusReport:
    return SurplusReport(profile.id, profile.surplus_vector)


def grid_trade_from_ses_trade(x, s):
    """Grid trade e = x - s implied by the user energy balance (e > 0 buys from grid)."""
    return x - s


def ses_trade_from_grid_trade(e, s):
    return e + s


def user_grid_bounds(declared: float) -> tuple[float, float]:
    """Interval of grid trades a user may be allocated given a declared surplus."""
    if declared > 0:
        return (-float(declared), 0.0)
    if declared < 0:
        return (0.0, -float(declared))
    return (0.0, 0.0)


@dataclass(frozen=True)
class FlowSplit:
    """Charge (``plus``) and discharge (``minus``) components of a signed flow."""

    plus: float = 0.0
    minus: float = 0.0

    def __post_init__(self):
        if self.plus < 0 or self.minus < 0:
            raise ValueError("flow components must be non-negative")

    @classmethod
    def from_net(cls, net: float) -> "FlowSplit":
        net = float(net)
        return cls(plus=max(net, 0.0), minus=max(-net, 0.0))

    @property
    def net(self) -> float:
        return self.plus - self.minus

    @property
    def complementary(self) -> bool:
        return self.plus * self.minus == 0.0


def split_net(values) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised canonical split: positive part and negative part."""
    arr = np.asarray(values, dtype=float)
    return np.maximum(arr, 0.0), np.maximum(-arr, 0.0)


@dataclass(frozen=True)
class SesParams:
    capacity: float
    leakage: float = 1.0
    charge_eff: float = 1.0
    discharge_eff: float = 1.0
    initial_charge: float = 0.0

    def __post_init__(self):
        if not self.capacity > 0:
            raise ValueError("capacity must be positive")
        if not 0 < self.leakage <= 1:
            raise ValueError("leakage factor must lie in (0, 1]")
        if not 0 < self.charge_eff <= 1:
            raise ValueError("charge efficiency must lie in (0, 1]")
        if not self.discharge_eff >= 1:
            raise ValueError("discharge inefficiency must be >= 1")
        if not 0 <= self.initial_charge <= self.capacity:
            raise ValueError("initial charge must lie in [0, capacity]")

    @classmethod
    def case_study_defaults(cls, steps: int = 48, capacity: float = 80.0) -> "SesParams":
        return cls(
            capacity=capacity,
            leakage=0.9 ** (1.0 / steps),
            charge_eff=0.9,
            discharge_eff=1.1,
            initial_charge=0.25 * capacity,
        )


def step_charge(b_prev: float, ses_flow: FlowSplit, user_flows: FlowSplit, params: SesParams) -> float:
    """Storage level after one step. Bounds are not enforced here."""
    return (
        params.leakage * b_prev
        + params.charge_eff * (ses_flow.plus + user_flows.plus)
        - params.discharge_eff * (ses_flow.minus + user_flows.minus)
    )


@dataclass(frozen=True)
class SesState:
    params: SesParams
    charge: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "charge", _as_vector(self.charge, "charge"))

    @property
    def b0(self) -> float:
        return self.params.initial_charge


def charge_trajectory(
    params: SesParams,
    ses_plus: Sequence[float],
    ses_minus: Sequence[float],
    user_plus: Sequence[float],
    user_minus: Sequence[float],
) -> SesState:
    """Roll ``step_charge`` over the horizon starting from ``params.initial_charge``."""
    ses_plus, ses_minus = np.asarray(ses_plus, float), np.asarray(ses_minus, float)
    user_plus, user_minus = np.asarray(user_plus, float), np.asarray(user_minus, float)
    b = params.initial_charge
    out = np.empty(len(ses_plus))
    for i in range(len(ses_plus)):
        b = step_charge(
            b,
            FlowSplit(ses_plus[i], ses_minus[i]),
            FlowSplit(user_plus[i], user_minus[i]),
            params,
        )
        out[i] = b
    return SesState(params, out)


@dataclass(frozen=True)
class Violation:
    kind: str
    step: int | None
    magnitude: float


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.passed

    def steps(self, kind: str | None = None) -> list[int]:
        return [v.step for v in self.violations if kind is None or v.kind == kind]


def validate_trajectory(state: SesState, tol: float = DEFAULT_STORAGE_TOL) -> ValidationReport:
    """Check capacity bounds at every step and the end-of-horizon boundary condition.

    Steps in the report are 1-based. The bound checks use the same tolerance as
    the boundary check so that solver round-off is not reported.
    """
    q = state.params.capacity
    found = []
    for i, b in enumerate(state.charge):
        if b < -tol:
            found.append(Violation("below-zero", i + 1, float(-b)))
        elif b > q + tol:
            found.append(Violation("above-capacity", i + 1, float(b - q)))
    gap = float(state.charge[-1] - state.b0)
    if abs(gap) > tol:
        found.append(Violation("boundary", len(state.charge), gap))
    return ValidationReport(tuple(found))
