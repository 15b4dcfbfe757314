"""Reported quantities: grid load statistics, social and community cost,
per-group user costs, the baseline without storage, and ledger checks."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LoadValidationError
from .mechanism import retailer_payoff
from .pricing import grid_prices, validate_total_load
from .scenario import Scenario
from .stackelberg import EquilibriumResult

LEDGER_TOL = 1e-9


def par(load) -> float:
    """Peak-to-average ratio of a load profile."""
    load = np.asarray(load, dtype=float)
    mean = load.mean()
    if not mean > 0:
        raise ValueError("peak-to-average ratio needs a positive mean load")
    return float(load.max() / mean)


@dataclass
class RunReport:
    label: str
    grid_load: np.ndarray
    grid_price: np.ndarray
    ses_price: np.ndarray | None  # absent in the baseline
    ses_exchange: np.ndarray
    aggregate: np.ndarray  # E_P
    e_n: np.ndarray
    social_cost_steps: np.ndarray
    community_cost: float
    retailer_payoff: float
    participant_costs: dict[str, float]
    non_participant_costs: dict[str, float]
    charge: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def par(self) -> float:
        return par(self.grid_load)

    @property
    def social_cost(self) -> float:
        return float(np.sum(self.social_cost_steps))

    @property
    def participating_mean(self) -> float | None:
        return float(np.mean(list(self.participant_costs.values()))) if self.participant_costs else None

    @property
    def non_participating_mean(self) -> float | None:
        return float(np.mean(list(self.non_participant_costs.values()))) if self.non_participant_costs else None

    def summary(self) -> dict:
        return {
            "label": self.label,
            "par": self.par,
            "peak_load": float(self.grid_load.max()),
            "social_cost": self.social_cost,
            "community_cost": self.community_cost,
            "retailer_payoff": self.retailer_payoff,
            "participating_mean_cost": self.participating_mean,
            "non_participating_mean_cost": self.non_participating_mean,
            **self.extra,
        }

    def to_dict(self) -> dict:
        out = self.summary()
        out["steps"] = self.step_records()
        out["participant_costs"] = self.participant_costs
        out["non_participant_costs"] = self.non_participant_costs
        return out

    def step_records(self) -> list[dict]:
        rows = []
        for i in range(len(self.grid_load)):
            rows.append({
                "step": i + 1,
                "grid_load": float(self.grid_load[i]),
                "grid_price": float(self.grid_price[i]),
                "ses_price": None if self.ses_price is None else float(self.ses_price[i]),
                "ses_exchange": float(self.ses_exchange[i]),
                "participant_grid_load": float(self.aggregate[i]),
                "non_participant_load": float(self.e_n[i]),
                "social_cost": float(self.social_cost_steps[i]),
                "ses_charge": None if self.charge is None else float(self.charge[i]),
            })
        return rows


def _check_load(E, scenario: Scenario):
    report = validate_total_load(E, scenario.tariff)
    if not report.passed:
        raise LoadValidationError(
            "grid load leaves (0, E_max)",
            violations=[(v.kind, v.step, v.magnitude) for v in report.violations],
        )


def baseline_run(scenario: Scenario) -> RunReport:
    """No storage: participants trade their whole surplus with the grid at p_g."""
    surplus = scenario.surplus
    aggregate = -surplus.sum(axis=0)
    e_n = scenario.e_n
    E = e_n + aggregate
    _check_load(E, scenario)
    p_g = grid_prices(E, scenario.tariff)
    social = p_g * aggregate
    part = {u.id: float(np.sum(p_g * -u.surplus_vector)) for u in scenario.participants}
    non = {u.id: float(np.sum(p_g * -u.surplus_vector)) for u in scenario.non_participants}
    return RunReport(
        label="baseline", grid_load=E, grid_price=p_g, ses_price=None, ses_exchange=np.zeros_like(E),
        aggregate=aggregate, e_n=e_n, social_cost_steps=social,
        community_cost=float(np.sum(p_g * aggregate)), retailer_payoff=0.0,
        participant_costs=part, non_participant_costs=non,
    )


def social_cost_steps(result: EquilibriumResult) -> np.ndarray:
    """Per-step social cost of the participants evaluated term by term."""
    p_s, p_g = result.strategy.p_s, result.grid_price
    return np.sum(-p_s * result.response.ses + p_g * result.response.grid, axis=0)


def community_cost(result: EquilibriumResult, scenario: Scenario) -> float:
    p_g = result.grid_price
    e_a = result.aggregate + scenario.e_n
    return float(np.sum(p_g * (result.strategy.e_s + e_a) - result.strategy.p_s * scenario.e_n))


def community_cost_by_parties(result: EquilibriumResult, scenario: Scenario) -> float:
    """Same quantity rebuilt from the SES provider's, participants' and retailer's own costs."""
    p_s, p_g = result.strategy.p_s, result.grid_price
    ses_cost = -np.sum(-p_s * result.response.ses_total - p_g * result.strategy.e_s)
    users = np.sum(result.user_costs)
    retailer = -retailer_payoff(p_s, p_g, result.aggregate + scenario.e_n).cumulative
    return float(ses_cost + users + retailer)


@dataclass(frozen=True)
class GroupCosts:
    participating: float | None
    non_participating: float | None


def group_costs(result: EquilibriumResult, scenario: Scenario) -> GroupCosts:
    """Mean daily cost per group; a group with no members is reported as None."""
    costs = result.user_costs.sum(axis=1)
    part = float(np.mean(costs)) if costs.size else None
    non = [float(np.sum(result.strategy.p_s * u.surplus_vector * -1.0)) for u in scenario.non_participants]
    return GroupCosts(part, float(np.mean(non)) if non else None)


def system_report(result: EquilibriumResult, scenario: Scenario) -> RunReport:
    p_s = result.strategy.p_s
    part = dict(zip(result.user_ids, (float(c) for c in result.user_costs.sum(axis=1))))
    non = {u.id: float(np.sum(p_s * -u.surplus_vector)) for u in scenario.non_participants}
    return RunReport(
        label="system", grid_load=result.grid_load, grid_price=result.grid_price, ses_price=p_s,
        ses_exchange=result.strategy.e_s, aggregate=result.aggregate, e_n=scenario.e_n,
        social_cost_steps=social_cost_steps(result), community_cost=community_cost(result, scenario),
        retailer_payoff=result.retailer_payoff.cumulative, participant_costs=part, non_participant_costs=non,
        charge=result.state.charge,
        extra={"ses_revenue": result.revenue, "rounds": result.rounds},
    )


def par_reduction(report: RunReport, baseline: RunReport) -> float:
    b = baseline.par
    return 100.0 * (b - report.par) / b


# ------------------------------------------------------------------- ledgers


def energy_residual(result: EquilibriumResult, scenario: Scenario) -> np.ndarray:
    """E(t) - (e_s + E_N + sum of allocated grid trades) at every step."""
    E = result.grid_load
    return E - (result.strategy.e_s + scenario.e_n + result.response.grid.sum(axis=0))


def money_ledger(result: EquilibriumResult, scenario: Scenario) -> dict[str, np.ndarray]:
    """Cash received by each party at every step (negative = paid out).

    Participants pay the SES and the retailer, non-participants pay the
    retailer at p_s, the SES provider pays for its grid exchange, the retailer
    pays the grid for E_A and the grid receives both bills. Rows sum to zero.
    """
    p_s, p_g = result.strategy.p_s, result.grid_price
    x, k = result.response.ses, result.payments
    e_n, e_s = scenario.e_n, result.strategy.e_s
    e_a = result.aggregate + e_n
    users = np.sum(p_s * x - k, axis=0)
    non = -p_s * e_n
    ses = -p_s * x.sum(axis=0) - p_g * e_s
    retailer = k.sum(axis=0) + p_s * e_n - p_g * e_a
    grid = p_g * (e_s + e_a)
    return {"participants": users, "non_participants": non, "ses": ses, "retailer": retailer, "grid": grid}


@dataclass(frozen=True)
class LedgerCheck:
    energy: float  # worst energy-balance residual
    money: float  # worst per-step sum over parties
    retailer: float  # worst gap between retailer cash and the payoff formula
    tol: float = LEDGER_TOL

    @property
    def passed(self) -> bool:
        return max(self.energy, self.money, self.retailer) <= self.tol


def check_ledgers(result: EquilibriumResult, scenario: Scenario, tol: float = LEDGER_TOL) -> LedgerCheck:
    ledger = money_ledger(result, scenario)
    total = sum(ledger.values())
    scale = 1.0 + max(np.max(np.abs(v)) for v in ledger.values())
    gap = ledger["retailer"] - result.retailer_payoff.per_step
    return LedgerCheck(
        energy=float(np.max(np.abs(energy_residual(result, scenario)))),
        money=float(np.max(np.abs(total)) / scale),
        retailer=float(np.max(np.abs(gap)) / scale),
        tol=tol,
    )


# -------------------------------------------------------------------- output


def write_json(obj, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")
    tmp.replace(path)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def write_csv(rows: list[dict], path, header: list[str] | None = None) -> None:
    """Write dict rows to CSV; ``header`` lines are emitted first as ``# ...`` comments."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        for line in header or []:
            fh.write(f"# {line}\n")
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    tmp.replace(path)


def read_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))
