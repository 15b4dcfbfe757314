"""Best-response iteration between the SES provider and the retailer, and a
sampling certificate for the resulting equilibrium."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import FlowSplit, SesState
from .errors import LeaderInfeasibleError, LoadValidationError, NonConvergenceError, RepairError
from .leader import (
    NONNEG,
    LeaderProblem,
    LeaderSolution,
    LeaderStrategy,
    SolverConfig,
    build_problem,
    initial_strategy,
    payoff_cases,
    revenue,
    solve_leader,
    split_and_repair,
)
from .mechanism import retailer_payoff, simplified_payment, user_cost
from .pricing import grid_prices, validate_total_load
from .retailer import (
    FollowerResponse,
    LeaderStrategyPoint,
    follower_response,
    leader_band,
    social_cost_of_aggregate,
)
from .scenario import Scenario

log = logging.getLogger(__name__)

CERT_TOL = 1e-9
CASE_TOL = 1e-7


@dataclass(frozen=True)
class IterationConfig:
    tau: float = 1e-4
    max_rounds: int = 500
    relaxation: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if not 0 < self.relaxation <= 1:
            raise ValueError("relaxation must lie in (0, 1]")


@dataclass(frozen=True)
class EquilibriumResult:
    strategy: LeaderStrategy
    response: FollowerResponse
    declared: np.ndarray  # (participants, H) surplus seen by the retailer
    user_ids: tuple[str, ...]
    e_n: np.ndarray
    rounds: int
    history: tuple[float, ...]
    problem: LeaderProblem
    solution: LeaderSolution
    flows: tuple[FlowSplit, ...]
    state: SesState

    @property
    def aggregate(self) -> np.ndarray:
        return self.response.aggregate

    @property
    def grid_load(self) -> np.ndarray:
        return self.strategy.e_s + self.e_n + self.aggregate

    @property
    def grid_price(self) -> np.ndarray:
        return grid_prices(self.grid_load, self.problem.tariff)

    @property
    def payments(self) -> np.ndarray:
        """k_n(t) for every participant, shape (participants, H)."""
        return simplified_payment(self.response.grid, self.strategy.p_s)

    @property
    def user_costs(self) -> np.ndarray:
        return user_cost(self.response.ses, self.payments, self.strategy.p_s)

    @property
    def revenue(self) -> float:
        return revenue(self.strategy, self.response.ses_total, self.grid_price)

    @property
    def retailer_payoff(self):
        return retailer_payoff(self.strategy.p_s, self.grid_price, self.aggregate + self.e_n)

    def summary(self) -> dict:
        return {
            "rounds": self.rounds,
            "final_change": self.history[-1] if self.history else 0.0,
            "revenue": self.revenue,
            "retailer_payoff": self.retailer_payoff.cumulative,
            "kkt_residual": self.solution.kkt_residual,
        }


def _relative_change(new: LeaderStrategy, old: LeaderStrategy) -> float:
    a, b = new.vector(), old.vector()
    denom = np.linalg.norm(a)
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else float(np.linalg.norm(a - b))


def _cases_hold(cases, e_a, tol: float = CASE_TOL) -> bool:
    """True when every step's E_A is on the side its frozen case assumed.

    Values within ``tol`` of zero are compatible with either case, since both
    payoff bounds then coincide.
    """
    e_a = np.asarray(e_a)
    return all((a >= -tol) if c == NONNEG else (a <= tol) for c, a in zip(cases, e_a))


def _leader_step(declared, scenario: Scenario, response: FollowerResponse, solver: SolverConfig):
    """One leader solve with the payoff-bound case frozen from ``response``.

    If the new follower response puts E_A on the other side of zero at some
    step, the problem is rebuilt with the updated cases and solved once more.
    """
    e_n = scenario.e_n
    problem = build_problem(declared, scenario.tariff, e_n, response, scenario.ses, solver.p_min)
    sol = solve_leader(problem, solver)
    new_resp = follower_response(sol.strategy.p_s, sol.strategy.e_s, declared, scenario.tariff, e_n)
    if not _cases_hold(problem.payoff_case, new_resp.aggregate + e_n):
        cases = payoff_cases(new_resp.aggregate, e_n)
        log.debug("payoff case flipped at %d steps; re-solving",
                  sum(a != b for a, b in zip(cases, problem.payoff_case)))
        problem = build_problem(declared, scenario.tariff, e_n, response, scenario.ses, solver.p_min, payoff_case=cases)
        sol = solve_leader(problem, solver)
        new_resp = follower_response(sol.strategy.p_s, sol.strategy.e_s, declared, scenario.tariff, e_n)
        if not _cases_hold(cases, new_resp.aggregate + e_n):
            raise LeaderInfeasibleError(
                "retailer payoff condition changes side again after re-solving",
                family="retailer-payoff",
            )
    return problem, sol


def iterate(scenario: Scenario, config: IterationConfig = IterationConfig(), start: LeaderStrategy | None = None,
            declared=None) -> EquilibriumResult:
    """Alternate leader and follower best responses until the leader strategy settles.

    A round is one leader solve followed by the follower response. The run
    stops once the relative change in the strategy is at most ``tau`` and the
    netted storage trajectory, evaluated with the current user flows, is
    valid. ``declared`` defaults to truthful reports.
    """
    declared = scenario.surplus if declared is None else np.atleast_2d(np.asarray(declared, dtype=float))
    tariff, e_n = scenario.tariff, scenario.e_n
    rho = initial_strategy(tariff, e_n) if start is None else start
    z_prev = np.concatenate([rho.p_s, np.maximum(rho.e_s, 0.0), np.maximum(-rho.e_s, 0.0)])
    response = follower_response(rho.p_s, rho.e_s, declared, tariff, e_n)
    H = scenario.horizon
    history: list[float] = []
    repair_error: RepairError | None = None
    for r in range(1, config.max_rounds + 1):
        problem, sol = _leader_step(declared, scenario, response, config.solver)
        z = sol.z if config.relaxation == 1.0 else z_prev + config.relaxation * (sol.z - z_prev)
        new = LeaderStrategy(z[:H], z[H : 2 * H] - z[2 * H :])
        change = _relative_change(new, rho)
        history.append(change)
        rho, z_prev = new, z
        response = follower_response(rho.p_s, rho.e_s, declared, tariff, e_n)
        log.debug("round %d: change %.3e revenue %.6g", r, change, sol.revenue)
        if change > config.tau:
            continue
        try:
            flows, state = split_and_repair(z[H : 2 * H], z[2 * H :], scenario.ses, response.ses_plus, response.ses_minus)
        except RepairError as exc:
            # user flows moved since the leader solve; keep iterating
            repair_error = exc
            continue
        E = rho.e_s + e_n + response.aggregate
        load = validate_total_load(E, tariff)
        if not load.passed:
            raise LoadValidationError(
                "grid load leaves (0, E_max) at the equilibrium",
                violations=[(v.kind, v.step, v.magnitude) for v in load.violations],
            )
        if config.relaxation != 1.0:
            sol = LeaderSolution(rho, z[H : 2 * H], z[2 * H :], problem.objective(z), sol.kkt_residual,
                                 sol.iterations, sol.polished)
        return EquilibriumResult(
            strategy=rho, response=response, declared=declared,
            user_ids=tuple(scenario.participant_ids), e_n=e_n, rounds=r, history=tuple(history),
            problem=problem, solution=sol, flows=tuple(flows), state=state,
        )
    details = {"history": history[-20:], "rounds": config.max_rounds}
    if repair_error is not None:
        details["last_repair_error"] = repair_error.to_dict()
    raise NonConvergenceError(f"no convergence within {config.max_rounds} rounds", **details)


# ----------------------------------------------------------------- certificate


@dataclass
class Certificate:
    follower_margin: float  # min over samples of C(E_P) - C(E_P*); should be >= -tol
    follower_worst: dict
    leader_gain: float  # max over samples of R(rho) - R(rho*); should be <= tol
    leader_worst: dict
    samples: int
    tol: float = CERT_TOL

    @property
    def follower_passed(self) -> bool:
        return self.follower_margin >= -self.tol

    @property
    def leader_passed(self) -> bool:
        return self.leader_gain <= self.tol

    @property
    def passed(self) -> bool:
        return self.follower_passed and self.leader_passed

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tol,
            "samples_per_check": self.samples,
            "follower": {"passed": self.follower_passed, "worst_margin": self.follower_margin, **self.follower_worst},
            "leader": {"passed": self.leader_passed, "worst_gain": self.leader_gain, **self.leader_worst},
        }


def certify_follower(aggregate, strategy: LeaderStrategy, declared, tariff, e_n, samples: int = 10_000,
                     rng=None, radius: float = 1e-3):
    """Sample feasible aggregate deviations at every step and return the most
    negative change in social cost together with where it happened."""
    rng = np.random.default_rng(0) if rng is None else rng
    declared = np.atleast_2d(declared)
    worst, where = np.inf, {}
    for i in range(len(aggregate)):
        lo, hi = leader_band(declared[:, i])
        if hi - lo <= 0:
            continue
        rho = LeaderStrategyPoint(float(strategy.p_s[i]), float(strategy.e_s[i]))
        total = float(declared[:, i].sum())
        half = samples // 2
        near = np.clip(aggregate[i] + radius * rng.uniform(-1.0, 1.0, samples - half), lo, hi)
        dev = np.concatenate([rng.uniform(lo, hi, half), near])
        base = social_cost_of_aggregate(aggregate[i], rho, tariff, e_n[i], total, i + 1)
        diff = social_cost_of_aggregate(dev, rho, tariff, e_n[i], total, i + 1) - base
        j = int(np.argmin(diff))
        if diff[j] < worst:
            worst = float(diff[j])
            where = {"step": i + 1, "aggregate": float(aggregate[i]), "deviation": float(dev[j])}
    return (0.0 if worst == np.inf else worst), where


def _tangent_cone(problem: LeaderProblem, z, active_tol: float):
    """Generators of the feasible directions at ``z``.

    Returns (N, D): columns of N span the face where every active constraint
    stays active; column j of D leaves one active inequality inward while
    keeping the others. Active inequalities that oppose each other (a band
    edge meeting the payoff bound, say) act as an equality and duplicates are
    dropped, so D is exact unless the remaining rows are still dependent.
    """
    slack = problem.h - problem.G @ z
    scale = 1.0 + np.max(np.abs(problem.h), initial=0.0)
    rows = problem.G[slack <= active_tol * scale]
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    gram = rows @ rows.T
    eq_rows, in_rows, used = [problem.A], [], np.zeros(len(rows), dtype=bool)
    for i in range(len(rows)):
        if used[i]:
            continue
        used |= gram[i] > 1 - 1e-12
        opposite = gram[i] < -1 + 1e-12
        if opposite.any():
            used |= opposite
            eq_rows.append(rows[i : i + 1])
        else:
            in_rows.append(rows[i])
    n = len(z)
    E = np.vstack(eq_rows)
    M = np.eye(n) if E.shape[0] == 0 else _null_space(E)
    if not in_rows:
        return M, np.zeros((n, 0))
    R = np.array(in_rows) @ M
    K = _null_space(R)
    D = M @ np.linalg.lstsq(R, -np.eye(R.shape[0]), rcond=None)[0]
    return M @ K, D / np.linalg.norm(D, axis=0, keepdims=True).clip(min=1e-300)


def _null_space(C, rtol: float = 1e-10):
    _, sv, vt = np.linalg.svd(C)
    rank = int(np.sum(sv > rtol * sv[0])) if sv.size else 0
    return vt[rank:].T


def certify_leader(problem: LeaderProblem, z, samples: int = 10_000, rng=None, radius: float = 1e-3,
                   feas_tol: float = 1e-10, active_tol: float = 1e-7):
    """Sample feasible perturbations of the stacked leader decision within
    ``radius`` and return the largest revenue gain found.

    Directions combine a random move along the active face with random
    non-negative moves off the active inequalities. Steps that still break a
    constraint are halved until feasible; samples that never become feasible
    are dropped and counted.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    z = np.asarray(z, dtype=float)
    N, D = _tangent_cone(problem, z, active_tol)
    W = rng.standard_normal((N.shape[1], samples))
    V = rng.exponential(1.0, (D.shape[1], samples)) * (rng.uniform(size=(D.shape[1], samples)) < 0.2)
    dirs = N @ W + D @ V
    norms = np.linalg.norm(dirs, axis=0)
    keep = norms > 1e-12
    dirs = dirs[:, keep] * (radius * rng.uniform(0.0, 1.0, keep.sum()) / norms[keep])
    # a step may not push any constraint further than it already is at z,
    # up to round-off proportional to the step length
    slack = np.maximum(problem.h - problem.G @ z, 0.0)[:, None]
    g_norm = np.max(np.abs(problem.G), initial=1.0)
    a_norm = np.max(np.abs(problem.A), initial=1.0)
    for _ in range(60):
        length = np.linalg.norm(dirs, axis=0)
        bad = np.any(problem.G @ dirs > slack + feas_tol * g_norm * length, axis=0)
        if problem.A.shape[0]:
            bad |= np.any(np.abs(problem.A @ dirs) > feas_tol * a_norm * length, axis=0)
        if not bad.any():
            break
        dirs[:, bad] *= 0.5
    ok = ~bad
    base = problem.objective(z)
    H = problem.horizon
    pts = z[:, None] + dirs[:, ok]
    lam, mu, nu, xi = problem.coefficients
    p, e = pts[:H], pts[H : 2 * H] - pts[2 * H :]
    vals = np.sum(lam[:, None] * p**2 + mu[:, None] * p + nu[:, None] * e**2 + xi[:, None] * e, axis=0)
    where = {"feasible_samples": int(ok.sum()), "dropped_samples": int(samples - ok.sum()),
             "median_step": float(np.median(np.linalg.norm(dirs[:, ok], axis=0))) if ok.any() else 0.0}
    if not ok.any():
        return 0.0, where
    gains = vals - base
    j = int(np.argmax(gains))
    d = dirs[:, ok][:, j]
    where.update({"direction_norm": float(np.linalg.norm(d)),
                  "step_of_largest_component": int(np.argmax(np.abs(d)) % H) + 1})
    return float(gains[j]), where


def certify(result: EquilibriumResult, scenario: Scenario, samples: int = 10_000, seed: int = 0,
            radius: float = 1e-3) -> Certificate:
    rng = np.random.default_rng(seed)
    f_margin, f_where = certify_follower(result.aggregate, result.strategy, result.declared,
                                         scenario.tariff, scenario.e_n, samples, rng, radius)
    l_gain, l_where = certify_leader(result.problem, result.solution.z, samples, rng, radius)
    return Certificate(f_margin, f_where, l_gain, l_where, samples)
