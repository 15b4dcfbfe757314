"""The leader: the SES provider picks its price and grid exchange over the whole
horizon to maximise revenue, anticipating the retailer's closed-form response.

Decision vector layout used throughout: ``z = [p_s (H), e_s_plus (H), e_s_minus (H)]``.
The storage exchange is split into non-negative charge/discharge parts so the
storage dynamics stay linear; ``split_and_repair`` nets them afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEFAULT_STORAGE_TOL,
    FlowSplit,
    SesParams,
    SesState,
    charge_trajectory,
    split_net,
    validate_trajectory,
)
from .errors import LeaderInfeasibleError, RepairError, SolverError
from .pricing import TariffParams
from .qp import QPResult, solve_qp
from .retailer import FollowerResponse, leader_band

log = logging.getLogger(__name__)

NONNEG = "nonneg"  # E_A >= 0: price must not undercut the payoff bound
NEG = "neg"  # E_A < 0: price must not exceed it
THROUGHPUT_WEIGHT = 1e-9  # relative tie-break cost on e_plus + e_minus


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 200
    p_min: float = 0.1

    def __post_init__(self):
        if not (self.tol > 0 and self.p_min > 0 and self.max_iter > 0):
            raise ValueError("solver tolerances, iteration limit and price floor must be positive")


@dataclass(frozen=True)
class LeaderStrategy:
    p_s: np.ndarray
    e_s: np.ndarray

    def __post_init__(self):
        p = np.array(self.p_s, dtype=float).reshape(-1)
        e = np.array(self.e_s, dtype=float).reshape(-1)
        if p.shape != e.shape:
            raise ValueError("p_s and e_s must have the same length")
        if np.any(p < 0):
            raise ValueError("SES price must be non-negative")
        p.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "p_s", p)
        object.__setattr__(self, "e_s", e)

    @property
    def horizon(self) -> int:
        return len(self.p_s)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.p_s, self.e_s])


def initial_strategy(tariff: TariffParams, e_n) -> LeaderStrategy:
    """Starting point: price on the payoff bound with no grid exchange."""
    e_n = np.asarray(e_n, dtype=float)
    return LeaderStrategy(tariff.delta + tariff.phi * e_n, np.zeros_like(e_n))


def revenue(rho: LeaderStrategy, user_ses_totals, p_g) -> float:
    """Revenue from user trades and the grid exchange, summed over the horizon."""
    return float(np.sum(-rho.p_s * np.asarray(user_ses_totals) - np.asarray(p_g) * rho.e_s))


def revenue_coefficients(declared, tariff: TariffParams, e_n):
    """Per-step coefficients (lam, mu, nu, xi) of the revenue after substituting
    the follower optimum: lam*p^2 + mu*p + nu*e^2 + xi*e."""
    e_n = np.asarray(e_n, dtype=float)
    total = np.atleast_2d(declared).sum(axis=0)
    inv = 1.0 / tariff.phi
    lam = -0.5 * inv
    mu = 0.5 * (e_n + inv * tariff.delta) - total
    nu = -0.5 * tariff.phi
    xi = -0.5 * (tariff.phi * e_n + tariff.delta)
    return lam, mu, nu, xi


def revenue_polynomial(coeffs, p_s, e_s) -> float:
    lam, mu, nu, xi = coeffs
    p_s, e_s = np.asarray(p_s), np.asarray(e_s)
    return float(np.sum(lam * p_s**2 + mu * p_s + nu * e_s**2 + xi * e_s))


@dataclass
class LeaderProblem:
    declared: np.ndarray
    tariff: TariffParams
    e_n: np.ndarray
    ses: SesParams
    p_min: float
    user_plus: np.ndarray
    user_minus: np.ndarray
    payoff_case: list[str]
    lam: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    xi: np.ndarray
    Q: np.ndarray
    c: np.ndarray
    G: np.ndarray
    h: np.ndarray
    A: np.ndarray
    b: np.ndarray
    g_family: list[str] = field(default_factory=list)
    a_family: list[str] = field(default_factory=list)
    g_step: list[int] = field(default_factory=list)
    a_step: list[int] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.e_n)

    @property
    def coefficients(self):
        return self.lam, self.mu, self.nu, self.xi

    def objective(self, z) -> float:
        """Leader revenue (to maximise) at a stacked decision vector."""
        H = self.horizon
        return revenue_polynomial(self.coefficients, z[:H], z[H : 2 * H] - z[2 * H :])

    def max_violation(self, z) -> float:
        v = 0.0
        if self.G.shape[0]:
            v = max(v, float(np.max(self.G @ z - self.h)))
        if self.A.shape[0]:
            v = max(v, float(np.max(np.abs(self.A @ z - self.b))))
        return v

    def storage_matrix(self) -> np.ndarray:
        H = self.horizon
        k = np.arange(H)
        expo = k[:, None] - k[None, :]
        return np.where(expo >= 0, self.ses.leakage ** np.maximum(expo, 0), 0.0)

    def aggregate_row(self, t: int):
        """(row over z, constant) such that E_P_tilde(t) = row @ z + const."""
        H = self.horizon
        row = np.zeros(3 * H)
        row[t] = 0.5 / self.tariff.phi[t]
        row[H + t] = -0.5
        row[2 * H + t] = 0.5
        const = -0.5 * (self.tariff.delta[t] / self.tariff.phi[t] + self.e_n[t])
        return row, const


def payoff_cases(aggregate_prev, e_n) -> list[str]:
    e_a = np.asarray(aggregate_prev) + np.asarray(e_n)
    return [NEG if v < 0 else NONNEG for v in e_a]


def build_problem(
    declared,
    tariff: TariffParams,
    e_n,
    response: FollowerResponse,
    ses: SesParams,
    p_min: float = 0.1,
    payoff_case: list[str] | None = None,
) -> LeaderProblem:
    """Assemble the leader QP around the previous follower response.

    The user SES totals (charge and discharge parts) are taken from
    ``response`` and held fixed in the storage constraints. The payoff-bound
    side at each step follows the sign of E_A in ``response`` unless
    ``payoff_case`` overrides it.
    """
    declared = np.atleast_2d(np.asarray(declared, dtype=float))
    e_n = np.asarray(e_n, dtype=float)
    H = len(e_n)
    phi, delta = tariff.phi, tariff.delta
    if payoff_case is None:
        payoff_case = payoff_cases(response.aggregate, e_n)
    lam, mu, nu, xi = revenue_coefficients(declared, tariff, e_n)

    n = 3 * H
    Q = np.zeros((n, n))
    c = np.zeros(n)
    for t in range(H):
        ip, jp, jm = t, H + t, 2 * H + t
        Q[ip, ip] = -2.0 * lam[t]
        Q[jp, jp] = Q[jm, jm] = -2.0 * nu[t]
        Q[jp, jm] = Q[jm, jp] = 2.0 * nu[t]
        c[ip] = -mu[t]
        c[jp] = -xi[t]
        c[jm] = xi[t]

    prob = LeaderProblem(
        declared=declared, tariff=tariff, e_n=e_n, ses=ses, p_min=p_min,
        user_plus=np.asarray(response.ses_plus, dtype=float),
        user_minus=np.asarray(response.ses_minus, dtype=float),
        payoff_case=list(payoff_case), lam=lam, mu=mu, nu=nu, xi=xi,
        Q=Q, c=c, G=np.zeros((0, n)), h=np.zeros(0), A=np.zeros((0, n)), b=np.zeros(0),
    )

    g_rows, h_vals, a_rows, b_vals = [], [], [], []

    def ineq(row, rhs, family, t):
        g_rows.append(row)
        h_vals.append(rhs)
        prob.g_family.append(family)
        prob.g_step.append(t)

    def eq(row, rhs, family, t):
        a_rows.append(row)
        b_vals.append(rhs)
        prob.a_family.append(family)
        prob.a_step.append(t)

    for t in range(H):
        # The payoff bound p_s >= M(t) (or <=) is the same half-space as
        # E_P_tilde >= 0 (or <= 0), so it is merged with the band here. Keeping
        # both as separate rows would leave the feasible set without interior
        # whenever they meet at zero.
        row, const = prob.aggregate_row(t)
        lo, hi = leader_band(declared[:, t])
        lo_fam = hi_fam = "aggregate-band"
        if payoff_case[t] == NEG:
            if hi > 0.0:
                hi, hi_fam = 0.0, "retailer-payoff"
        elif lo < 0.0:
            lo, lo_fam = 0.0, "retailer-payoff"
        if lo == hi:
            eq(row, lo - const, lo_fam if lo_fam == hi_fam else "retailer-payoff", t)
        else:
            ineq(row, hi - const, hi_fam, t)
            ineq(-row, const - lo, lo_fam, t)

        floor = np.zeros(n)
        floor[t] = -1.0
        ineq(floor, -p_min, "price-floor", t)
        for off in (H, 2 * H):
            sign = np.zeros(n)
            sign[off + t] = -1.0
            ineq(sign, 0.0, "flow-sign", t)

    # storage: b = b_fixed + eta+ L e+ - eta- L e-
    L = prob.storage_matrix()
    powers = ses.leakage ** np.arange(1, H + 1)
    b_fixed = powers * ses.initial_charge + L @ (ses.charge_eff * prob.user_plus - ses.discharge_eff * prob.user_minus)
    B = np.zeros((H, n))
    B[:, H : 2 * H] = ses.charge_eff * L
    B[:, 2 * H :] = -ses.discharge_eff * L
    for t in range(H):
        ineq(-B[t], b_fixed[t], "storage-lower", t)
        if t < H - 1:
            ineq(B[t], ses.capacity - b_fixed[t], "storage-upper", t)
    eq(B[H - 1], ses.initial_charge - b_fixed[H - 1], "storage-boundary", H - 1)

    prob.G = np.array(g_rows)
    prob.h = np.array(h_vals)
    prob.A = np.array(a_rows)
    prob.b = np.array(b_vals)
    return prob


@dataclass(frozen=True)
class LeaderSolution:
    strategy: LeaderStrategy
    e_plus: np.ndarray
    e_minus: np.ndarray
    revenue: float
    kkt_residual: float
    iterations: int
    polished: bool

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.strategy.p_s, self.e_plus, self.e_minus])


def diagnose_infeasibility(problem: LeaderProblem) -> dict[str, float]:
    """Elastic phase-1 LP: which constraint families need slack to become feasible.

    Returns {family: total slack}; empty when the problem is feasible.
    """
    from scipy.optimize import linprog

    n = problem.Q.shape[0]
    mg, me = problem.G.shape[0], problem.A.shape[0]
    # variables: z (free), v (mg, >=0), u+ (me), u- (me)
    cost = np.concatenate([np.zeros(n), np.ones(mg), np.ones(2 * me)])
    A_ub = np.hstack([problem.G, -np.eye(mg), np.zeros((mg, 2 * me))])
    A_eq = np.hstack([problem.A, np.zeros((me, mg)), -np.eye(me), np.eye(me)]) if me else None
    bounds = [(None, None)] * n + [(0, None)] * (mg + 2 * me)
    res = linprog(cost, A_ub=A_ub, b_ub=problem.h, A_eq=A_eq, b_eq=problem.b if me else None,
                  bounds=bounds, method="highs")
    if res.status != 0:
        return {"unknown": float("nan")}
    slack = res.x[n:]
    out: dict[str, float] = {}
    for fam, v in zip(problem.g_family, slack[:mg]):
        if v > 1e-7:
            out[fam] = out.get(fam, 0.0) + float(v)
    for i, fam in enumerate(problem.a_family):
        v = slack[mg + i] + slack[mg + me + i]
        if v > 1e-7:
            out[fam] = out.get(fam, 0.0) + float(v)
    return out


def solve_leader(problem: LeaderProblem, config: SolverConfig = SolverConfig()) -> LeaderSolution:
    """Maximise the leader revenue over the linear constraint set.

    A tiny cost on e_plus + e_minus breaks ties between splits with the same
    net exchange; with lossless storage the optimal set is otherwise an
    unbounded ray along which interior-point iterates drift.
    """
    H = problem.horizon
    c = problem.c.copy()
    c[H:] += THROUGHPUT_WEIGHT * (1.0 + np.max(np.abs(problem.c)))
    result: QPResult = solve_qp(
        problem.Q, c, problem.G, problem.h, problem.A, problem.b,
        tol=config.tol, max_iter=config.max_iter,
    )
    if not result.ok:
        families = diagnose_infeasibility(problem)
        if families:
            binding = max(families, key=families.get)
            raise LeaderInfeasibleError(
                f"leader problem infeasible; largest violation in '{binding}'",
                families=families,
            )
        raise SolverError(
            f"leader QP did not converge ({result.status}, KKT residual {result.kkt_residual:.3g})",
            status=result.status,
            residual=result.kkt_residual,
            best_iterate=result.x.tolist(),
        )
    z = result.x
    p = np.maximum(z[:H], 0.0)
    e_plus = np.maximum(z[H : 2 * H], 0.0)
    e_minus = np.maximum(z[2 * H :], 0.0)
    strategy = LeaderStrategy(p, e_plus - e_minus)
    return LeaderSolution(
        strategy=strategy,
        e_plus=e_plus,
        e_minus=e_minus,
        revenue=problem.objective(z),
        kkt_residual=result.kkt_residual,
        iterations=result.iterations,
        polished=result.polished,
    )


def split_and_repair(
    e_plus, e_minus, ses: SesParams, user_plus, user_minus, tol: float = DEFAULT_STORAGE_TOL
) -> tuple[list[FlowSplit], SesState]:
    """Net simultaneous charge/discharge of the grid exchange and re-validate storage.

    Raises ``RepairError`` when the netted trajectory breaks the capacity bounds
    or the end-of-horizon condition.
    """
    net = np.asarray(e_plus, dtype=float) - np.asarray(e_minus, dtype=float)
    plus, minus = split_net(net)
    flows = [FlowSplit(a, b) for a, b in zip(plus, minus)]
    state = charge_trajectory(ses, plus, minus, user_plus, user_minus)
    report = validate_trajectory(state, tol)
    if not report.passed:
        raise RepairError(
            "storage trajectory infeasible after netting charge/discharge",
            violations=[(v.kind, v.step, v.magnitude) for v in report.violations],
            overlap=float(np.max(np.minimum(e_plus, e_minus), initial=0.0)),
        )
    return flows, state
