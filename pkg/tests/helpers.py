"""Instance generators and independent oracles shared by the test modules."""

from __future__ import annotations

import numpy as np

from sestrade.core import SesParams, TimeGrid, UserProfile
from sestrade.leader import NEG, NONNEG, build_problem
from sestrade.pricing import TariffParams
from sestrade.retailer import FollowerResponse
from sestrade.scenario import Scenario


def random_scenario(rng, steps=(4, 6, 8)) -> Scenario:
    """Small random neighbourhood that is usually solvable."""
    H = int(rng.choice(steps))
    users = []
    for i in range(int(rng.integers(2, 7))):
        gen = rng.uniform(0, 4, H) * (rng.uniform(size=H) < 0.7)
        users.append(UserProfile(f"P{i}", rng.uniform(0.2, 2, H), gen, True))
    for j in range(int(rng.integers(3, 9))):
        users.append(UserProfile(f"N{j}", rng.uniform(0.5, 2, H), np.zeros(H), False))
    tariff = TariffParams(rng.uniform(0.05, 0.5, H), np.full(H, rng.uniform(5, 20)))
    q = rng.uniform(2, 20)
    ses = SesParams(q, rng.uniform(0.97, 1), rng.uniform(0.85, 1), rng.uniform(1, 1.15), rng.uniform(0, 1) * q)
    return Scenario(TimeGrid(H, 0.5), tuple(users), ses, tariff, 0)


def fixed_response(user_plus, user_minus) -> FollowerResponse:
    """A follower response whose SES charge/discharge totals are the given vectors."""
    user_plus = np.asarray(user_plus, dtype=float)
    user_minus = np.asarray(user_minus, dtype=float)
    H = len(user_plus)
    return FollowerResponse(np.zeros(H), np.zeros((2, H)), np.vstack([user_plus, -user_minus]))


def problem_from_instance(inst: dict):
    """Rebuild a leader problem from a plain-dict instance (as stored in fixtures)."""
    ses = SesParams(**inst["ses"])
    tariff = TariffParams(inst["phi"], inst["delta"])
    resp = fixed_response(inst["user_plus"], inst["user_minus"])
    return build_problem(np.array(inst["declared"]), tariff, np.array(inst["e_n"]), resp, ses,
                         inst["p_min"], payoff_case=inst["payoff_case"])


def random_h1_instance(rng) -> dict:
    """One-step leader instance with a two-dimensional feasible region.

    Surplus steps use the E_A < 0 payoff case and deficit steps the E_A >= 0
    case, so the band is not collapsed to a line. Charge and discharge
    efficiencies differ so the relaxed storage constraint is a half-plane.
    """
    n = int(rng.integers(1, 6))
    sign = rng.choice([-1.0, 1.0])
    declared = sign * rng.uniform(0.2, 5.0, (n, 1))
    q = rng.uniform(5, 30)
    return {
        "declared": declared.tolist(),
        "phi": [float(rng.uniform(0.02, 0.3))],
        "delta": [float(rng.uniform(5, 20))],
        "e_n": [float(rng.uniform(0, 30))],
        "ses": {"capacity": q, "leakage": float(rng.uniform(0.9, 1.0)), "charge_eff": float(rng.uniform(0.8, 0.95)),
                "discharge_eff": float(rng.uniform(1.05, 1.2)), "initial_charge": float(rng.uniform(0, q))},
        "user_plus": [float(rng.uniform(0, 3))],
        "user_minus": [float(rng.uniform(0, 3))],
        "p_min": 0.1,
        "payoff_case": [NEG if sign > 0 else NONNEG],
    }


def h1_grid_search(inst: dict, points: int = 2001):
    """Maximise the one-step leader revenue by exhaustive search on a grid.

    Feasibility is written out from first principles: the price floor, the
    follower optimum inside its band and payoff half-line, and the storage
    boundary condition, which the relaxed split can meet exactly whenever the
    complementary split would leave at least the initial charge.
    Returns (best value, best (p, e), cell sizes (dp, de)).
    """
    phi, delta, e_n = inst["phi"][0], inst["delta"][0], inst["e_n"][0]
    s = np.array(inst["declared"])[:, 0]
    total = s.sum()
    ses = inst["ses"]
    a, ep, em, b0 = ses["leakage"], ses["charge_eff"], ses["discharge_eff"], ses["initial_charge"]
    if total > 0:
        lo, hi = -total, 0.0
    else:
        lo, hi = 0.0, -total
    if inst["payoff_case"][0] == NEG:
        hi = min(hi, 0.0)
    else:
        lo = max(lo, 0.0)
    lam, mu = -0.5 / phi, 0.5 * (e_n + delta / phi) - total
    nu, xi = -0.5 * phi, -0.5 * (phi * e_n + delta)

    # smallest net exchange that restores the initial charge
    need = b0 - a * b0 - ep * inst["user_plus"][0] + em * inst["user_minus"][0]
    e_min = need / ep if need >= 0 else need / em
    # along p = phi*e + c the revenue peaks at e = (mu*phi + xi - c) / (2 phi)
    c_lo = delta + phi * (e_n + 2 * lo)
    e_max = max(e_min, (mu * phi + xi - c_lo) / (2 * phi)) + 1.0
    p_lo = max(inst["p_min"], delta + phi * (e_n + e_min + 2 * lo))
    p_hi = max(p_lo + 1.0, delta + phi * (e_n + e_max + 2 * hi))

    p = np.linspace(p_lo, p_hi, points)
    e = np.linspace(e_min, e_max, points)
    P, E = np.meshgrid(p, e, indexing="ij")
    agg = 0.5 * ((P - delta) / phi - e_n - E)
    eps = 1e-12 * (1 + abs(p_hi))
    feasible = (P >= inst["p_min"]) & (agg >= lo - eps) & (agg <= hi + eps) & (E >= e_min)
    value = np.where(feasible, lam * P**2 + mu * P + nu * E**2 + xi * E, -np.inf)
    k = np.unravel_index(np.argmax(value), value.shape)
    return float(value[k]), (float(P[k]), float(E[k])), (p[1] - p[0], e[1] - e[0])


def cvxpy_leader_reference(inst: dict):
    """Solve the leader problem with cvxpy from an independent formulation.

    Returns (objective, p, e_plus, e_minus, charge trajectory).
    """
    import cvxpy as cp

    declared = np.array(inst["declared"])
    phi, delta, e_n = (np.array(inst[k]) for k in ("phi", "delta", "e_n"))
    up, um = np.array(inst["user_plus"]), np.array(inst["user_minus"])
    ses = inst["ses"]
    H = len(phi)
    p = cp.Variable(H)
    ep = cp.Variable(H, nonneg=True)
    em = cp.Variable(H, nonneg=True)
    e = ep - em
    total = declared.sum(axis=0)
    obj = 0
    cons = [p >= inst["p_min"]]
    b_prev = ses["initial_charge"]
    charge = []
    for t in range(H):
        # revenue with the follower's optimal aggregate substituted
        agg = 0.5 * ((p[t] - delta[t]) / phi[t] - e_n[t] - e[t])
        # -p*(agg + total) - p_g*e with p_g = (p + delta + phi*(e_n + e)) / 2;
        # the p*e cross terms cancel
        obj += -p[t] * total[t] - 0.5 * (cp.square(p[t]) - delta[t] * p[t]) / phi[t] + 0.5 * e_n[t] * p[t] \
            - 0.5 * (phi[t] * cp.square(e[t]) + (phi[t] * e_n[t] + delta[t]) * e[t])
        s = declared[:, t]
        if np.all(s >= 0) and np.any(s > 0):
            lo, hi = -s.sum(), 0.0
        elif np.all(s <= 0) and np.any(s < 0):
            lo, hi = 0.0, -s.sum()
        else:
            lo = hi = 0.0
        if inst["payoff_case"][t] == NEG:
            hi = min(hi, 0.0)
        else:
            lo = max(lo, 0.0)
        cons += [agg >= lo, agg <= hi]
        b = ses["leakage"] * b_prev + ses["charge_eff"] * (ep[t] + up[t]) - ses["discharge_eff"] * (em[t] + um[t])
        cons += [b >= 0, b <= ses["capacity"]]
        charge.append(b)
        b_prev = b
    cons.append(b_prev == ses["initial_charge"])
    prob = cp.Problem(cp.Maximize(obj), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11)
    if prob.status != "optimal":
        raise RuntimeError(f"reference solve failed: {prob.status}")
    return (float(prob.value), p.value, ep.value, em.value, np.array([c.value for c in charge]))


def random_clarke_instance(rng, n_users: int, H: int):
    """Random declared surpluses with a leader strategy under which both the
    full instance and every instance with one user removed can be allocated.

    Returns (declared (n, H), p_s, e_s, tariff, e_n).
    """
    declared = np.empty((n_users, H))
    target = np.zeros(H)
    for t in range(H):
        kind = rng.choice(["surplus", "deficit", "mixed"])
        mag = rng.uniform(0.05, 5.0, n_users) * (rng.uniform(size=n_users) > 0.1)
        if kind == "mixed":
            signs = rng.choice([-1.0, 1.0], n_users)
        else:
            signs = np.full(n_users, 1.0 if kind == "surplus" else -1.0)
        declared[:, t] = signs * mag
        s = declared[:, t]
        if n_users > 1 and (np.all(s >= 0) or np.all(s <= 0)):
            # the band shared by the full instance and every reduced one
            width = abs(s.sum()) - np.max(np.abs(s))
            target[t] = -np.sign(s.sum()) * rng.uniform(0, 1) * width
    phi = rng.uniform(0.005, 0.3, H)
    delta = rng.uniform(2, 30, H)
    e_n = rng.uniform(0, 100, H)
    e_s = rng.uniform(-20, 20, H)
    p_s = delta + phi * (2 * target + e_n + e_s)
    # keep the SES price positive by moving the exchange, not the target
    low = p_s < 0.1
    e_s[low] += (0.1 - p_s[low]) / phi[low] + 1.0
    p_s = delta + phi * (2 * target + e_n + e_s)
    return declared, p_s, e_s, TariffParams(phi, delta), e_n
