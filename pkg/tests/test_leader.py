import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import (
    cvxpy_leader_reference,
    fixed_response,
    h1_grid_search,
    problem_from_instance,
    random_h1_instance,
)
from sestrade.core import SesParams, charge_trajectory
from sestrade.errors import LeaderInfeasibleError, RepairError
from sestrade.leader import (
    NEG,
    NONNEG,
    LeaderStrategy,
    SolverConfig,
    build_problem,
    diagnose_infeasibility,
    initial_strategy,
    payoff_cases,
    revenue,
    revenue_coefficients,
    revenue_polynomial,
    solve_leader,
    split_and_repair,
)
from sestrade.pricing import TariffParams, grid_prices
from sestrade.retailer import follower_response, leader_band, optimal_aggregates

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "leader_h4.json").read_text())


def one_step(declared, phi=0.02, delta=10.0, e_n=20.0, case=NONNEG, ses=None):
    declared = np.array(declared, dtype=float).reshape(-1, 1)
    ses = ses or SesParams(10.0, charge_eff=0.9, discharge_eff=1.1, initial_charge=5.0)
    return build_problem(declared, TariffParams.constant(phi, delta), np.array([e_n]),
                         fixed_response([0.0], [0.0]), ses, payoff_case=[case])


# ------------------------------------------------------------- objective


def test_coefficients_example():
    lam, mu, nu, xi = revenue_coefficients([[3.0]], TariffParams.constant(0.02, 10.0), [20.0])
    assert lam[0] == pytest.approx(-25.0)
    assert mu[0] == pytest.approx(257.0)
    assert nu[0] == pytest.approx(-0.01)
    assert xi[0] == pytest.approx(-5.2)
    # vertex of the price parabola
    assert -mu[0] / (2 * lam[0]) == pytest.approx(5.14)
    assert lam[0] < 0 and nu[0] < 0


def test_revenue_examples():
    rho = LeaderStrategy([12.0], [0.0])
    assert revenue(rho, [-5.0], [11.0]) == pytest.approx(60.0)
    assert revenue(LeaderStrategy([12.0], [0.0]), [0.0], [11.0]) == 0.0


@given(seed=st.integers(0, 2**32 - 1))
def test_revenue_matches_polynomial(seed):
    rng = np.random.default_rng(seed)
    H, n = 5, 3
    declared = rng.uniform(-3, 3, (n, H))
    tariff = TariffParams(rng.uniform(0.01, 0.3, H), rng.uniform(2, 20, H))
    e_n = rng.uniform(0, 40, H)
    p, e = rng.uniform(0.1, 40, H), rng.uniform(-10, 10, H)
    # follower optimum substituted without the band, as in the polynomial
    agg = optimal_aggregates(p, e, tariff, e_n)
    ses_total = agg + declared.sum(axis=0)
    direct = revenue(LeaderStrategy(p, e), ses_total, grid_prices(e + e_n + agg, tariff))
    poly = revenue_polynomial(revenue_coefficients(declared, tariff, e_n), p, e)
    assert direct == pytest.approx(poly, rel=1e-10, abs=1e-8)


@settings(max_examples=50)
@given(seed=st.integers(0, 2**32 - 1))
def test_objective_concave(seed):
    rng = np.random.default_rng(seed)
    prob = problem_from_instance(FIXTURES[seed % len(FIXTURES)])
    z1, z2 = rng.uniform(-20, 20, (2, prob.Q.shape[0]))
    mid = prob.objective(0.5 * (z1 + z2))
    avg = 0.5 * (prob.objective(z1) + prob.objective(z2))
    assert mid >= avg - 1e-9 * (1 + abs(avg))
    z2 = z1.copy()
    z2[0] += 1.0  # differing prices give strict concavity
    assert prob.objective(0.5 * (z1 + z2)) > 0.5 * (prob.objective(z1) + prob.objective(z2))


# ----------------------------------------------------------- constraints


def band_rows(prob, t=0):
    return [i for i, (f, s) in enumerate(zip(prob.g_family, prob.g_step))
            if s == t and f in ("aggregate-band", "retailer-payoff")]


def test_all_surplus_step_gives_two_inequalities():
    prob = one_step([2.0, 1.0], case=NEG)
    rows = band_rows(prob)
    assert len(rows) == 2
    assert not any(f in ("aggregate-band", "retailer-payoff") for f in prob.a_family)
    row, const = prob.aggregate_row(0)
    # corners of the band make one of the two rows tight
    for target in (-3.0, 0.0):
        z = np.zeros(3)
        z[0] = (target - const) / row[0]
        slack = prob.h[rows] - prob.G[rows] @ z
        assert np.min(np.abs(slack)) == pytest.approx(0.0, abs=1e-12)
        assert np.all(slack >= -1e-12)
    z[0] = (-3.5 - const) / row[0]
    assert np.any(prob.h[rows] - prob.G[rows] @ z < 0)


def test_mixed_step_gives_equality():
    prob = one_step([2.0, -1.0])
    i = prob.a_family.index("aggregate-band")
    # any price of the form delta + phi*(E_N + e_s) satisfies it
    for e_s in (-5.0, 0.0, 7.0):
        p = 10.0 + 0.02 * (20.0 + e_s)
        z = np.array([p, max(e_s, 0), max(-e_s, 0)])
        assert prob.A[i] @ z == pytest.approx(prob.b[i], abs=1e-12)


def test_payoff_bound_merges_into_band():
    # surplus step with E_A >= 0: the band [-3, 0] meets E_P >= 0 at a point
    prob = one_step([2.0, 1.0], case=NONNEG)
    assert "retailer-payoff" in prob.a_family
    assert not band_rows(prob)
    # deficit step with E_A < 0: the same collapse from the other side
    prob = one_step([-2.0, -1.0], case=NEG)
    assert "retailer-payoff" in prob.a_family


def test_initial_strategy_on_payoff_bound():
    tariff = TariffParams([0.02, 0.03], [10.0, 12.0])
    e_n = np.array([20.0, 5.0])
    rho = initial_strategy(tariff, e_n)
    np.testing.assert_allclose(optimal_aggregates(rho.p_s, rho.e_s, tariff, e_n), 0.0, atol=1e-12)
    assert payoff_cases([-1.0, 0.0], [0.5, 0.0]) == [NEG, NONNEG]


def test_config_and_strategy_validation():
    with pytest.raises(ValueError):
        SolverConfig(p_min=0.0)
    with pytest.raises(ValueError):
        LeaderStrategy([-1.0], [0.0])
    with pytest.raises(ValueError):
        LeaderStrategy([1.0, 2.0], [0.0])


# ----------------------------------------------------------------- solver


@pytest.mark.parametrize("seed", range(5))
def test_h1_grid_oracle(seed):
    inst = random_h1_instance(np.random.default_rng(1000 + seed))
    sol = solve_leader(problem_from_instance(inst))
    best, _, (dp, de) = h1_grid_search(inst)
    lam, mu, nu, xi = (c[0] for c in problem_from_instance(inst).coefficients)
    p, e = sol.strategy.p_s[0], sol.strategy.e_s[0]
    cell = abs(2 * lam * p + mu) * dp + abs(2 * nu * e + xi) * de + abs(lam) * dp**2 + abs(nu) * de**2
    assert best <= sol.revenue + 1e-9 * (1 + abs(best))
    assert sol.revenue - best <= cell


@pytest.mark.parametrize("inst", FIXTURES, ids=[f"h4-{i}" for i in range(len(FIXTURES))])
def test_h4_reference_fixtures(inst):
    prob = problem_from_instance(inst)
    sol = solve_leader(prob)
    assert sol.revenue == pytest.approx(inst["reference"]["objective"], abs=1e-6)
    assert prob.max_violation(sol.z) <= 1e-8
    assert sol.kkt_residual <= 1e-8 * (1 + np.max(np.abs(prob.h)))


def test_h4_fixtures_reproducible_with_cvxpy():
    pytest.importorskip("cvxpy")
    for inst in FIXTURES[:3]:
        assert cvxpy_leader_reference(inst)[0] == pytest.approx(inst["reference"]["objective"], abs=1e-7)


def test_post_checks_on_reference(reference_result, reference_scenario):
    r, sc = reference_result, reference_scenario
    agg = optimal_aggregates(r.strategy.p_s, r.strategy.e_s, sc.tariff, sc.e_n)
    M = sc.tariff.phi * (r.strategy.e_s + sc.e_n) + sc.tariff.delta
    e_a = r.aggregate + sc.e_n
    for t in range(sc.horizon):
        lo, hi = leader_band(r.declared[:, t])
        assert lo - 1e-7 <= agg[t] <= hi + 1e-7
        if e_a[t] < 0:
            assert r.strategy.p_s[t] <= M[t] + 1e-7
        else:
            assert r.strategy.p_s[t] >= M[t] - 1e-7
    assert np.all(r.strategy.p_s >= 0.1 - 1e-9)


def infeasible_problem():
    # mixed step pins the price to delta + phi*e_s and the lossless storage pins
    # e_s to -1999, so the price would have to be negative
    ses = SesParams(80.0, 1.0, 1.0, 1.0, 20.0)
    return build_problem(np.array([[2000.0], [-1.0]]), TariffParams.constant(0.01, 10.0), np.array([0.0]),
                         fixed_response([2000.0], [1.0]), ses)


def test_infeasible_names_family():
    prob = infeasible_problem()
    families = diagnose_infeasibility(prob)
    assert families
    with pytest.raises(LeaderInfeasibleError) as exc:
        solve_leader(prob)
    assert exc.value.category == "leader-infeasible"
    assert exc.value.details["families"]


def test_feasible_problem_has_no_diagnosis():
    assert diagnose_infeasibility(problem_from_instance(FIXTURES[0])) == {}


# ------------------------------------------------------------------ repair


def test_repair_already_complementary():
    ses = SesParams(10.0, initial_charge=5.0)
    flows, state = split_and_repair([2.0, 0.0], [0.0, 2.0], ses, [0.0, 0.0], [0.0, 0.0])
    assert [f.net for f in flows] == [2.0, -2.0]
    np.testing.assert_allclose(state.charge, [7.0, 5.0])


def test_repair_lossless_netting_is_exact():
    ses = SesParams(10.0, initial_charge=5.0)
    relaxed = charge_trajectory(ses, [3.0, 0.0], [1.0, 2.0], [0.0, 0.0], [0.0, 0.0])
    flows, state = split_and_repair([3.0, 0.0], [1.0, 2.0], ses, [0.0, 0.0], [0.0, 0.0])
    assert flows[0].net == 2.0 and flows[0].minus == 0.0
    np.testing.assert_allclose(state.charge, relaxed.charge)


def test_repair_lossy_netting_raises_charge():
    ses = SesParams(10.0, charge_eff=0.9, discharge_eff=1.1, initial_charge=5.0)
    relaxed = charge_trajectory(ses, [3.0], [1.0], [0.0], [0.0])
    netted = charge_trajectory(ses, [2.0], [0.0], [0.0], [0.0])
    assert relaxed.charge[0] == pytest.approx(5.0 + 2.7 - 1.1)
    assert netted.charge[0] - relaxed.charge[0] == pytest.approx(0.2)
    # the extra 0.2 kWh breaks the boundary condition and, with a tight cap, the capacity
    with pytest.raises(RepairError):
        split_and_repair([3.0, 0.0], [1.0, 1.6 / 1.1], ses, [0.0, 0.0], [0.0, 0.0])
    tight = SesParams(6.7, charge_eff=0.9, discharge_eff=1.1, initial_charge=5.0)
    with pytest.raises(RepairError) as exc:
        split_and_repair([3.0, 0.0], [1.0, 1.6 / 1.1], tight, [0.0, 0.0], [0.0, 0.0])
    kinds = {v[0] for v in exc.value.details["violations"]}
    assert "above-capacity" in kinds
