"""Multi-run experiments: participating-fraction sweep and forecast-noise study."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .metrics import baseline_run, par_reduction, system_report
from .pricing import grid_prices
from .scenario import NoiseSpec, Scenario, apply_forecast_noise, generate_case_study
from .stackelberg import IterationConfig, iterate

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def fraction_sweep(fractions=DEFAULT_FRACTIONS, n_total: int = 40, seed: int = 0,
                   config: IterationConfig = IterationConfig(), **generator_kw) -> list[dict]:
    """One row per participating fraction with PAR reduction and group costs."""
    rows = []
    for f in fractions:
        sc = generate_case_study(n_total, f, seed=seed, **generator_kw)
        base = baseline_run(sc)
        res = iterate(sc, config)
        rep = system_report(res, sc)
        rows.append({
            "fraction": f,
            "participants": len(sc.participants),
            "rounds": res.rounds,
            "par_baseline": base.par,
            "par_system": rep.par,
            "par_reduction": par_reduction(rep, base),
            "participating_mean_cost": rep.participating_mean,
            "non_participating_mean_cost": rep.non_participating_mean,
            "social_cost": rep.social_cost,
            "baseline_social_cost": base.social_cost,
            "community_cost": rep.community_cost,
            "retailer_payoff": rep.retailer_payoff,
        })
        log.info("fraction %.2f: PAR reduction %.2f%%", f, rows[-1]["par_reduction"])
    return rows


@dataclass(frozen=True)
class Settlement:
    participating_mean_cost: float
    community_cost: float
    min_grid_load: float


def settle(result, truth: Scenario) -> Settlement:
    """Settle a schedule computed on a forecast against the true profiles.

    Prices, the storage grid exchange and the users' grid trades are fixed
    day-ahead. Participants' forecast errors are absorbed by their SES trade,
    x = e_hat + s_true, so each pays -p_s * s_true. Non-participants pay p_s
    on their true load and the grid price follows the true total load.
    """
    p_s = result.strategy.p_s
    e_n = truth.e_n
    E = result.strategy.e_s + e_n + result.response.grid.sum(axis=0)
    p_g = grid_prices(E, truth.tariff)
    costs = np.sum(-p_s * truth.surplus, axis=1)
    return Settlement(float(np.mean(costs)), float(np.sum(p_g * E - p_s * e_n)), float(E.min()))


def noise_study(truth: Scenario, mapes, realizations: int = 10, seed: int = 0, rule: str = "calibrated",
                config: IterationConfig = IterationConfig()) -> list[dict]:
    """Mean settled costs per MAPE level.

    Every level reuses the same standard-normal draws (common random numbers),
    taken in antithetic pairs, so differences between rows reflect the noise
    level rather than sampling luck. The MAPE=0 row is the noiseless solve.
    """
    if realizations < 1:
        raise ValueError("need at least one realization")
    rows = []
    for mape in mapes:
        if mape == 0:
            outcomes = [settle(iterate(truth, config), truth)]
        else:
            outcomes = []
            for r in range(realizations):
                spec = NoiseSpec(mape, seed + r // 2, rule, antithetic=bool(r % 2))
                forecast, _ = apply_forecast_noise(truth, spec)
                outcomes.append(settle(iterate(forecast, config), truth))
        rows.append({
            "mape": mape,
            "realizations": len(outcomes),
            "participating_mean_cost": float(np.mean([o.participating_mean_cost for o in outcomes])),
            "community_cost": float(np.mean([o.community_cost for o in outcomes])),
            "min_grid_load": float(min(o.min_grid_load for o in outcomes)),
        })
        log.info("MAPE %g: community cost %.2f", mape, rows[-1]["community_cost"])
    return rows


def noise_study_summary(rows: list[dict]) -> dict:
    """Spread of the participants' mean cost across MAPE rows and whether
    community cost never decreases along the MAPE axis.

    ``relative_spread`` is the standard deviation over rows divided by the
    mean; ``max_relative_drift`` is the largest deviation from the first
    (noiseless) row relative to it.
    """
    costs = np.array([r["participating_mean_cost"] for r in rows])
    community = np.array([r["community_cost"] for r in rows])
    return {
        "relative_spread": float(np.std(costs) / abs(np.mean(costs))),
        "max_relative_drift": float(np.max(np.abs(costs - costs[0])) / abs(costs[0])),
        "community_non_decreasing": bool(np.all(np.diff(community) >= -1e-9 * (1 + np.abs(community[:-1])))),
    }
