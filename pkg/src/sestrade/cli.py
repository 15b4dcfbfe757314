"""Command-line entry point.

Subcommands: solve, baseline, ic-audit, sweep, noise-study. Exit codes are
0 success, 1 usage, 2 infeasible, 3 non-convergence, 4 certificate or audit
failure. Every output file carries a header with the config hash, seed and
package version.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CertificateError, SesTradeError
from .leader import SolverConfig
from .mechanism import DOMINANCE_TOL, ic_audit, misreport_grid
from .metrics import baseline_run, check_ledgers, system_report, write_csv, write_json
from .retailer import LeaderStrategyPoint
from .scenario import generate_case_study, load_scenario, scenario_to_dict
from .stackelberg import IterationConfig, certify, iterate
from .studies import DEFAULT_FRACTIONS, fraction_sweep, noise_study, noise_study_summary

log = logging.getLogger("sestrade")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NONCONVERGENCE, EXIT_CERTIFICATE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


def _float_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_argument_group("scenario")
    pick = src.add_mutually_exclusive_group()
    pick.add_argument("--scenario", type=Path, help="scenario JSON file")
    pick.add_argument("--generate", action="store_true", help="use the synthetic case study (default)")
    src.add_argument("--users", type=_positive(int), default=40, help="total users for --generate")
    src.add_argument("--fraction", type=_positive(float), default=None,
                     help="participating fraction for --generate (default 0.25; 0.6 for noise-study)")
    src.add_argument("--seed", type=int, default=0)
    src.add_argument("--price-low", type=_positive(float), default=10.0, help="calibrated grid price low, cents/kWh")
    src.add_argument("--price-high", type=_positive(float), default=55.0, help="calibrated grid price high, cents/kWh")
    src.add_argument("--price-mean", type=_positive(float), default=25.0, help="calibrated mean grid price, cents/kWh")
    solver = common.add_argument_group("solver")
    solver.add_argument("--tau", type=_positive(float), default=1e-4, help="relative change for convergence")
    solver.add_argument("--max-rounds", type=_positive(int), default=500)
    solver.add_argument("--kkt-tol", type=_positive(float), default=1e-8)
    solver.add_argument("--p-min", type=_positive(float), default=0.1, help="SES price floor, cents/kWh")
    solver.add_argument("--relaxation", type=float, default=1.0, help="step factor in (0, 1]")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="sestrade", description="Shared-storage trading game: equilibrium, audits and studies.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", parents=[common], help="solve for the equilibrium and certify it")
    p.add_argument("--certify-samples", type=int, default=10_000, help="0 skips the certificate")

    sub.add_parser("baseline", parents=[common], help="report for the system without storage")

    p = sub.add_parser("ic-audit", parents=[common], help="truthfulness audit at the equilibrium strategy")
    p.add_argument("--user", action="append", help="participant id (repeatable; default all)")
    p.add_argument("--step", action="append", type=int, help="1-based step (repeatable; default all)")
    p.add_argument("--tolerance", type=float, default=DOMINANCE_TOL, help="allowed dominance margin, cents")
    p.add_argument("--points", type=_positive(int), default=41, help="misreports per user and step")

    p = sub.add_parser("sweep", parents=[common], help="solve across participating fractions")
    p.add_argument("--fractions", type=_float_list, default=list(DEFAULT_FRACTIONS))

    p = sub.add_parser("noise-study", parents=[common], help="forecast-noise study")
    p.add_argument("--mape-max", type=float, default=50.0)
    p.add_argument("--mape-step", type=_positive(float), default=5.0)
    p.add_argument("--realizations", type=_positive(int), default=10)
    p.add_argument("--noise-rule", choices=("calibrated", "variance"), default="calibrated")
    return parser


# ------------------------------------------------------------------ helpers


def _iteration_config(args) -> IterationConfig:
    if not 0 < args.relaxation <= 1:
        raise UsageError("--relaxation must lie in (0, 1]")
    solver = SolverConfig(tol=args.kkt_tol, p_min=args.p_min)
    return IterationConfig(tau=args.tau, max_rounds=args.max_rounds, relaxation=args.relaxation, solver=solver)


def _fraction(args, default=0.25) -> float:
    return default if args.fraction is None else args.fraction


def _scenario(args, default_fraction=0.25):
    if args.scenario is not None:
        return load_scenario(args.scenario)
    return generate_case_study(args.users, _fraction(args, default_fraction), seed=args.seed, **_price_targets(args))


def _price_targets(args) -> dict:
    if not args.price_low < args.price_mean < args.price_high:
        raise UsageError("need --price-low < --price-mean < --price-high")
    return {"price_low": args.price_low, "price_high": args.price_high, "price_mean": args.price_mean}


def _header(args, scenario=None) -> dict:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "verbose"}
    if scenario is not None:
        config["scenario_doc"] = scenario_to_dict(scenario)
    blob = json.dumps(config, sort_keys=True, default=_plain).encode()
    return {
        "command": args.command,
        "config_hash": hashlib.sha256(blob).hexdigest()[:16],
        "seed": args.seed,
        "version": __version__,
    }


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


def _header_lines(header: dict) -> list[str]:
    return [f"{k}: {v}" for k, v in header.items()]


def _prepare_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}")
    return path


# ----------------------------------------------------------------- commands


def cmd_solve(args) -> int:
    scenario = _scenario(args)
    out = _prepare_out(args.out)
    header = _header(args, scenario)
    result = iterate(scenario, _iteration_config(args))
    report = system_report(result, scenario)
    ledgers = check_ledgers(result, scenario)
    cert = certify(result, scenario, samples=args.certify_samples, seed=args.seed) if args.certify_samples > 0 else None

    doc = {
        "header": header,
        "summary": {**report.summary(), **result.summary()},
        "strategy": {"p_s": result.strategy.p_s, "e_s": result.strategy.e_s},
        "participant_grid_load": result.aggregate,
        "ses_charge": result.state.charge,
        "users": [
            {"id": uid, "declared": result.declared[i], "grid": result.response.grid[i],
             "ses": result.response.ses[i], "payment": result.payments[i], "cost": result.user_costs[i]}
            for i, uid in enumerate(result.user_ids)
        ],
        "ledgers": {"energy": ledgers.energy, "money": ledgers.money, "retailer": ledgers.retailer,
                    "passed": ledgers.passed},
        "certificate": None if cert is None else cert.to_dict(),
    }
    write_json(doc, out / "equilibrium.json")
    write_csv(report.step_records(), out / "report.csv", _header_lines(header))
    write_csv([{"round": i + 1, "relative_change": c} for i, c in enumerate(result.history)],
              out / "convergence.csv", _header_lines(header))
    if cert is not None:
        write_json({"header": header, **cert.to_dict()}, out / "certificate.json")
    print(f"converged in {result.rounds} rounds; PAR {report.par:.4f}; revenue {result.revenue:.2f} cents")
    if cert is not None and not cert.passed:
        raise CertificateError("equilibrium certificate failed", certificate=cert.to_dict())
    if not ledgers.passed:
        raise CertificateError("ledger check failed", energy=ledgers.energy, money=ledgers.money)
    return EXIT_OK


def cmd_baseline(args) -> int:
    scenario = _scenario(args)
    out = _prepare_out(args.out)
    header = _header(args, scenario)
    report = baseline_run(scenario)
    write_json({"header": header, **report.to_dict()}, out / "baseline.json")
    write_csv(report.step_records(), out / "baseline.csv", _header_lines(header))
    print(f"baseline PAR {report.par:.4f}; social cost {report.social_cost:.2f} cents")
    return EXIT_OK


def cmd_ic_audit(args) -> int:
    scenario = _scenario(args)
    out = _prepare_out(args.out)
    header = _header(args, scenario)
    result = iterate(scenario, _iteration_config(args))
    ids = list(result.user_ids)
    users = args.user or ids
    unknown = sorted(set(users) - set(ids))
    if unknown:
        raise UsageError(f"unknown participant id(s): {', '.join(unknown)}")
    steps = args.step or list(range(1, scenario.horizon + 1))
    bad_steps = [t for t in steps if not 1 <= t <= scenario.horizon]
    if bad_steps:
        raise UsageError(f"steps must lie in 1..{scenario.horizon}: {bad_steps}")
    truth = scenario.surplus
    records, summary, failures = [], [], 0
    for uid in users:
        n = ids.index(uid)
        for t in steps:
            i = t - 1
            rho = LeaderStrategyPoint(float(result.strategy.p_s[i]), float(result.strategy.e_s[i]))
            reports = misreport_grid(truth[n, i], points=args.points)
            table = ic_audit(n, truth[:, i], rho, scenario.tariff, float(scenario.e_n[i]), t,
                             reports=reports, user_id=uid, tol=args.tolerance)
            records.extend(table.as_records())
            failures += not table.passed
            summary.append({"user": uid, "step": t, "margin": table.margin, "passed": table.passed,
                            "infeasible_rows": sum(not r.feasible for r in table.rows)})
    write_csv(records, out / "audit.csv", _header_lines(header))
    write_json({"header": header, "tolerance": args.tolerance, "tables": len(summary), "failures": failures,
                "worst_margin": max(s["margin"] for s in summary), "groups": summary}, out / "audit.json")
    print(f"audited {len(summary)} user-steps; {failures} dominance violations")
    if failures:
        raise CertificateError(f"{failures} audit tables show a profitable misreport", failures=failures)
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.scenario is not None:
        raise UsageError("sweep generates its own scenarios; drop --scenario")
    out = _prepare_out(args.out)
    header = _header(args)
    bad = [f for f in args.fractions if not 0 < f <= 1]
    if bad:
        raise UsageError(f"fractions must lie in (0, 1]: {bad}")
    rows = fraction_sweep(args.fractions, args.users, args.seed, _iteration_config(args), **_price_targets(args))
    write_csv(rows, out / "sweep.csv", _header_lines(header))
    for r in rows:
        print(f"fraction {r['fraction']:.2f}: PAR reduction {r['par_reduction']:.2f}%")
    return EXIT_OK


def cmd_noise_study(args) -> int:
    if args.mape_max < 0 or args.mape_max > 100:
        raise UsageError("--mape-max must lie in [0, 100]")
    scenario = _scenario(args, default_fraction=0.6)
    out = _prepare_out(args.out)
    header = _header(args, scenario)
    mapes = np.round(np.arange(0.0, args.mape_max + 1e-9, args.mape_step), 10).tolist()
    rows = noise_study(scenario, mapes, args.realizations, args.seed, args.noise_rule, _iteration_config(args))
    write_csv(rows, out / "noise_study.csv", _header_lines(header))
    write_json({"header": header, **noise_study_summary(rows)}, out / "noise_study.json")
    for r in rows:
        print(f"MAPE {r['mape']:g}%: participating {r['participating_mean_cost']:.2f}, "
              f"community {r['community_cost']:.2f} cents")
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "baseline": cmd_baseline,
    "ic-audit": cmd_ic_audit,
    "sweep": cmd_sweep,
    "noise-study": cmd_noise_study,
}


def _report_error(args, payload: dict) -> None:
    print(json.dumps(payload, default=_plain), file=sys.stderr)
    out = getattr(args, "out", None)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_json(payload, out / "error.json")
        except OSError:
            pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _report_error(args, {"category": "usage", "message": str(exc)})
        return EXIT_USAGE
    except SesTradeError as exc:
        _report_error(args, exc.to_dict())
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
