"""Scenario construction: synthetic case-study profiles, JSON/CSV ingestion and
forecast-noise injection."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .core import SesParams, TimeGrid, UserProfile
from .errors import ScenarioError
from .pricing import TariffParams, calibrate_tou

# demand scaling for participating users: half scaled down, half up
DOWN_FACTORS = (0.84, 0.86, 0.88, 0.90, 0.92)
UP_FACTORS = (1.16, 1.14, 1.12, 1.10, 1.08)

DEFAULT_DAILY_DEMAND = 10.0
DEFAULT_DAILY_PV = 1.5


@dataclass(frozen=True)
class Scenario:
    grid: TimeGrid
    users: tuple[UserProfile, ...]
    ses: SesParams
    tariff: TariffParams
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        H = self.grid.steps
        ids = [u.id for u in self.users]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ScenarioError(f"duplicate user id(s): {', '.join(dup)}")
        for u in self.users:
            if u.horizon != H:
                raise ScenarioError(f"user {u.id}: profile length {u.horizon} != steps {H}")
        if self.tariff.horizon != H:
            raise ScenarioError(f"tariff length {self.tariff.horizon} != steps {H}")
        if not any(u.participating for u in self.users):
            raise ScenarioError("scenario needs at least one participating user")
        object.__setattr__(self, "users", tuple(self.users))

    @property
    def horizon(self) -> int:
        return self.grid.steps

    @property
    def participants(self) -> list[UserProfile]:
        return [u for u in self.users if u.participating]

    @property
    def non_participants(self) -> list[UserProfile]:
        return [u for u in self.users if not u.participating]

    @property
    def participant_ids(self) -> list[str]:
        return [u.id for u in self.participants]

    @property
    def surplus(self) -> np.ndarray:
        """True surplus of participating users, shape (users, H)."""
        return np.array([u.surplus_vector for u in self.participants])

    @property
    def e_n(self) -> np.ndarray:
        """Exogenous grid load of the non-participating users."""
        out = np.zeros(self.horizon)
        for u in self.non_participants:
            out += u.demand - u.generation
        return out

    @property
    def total_demand(self) -> np.ndarray:
        return np.sum([u.demand for u in self.users], axis=0)


def base_demand_profile(grid: TimeGrid, daily_kwh: float = DEFAULT_DAILY_DEMAND) -> np.ndarray:
    """Double-peaked household demand: a morning bump and a larger evening peak."""
    h = grid.hours + 0.5 * grid.step_hours
    shape = (
        0.55
        + 0.55 * np.exp(-0.5 * ((h - 7.5) / 1.3) ** 2)
        + 1.45 * np.exp(-0.5 * ((h - 19.0) / 2.0) ** 2)
    )
    return daily_kwh * shape / shape.sum()


def base_pv_profile(grid: TimeGrid, daily_kwh: float = DEFAULT_DAILY_PV) -> np.ndarray:
    """Clear-sky-like PV bell between 06:00 and 19:00, peaking at 12:30."""
    h = grid.hours + 0.5 * grid.step_hours
    sunrise, sunset = 6.0, 19.0
    x = np.clip((h - sunrise) / (sunset - sunrise), 0.0, 1.0)
    shape = np.sin(np.pi * x) ** 2
    return daily_kwh * shape / shape.sum()


def scale_factors(count: int) -> list[float]:
    """Demand scaling factors for ``count`` participating users (count even).

    Down-scaled users cycle through 0.84..0.92 and up-scaled users through
    1.16..1.08 in step, so every prefix pairs to a mean of exactly one.
    """
    if count % 2:
        raise ScenarioError(f"participating user count must be even, got {count}")
    half = count // 2
    down = [DOWN_FACTORS[i % len(DOWN_FACTORS)] for i in range(half)]
    up = [UP_FACTORS[i % len(UP_FACTORS)] for i in range(half)]
    return down + up


def generate_case_study(
    n_total: int = 40,
    participating_fraction: float = 0.25,
    base_demand=None,
    base_pv=None,
    seed: int = 0,
    grid: TimeGrid | None = None,
    ses: SesParams | None = None,
    tariff: TariffParams | None = None,
    price_low: float = 10.0,
    price_high: float = 55.0,
    price_mean: float = 25.0,
    e_max: float = 1e4,
) -> Scenario:
    """Neighbourhood of ``n_total`` users, a fraction of which participate.

    Participants share the base PV profile and get scaled copies of the base
    demand; non-participants get the unscaled base demand and no PV. Unless a
    tariff is given, one is calibrated on the total demand of all users so
    that the tariff does not depend on the participating fraction.
    """
    grid = grid or TimeGrid(48, 0.5)
    demand = base_demand_profile(grid) if base_demand is None else np.asarray(base_demand, dtype=float)
    pv = base_pv_profile(grid) if base_pv is None else np.asarray(base_pv, dtype=float)
    if len(demand) != grid.steps or len(pv) != grid.steps:
        raise ScenarioError("base profiles must have one value per time step")
    if not 0 < participating_fraction <= 1:
        raise ScenarioError("participating fraction must lie in (0, 1]")
    n_part = int(round(n_total * participating_fraction))
    if n_part < 1:
        raise ScenarioError("fraction gives no participating users")
    factors = scale_factors(n_part)

    users = []
    for i, f in enumerate(factors):
        users.append(UserProfile(f"P{i + 1:02d}", f * demand, pv.copy(), True))
    for j in range(n_total - n_part):
        users.append(UserProfile(f"N{j + 1:02d}", demand.copy(), np.zeros(grid.steps), False))

    ses = ses or SesParams.case_study_defaults(grid.steps)
    if tariff is None:
        total = demand * n_total  # scale factors average to one
        tariff = calibrate_tou(total, grid, price_low, price_high, price_mean, e_max=e_max)
    meta = {
        "generator": "case-study",
        "n_total": n_total,
        "participating_fraction": participating_fraction,
        "scale_factors": factors,
    }
    return Scenario(grid, tuple(users), ses, tariff, seed, meta)


# --------------------------------------------------------------------------- I/O


def _fail(path, message: str, line: int | None = None):
    where = f"{path}:{line}" if line else str(path)
    raise ScenarioError(f"{where}: {message}", path=str(path), line=line)


def _read_profile_csv(path: Path, steps: int, user_id: str):
    demand = np.full(steps, np.nan)
    gen = np.full(steps, np.nan)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        _fail(path, f"cannot open profile for user {user_id}: {exc}")
    with fh:
        reader = csv.DictReader(fh)
        need = {"step", "demand_kwh", "generation_kwh"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            _fail(path, f"CSV header must contain {sorted(need)}", 1)
        for row in reader:
            line = reader.line_num
            try:
                step = int(row["step"])
                d = float(row["demand_kwh"])
                g = float(row["generation_kwh"])
            except (TypeError, ValueError):
                _fail(path, "non-numeric value", line)
            if not 1 <= step <= steps:
                _fail(path, f"step {step} outside 1..{steps}", line)
            if d < 0:
                _fail(path, f"negative demand_kwh {d}", line)
            if g < 0:
                _fail(path, f"negative generation_kwh {g}", line)
            demand[step - 1] = d
            gen[step - 1] = g
    if np.isnan(demand).any() or np.isnan(gen).any():
        missing = np.flatnonzero(np.isnan(demand) | np.isnan(gen)) + 1
        _fail(path, f"missing steps {missing.tolist()[:10]}")
    return demand, gen


def _vector(doc, key: str, steps: int, where: str):
    if key not in doc:
        raise ScenarioError(f"{where}: missing field '{key}'")
    vals = doc[key]
    if not isinstance(vals, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
        raise ScenarioError(f"{where}.{key}: expected a list of numbers")
    if len(vals) != steps:
        raise ScenarioError(f"{where}.{key}: length {len(vals)} != steps {steps}")
    return np.array(vals, dtype=float)


def scenario_from_dict(doc: dict, base_dir: Path | None = None, source="<dict>") -> Scenario:
    base_dir = Path(base_dir or ".")
    try:
        steps = doc["steps"]
    except (KeyError, TypeError):
        raise ScenarioError(f"{source}: missing field 'steps'")
    if not isinstance(steps, int) or steps < 1:
        raise ScenarioError(f"{source}: 'steps' must be a positive integer")
    try:
        grid = TimeGrid(steps, float(doc.get("step_hours", 0.5)))
        ses_doc = doc.get("ses")
        if not isinstance(ses_doc, dict):
            raise ScenarioError(f"{source}: missing object 'ses'")
        ses = SesParams(
            capacity=float(ses_doc["capacity"]),
            leakage=float(ses_doc.get("leakage", 1.0)),
            charge_eff=float(ses_doc.get("charge_eff", 1.0)),
            discharge_eff=float(ses_doc.get("discharge_eff", 1.0)),
            initial_charge=float(ses_doc.get("initial_charge", 0.0)),
        )
    except KeyError as exc:
        raise ScenarioError(f"{source}: ses: missing field {exc}")
    except ValueError as exc:
        raise ScenarioError(f"{source}: ses: {exc}")

    users_doc = doc.get("users")
    if not isinstance(users_doc, list) or not users_doc:
        raise ScenarioError(f"{source}: 'users' must be a non-empty list")
    users = []
    for k, u in enumerate(users_doc):
        where = f"{source}: users[{k}]"
        if not isinstance(u, dict) or "id" not in u:
            raise ScenarioError(f"{where}: missing field 'id'")
        uid = str(u["id"])
        if "profile_csv" in u:
            demand, gen = _read_profile_csv(base_dir / u["profile_csv"], steps, uid)
        else:
            demand = _vector(u, "demand", steps, where)
            gen = _vector(u, "generation", steps, where)
        try:
            users.append(UserProfile(uid, demand, gen, bool(u.get("participating", True))))
        except ValueError as exc:
            raise ScenarioError(f"{where}: {exc}")

    tdoc = doc.get("tariff")
    if not isinstance(tdoc, dict):
        raise ScenarioError(f"{source}: missing object 'tariff'")
    try:
        if "calibrate" in tdoc:
            cal = tdoc["calibrate"]
            total = np.sum([u.demand for u in users], axis=0)
            tariff = calibrate_tou(
                total, grid,
                float(cal.get("price_low", 10.0)), float(cal.get("price_high", 55.0)),
                float(cal.get("price_mean", 25.0)), float(cal.get("peak_ratio", 1.5)),
                e_max=float(tdoc.get("e_max", 1e4)),
            )
        else:
            tariff = TariffParams(
                _vector(tdoc, "phi", steps, f"{source}: tariff"),
                _vector(tdoc, "delta", steps, f"{source}: tariff"),
                float(tdoc.get("e_max", 1e4)),
            )
    except ValueError as exc:
        raise ScenarioError(f"{source}: tariff: {exc}")
    return Scenario(grid, tuple(users), ses, tariff, int(doc.get("seed", 0)), dict(doc.get("meta", {})))


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read scenario: {exc}", path=str(path))
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        _fail(path, f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno)
    return scenario_from_dict(doc, path.parent, str(path))


def scenario_to_dict(scenario: Scenario) -> dict:
    s = scenario.ses
    return {
        "steps": scenario.grid.steps,
        "step_hours": scenario.grid.step_hours,
        "seed": scenario.seed,
        "ses": {
            "capacity": s.capacity,
            "leakage": s.leakage,
            "charge_eff": s.charge_eff,
            "discharge_eff": s.discharge_eff,
            "initial_charge": s.initial_charge,
        },
        "tariff": {
            "phi": scenario.tariff.phi.tolist(),
            "delta": scenario.tariff.delta.tolist(),
            "e_max": scenario.tariff.e_max,
        },
        "users": [
            {
                "id": u.id,
                "participating": u.participating,
                "demand": u.demand.tolist(),
                "generation": u.generation.tolist(),
            }
            for u in scenario.users
        ],
        "meta": _jsonable(scenario.meta),
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), indent=1))


# ------------------------------------------------------------------------- noise


@dataclass(frozen=True)
class NoiseSpec:
    """Multiplicative forecast noise with a target mean absolute percentage error.

    ``rule="calibrated"`` picks the Gaussian spread so that the expected absolute
    relative error after clamping at zero equals ``mape``. ``rule="variance"``
    uses a variance of 2*mape/100 directly.
    """

    mape: float
    seed: int = 0
    rule: str = "calibrated"
    antithetic: bool = False  # negate the draws, for variance reduction in studies

    def __post_init__(self):
        if not 0 <= self.mape <= 100:
            raise ValueError("MAPE must lie in [0, 100]")
        if self.rule not in ("calibrated", "variance"):
            raise ValueError("rule must be 'calibrated' or 'variance'")

    @property
    def sigma(self) -> float:
        if self.mape == 0:
            return 0.0
        if self.rule == "variance":
            return math.sqrt(2.0 * self.mape / 100.0)
        return noise_sigma_for_mape(self.mape / 100.0)


def clamped_mape(sigma: float) -> float:
    """E|max(0, 1 + sigma Z) - 1| for standard normal Z."""
    if sigma == 0:
        return 0.0
    k = 1.0 / sigma
    return 2.0 * sigma * norm.pdf(0.0) - sigma * norm.pdf(k) + norm.sf(k)


def noise_sigma_for_mape(target: float) -> float:
    if target <= 0:
        return 0.0
    if target < 1e-6:
        # clamping is negligible, so E|sigma Z| = sigma * sqrt(2/pi)
        return target * math.sqrt(math.pi / 2.0)
    return brentq(lambda s: clamped_mape(s) - target, 0.0, 50.0, xtol=1e-14 * target)


@dataclass(frozen=True)
class NoiseReport:
    sigma: float
    samples: int
    clamped: int


def apply_forecast_noise(scenario: Scenario, spec: NoiseSpec) -> tuple[Scenario, NoiseReport]:
    """Perturb every demand and PV sample by a factor (1 + eps), clamped at zero.

    The draws depend only on ``spec.seed`` and the scenario shape, so sweeping
    ``mape`` with a fixed seed rescales one set of standard-normal draws.
    """
    sigma = spec.sigma
    H = scenario.horizon
    rng = np.random.default_rng(spec.seed)
    draws = rng.standard_normal((len(scenario.users), 2, H))
    if spec.antithetic:
        draws = -draws
    users = []
    clamped = 0
    for u, z in zip(scenario.users, draws):
        d = u.demand * (1.0 + sigma * z[0])
        g = u.generation * (1.0 + sigma * z[1])
        clamped += int(np.sum(d < 0) + np.sum(g < 0))
        users.append(UserProfile(u.id, np.maximum(d, 0.0), np.maximum(g, 0.0), u.participating))
    meta = dict(scenario.meta, noise={"mape": spec.mape, "seed": spec.seed, "rule": spec.rule,
                                      "antithetic": spec.antithetic})
    noisy = replace(scenario, users=tuple(users), meta=meta)
    return noisy, NoiseReport(sigma, 2 * H * len(scenario.users), clamped)
