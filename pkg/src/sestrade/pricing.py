"""Quadratic grid cost and the linear grid price paid by the retailer.

Prices are in cents/kWh, ``phi`` in cents/kWh^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import TimeGrid, ValidationReport, Violation, _as_vector, _check_step

PEAK_START_HOUR = 16.0
PEAK_END_HOUR = 23.0
PEAK_RATIO = 1.5


@dataclass(frozen=True)
class TariffParams:
    phi: np.ndarray
    delta: np.ndarray
    e_max: float = 1e4

    def __post_init__(self):
        phi = _as_vector(self.phi, "phi")
        delta = _as_vector(self.delta, "delta", len(phi))
        if np.any(phi <= 0):
            raise ValueError("phi must be strictly positive at every step")
        if np.any(delta < 0):
            raise ValueError("delta must be non-negative")
        if not self.e_max > 0:
            raise ValueError("e_max must be positive")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "delta", delta)

    @property
    def horizon(self) -> int:
        return len(self.phi)

    @classmethod
    def constant(cls, phi: float, delta: float, steps: int = 1, e_max: float = 1e4) -> "TariffParams":
        return cls(np.full(steps, phi), np.full(steps, delta), e_max)


def grid_cost(E: float, t: int, tariff: TariffParams) -> float:
    i = _check_step(t, tariff.horizon)
    return float(tariff.phi[i] * E * E + tariff.delta[i] * E)


def grid_price(E: float, t: int, tariff: TariffParams) -> float:
    i = _check_step(t, tariff.horizon)
    return float(tariff.phi[i] * E + tariff.delta[i])


def grid_prices(E, tariff: TariffParams) -> np.ndarray:
    """Vectorised ``grid_price`` over the whole horizon."""
    return tariff.phi * np.asarray(E, dtype=float) + tariff.delta


def grid_costs(E, tariff: TariffParams) -> np.ndarray:
    E = np.asarray(E, dtype=float)
    return tariff.phi * E * E + tariff.delta * E


def validate_total_load(E, tariff: TariffParams) -> ValidationReport:
    """Pass iff 0 < E(t) < E_max at every step (steps reported 1-based)."""
    E = np.asarray(E, dtype=float)
    found = []
    for i, value in enumerate(E):
        if value <= 0:
            found.append(Violation("non-positive", i + 1, float(-value)))
        elif value >= tariff.e_max:
            found.append(Violation("above-cap", i + 1, float(value - tariff.e_max)))
    return ValidationReport(tuple(found))


def peak_mask(grid: TimeGrid, start: float = PEAK_START_HOUR, end: float = PEAK_END_HOUR) -> np.ndarray:
    h = grid.hours
    return (h >= start) & (h < end)


def calibrate_tou(
    load,
    grid: TimeGrid,
    price_low: float = 10.0,
    price_high: float = 55.0,
    price_mean: float = 25.0,
    peak_ratio: float = PEAK_RATIO,
    e_max: float = 1e4,
) -> TariffParams:
    """Two-level time-of-use tariff fitted to a reference load.

    ``phi`` is ``peak_ratio`` times higher inside the evening peak window; its
    off-peak level is chosen so that the predicted price ``phi*load + delta``
    spans ``price_high - price_low``. ``delta`` is one constant chosen so the
    mean predicted price equals ``price_mean``.
    """
    load = _as_vector(load, "load", grid.steps)
    if price_high <= price_low:
        raise ValueError("price_high must exceed price_low")
    weight = np.where(peak_mask(grid), peak_ratio, 1.0)
    shaped = weight * load
    spread = shaped.max() - shaped.min()
    if spread <= 0:
        raise ValueError("reference load has no variation; cannot fit a price range")
    phi_off = (price_high - price_low) / spread
    delta = price_mean - phi_off * shaped.mean()
    if delta < 0:
        raise ValueError(
            f"calibration gives negative delta ({delta:.4g}); raise price_mean or lower the range"
        )
    return TariffParams(phi_off * weight, np.full(grid.steps, delta), e_max)
