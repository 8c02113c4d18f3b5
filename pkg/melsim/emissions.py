"""
Continuous emissions surrogate: a cubic rate polynomial in speed, integrated
along each fine step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from melsim import codec

logger = logging.getLogger(__name__)

DEFAULT_COEFFS = (0.2, 0.03, 0.0015, 0.00008)  # g/s, g/m, g*s/m^2, g*s^2/m^3
DEFAULT_SUBSTEPS = 32
CO2_PER_LITER_G = 2392.0


def emission_rate(v: float, coeffs: tuple[float, float, float, float] = DEFAULT_COEFFS) -> float:
    """Grams per second at speed v (m/s): a + b v + c v^2 + d v^3."""
    a, b, c, d = coeffs
    return a + v * (b + v * (c + v * d))


def rate_is_nonnegative(coeffs: tuple[float, float, float, float], v_max: float, samples: int = 1000) -> bool:
    """True when the rate stays >= 0 over [0, v_max] (sampled, plus interior stationary points)."""
    points = [v_max * i / samples for i in range(samples + 1)]
    a, b, c, d = coeffs
    # Roots of the derivative b + 2c v + 3d v^2
    if d != 0:
        disc = (2 * c) ** 2 - 12 * d * b
        if disc >= 0:
            root = disc ** 0.5
            points += [(-2 * c + root) / (6 * d), (-2 * c - root) / (6 * d)]
    elif c != 0:
        points.append(-b / (2 * c))
    return all(emission_rate(v, coeffs) >= 0 for v in points if 0 <= v <= v_max)


@codec.register
@dataclass(frozen=True)
class EmissionAccumulator:
    grams: float = 0.0

    @property
    def liters(self) -> float:
        return self.grams / CO2_PER_LITER_G


def step_mass(
    v_prev: float,
    v_now: float,
    dt: float,
    coeffs: tuple[float, float, float, float] = DEFAULT_COEFFS,
    substeps: int = DEFAULT_SUBSTEPS,
) -> float:
    """
    Mass emitted over one step whose speed moves linearly from v_prev to v_now.

    Composite trapezoid with `substeps` intervals; substeps=1 is the plain
    0.5 * (rate(v_prev) + rate(v_now)) * dt. Constant speed is exact.
    """
    if v_prev == v_now:
        return emission_rate(v_now, coeffs) * dt
    if substeps <= 1:
        return 0.5 * (emission_rate(v_prev, coeffs) + emission_rate(v_now, coeffs)) * dt
    h = dt / substeps
    dv = (v_now - v_prev) / substeps
    interior = sum(emission_rate(v_prev + k * dv, coeffs) for k in range(1, substeps))
    ends = 0.5 * (emission_rate(v_prev, coeffs) + emission_rate(v_now, coeffs))
    return h * (ends + interior)


def accumulate(
    acc: EmissionAccumulator,
    v_prev: float,
    v_now: float,
    dt: float,
    coeffs: tuple[float, float, float, float] = DEFAULT_COEFFS,
    substeps: int = DEFAULT_SUBSTEPS,
) -> EmissionAccumulator:
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if v_prev < 0 or v_now < 0:
        raise ValueError(f"speeds must be >= 0, got {v_prev}, {v_now}")
    return EmissionAccumulator(acc.grams + step_mass(v_prev, v_now, dt, coeffs, substeps))


@dataclass(frozen=True)
class EmissionModel:
    """Level-2 adapter: advances an accumulator by one fine step for a set of speed pairs."""

    coeffs: tuple[float, float, float, float] = DEFAULT_COEFFS
    substeps: int = DEFAULT_SUBSTEPS

    def advance(self, acc: EmissionAccumulator, v_prev: float, v_now: float, dt: float) -> EmissionAccumulator:
        return accumulate(acc, v_prev, v_now, dt, self.coeffs, self.substeps)
