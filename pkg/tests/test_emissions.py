"""Tests for melsim.emissions: rate polynomial, step quadrature and accumulation."""

import unittest

from melsim.emissions import (
    CO2_PER_LITER_G,
    DEFAULT_COEFFS,
    EmissionAccumulator,
    EmissionModel,
    accumulate,
    emission_rate,
    rate_is_nonnegative,
    step_mass,
)
from melsim.multilevel import step_continuous


def _ramp(acc: EmissionAccumulator, substeps: int) -> EmissionAccumulator:
    # 0 -> 15 m/s over 30 one-second steps
    for t in range(30):
        acc = accumulate(acc, 0.5 * t, 0.5 * (t + 1), 1.0, substeps=substeps)
    return acc


class TestEmissionRate(unittest.TestCase):
    def test_idle_rate_is_constant_term(self):
        self.assertEqual(emission_rate(0.0), DEFAULT_COEFFS[0])

    def test_polynomial(self):
        self.assertAlmostEqual(emission_rate(10.0, (1.0, 2.0, 3.0, 4.0)), 1 + 20 + 300 + 4000)

    def test_negative_rate_detected(self):
        self.assertTrue(rate_is_nonnegative(DEFAULT_COEFFS, 37.5))
        self.assertFalse(rate_is_nonnegative((1.0, -1.0, 0.0, 0.0), 10.0))
        # dips below zero only between samples: caught through the stationary point
        self.assertFalse(rate_is_nonnegative((0.25 - 1e-9, -1.0, 1.0, 0.0), 1.0, samples=3))


class TestAccumulate(unittest.TestCase):
    def test_idle_vehicle(self):
        acc = accumulate(EmissionAccumulator(), 0.0, 0.0, 1.0)
        self.assertEqual(acc.grams, DEFAULT_COEFFS[0])

    def test_constant_speed_is_exact(self):
        acc = EmissionAccumulator()
        for _ in range(10):
            acc = accumulate(acc, 12.0, 12.0, 1.0)
        self.assertAlmostEqual(acc.grams, 10 * emission_rate(12.0), places=12)

    def test_ramp_matches_fine_quadrature(self):
        got = _ramp(EmissionAccumulator(), substeps=32).grams
        oracle = _ramp(EmissionAccumulator(), substeps=32 * 1000).grams
        self.assertLess(abs(got - oracle) / oracle, 1e-6)

    def test_ramp_matches_closed_form(self):
        a, b, c, d = DEFAULT_COEFFS
        k, horizon = 0.5, 30.0
        exact = a * horizon + b * k * horizon**2 / 2 + c * k**2 * horizon**3 / 3 + d * k**3 * horizon**4 / 4
        got = _ramp(EmissionAccumulator(), substeps=32).grams
        self.assertLess(abs(got - exact) / exact, 1e-6)

    def test_liters(self):
        self.assertAlmostEqual(EmissionAccumulator(CO2_PER_LITER_G).liters, 1.0)

    def test_invalid_inputs(self):
        with self.assertRaises(ValueError):
            accumulate(EmissionAccumulator(), 1.0, 1.0, 0.0)
        with self.assertRaises(ValueError):
            accumulate(EmissionAccumulator(), -1.0, 1.0, 1.0)

    def test_single_substep_is_trapezoid(self):
        expected = 0.5 * (emission_rate(0.0) + emission_rate(10.0)) * 2.0
        self.assertAlmostEqual(step_mass(0.0, 10.0, 2.0, substeps=1), expected)


class TestContinuousLevel(unittest.TestCase):
    def test_step_continuous_folds_every_pair(self):
        model = EmissionModel()
        pairs = [(0.0, 7.5), (7.5, 7.5), (15.0, 7.5)]
        acc = step_continuous(model, EmissionAccumulator(), pairs, 1.0)
        expected = sum(step_mass(p, n, 1.0) for p, n in pairs)
        self.assertAlmostEqual(acc.grams, expected)


if __name__ == "__main__":
    unittest.main()
