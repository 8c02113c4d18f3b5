"""Tests for melsim.micro: Nagel-Schreckenberg update rules and the deterministic fundamental diagram."""

import random
import unittest
from dataclasses import replace

from melsim.micro import BLOCKED, EXIT, INSIDE, MicroVehicle, NaschParams, fine_step


class _RingRules:
    """A single arc closed on itself: the lead vehicle's next arc is the same lattice."""

    def __init__(self, cells: int) -> None:
        self.length = cells

    def cells(self, arc):
        return self.length

    def next_target(self, vehicle):
        return INSIDE, vehicle.edge_id

    def can_leave(self, vehicle, target):
        return False

    def leave(self, vehicle, target):
        raise AssertionError("nothing leaves a closed ring")

    def advance(self, vehicle, arc, cell, speed):
        return replace(vehicle, edge_id=arc, cell=cell, speed=speed)

    def waiting(self):
        return []

    def admit(self, arc):
        raise AssertionError("nothing enters a closed ring")


def _ring(cells: int, positions: list[int], speeds: list[int] | None = None) -> dict:
    speeds = speeds or [0] * len(positions)
    return {
        0: tuple(
            MicroVehicle(id=i, edge_id=0, cell=c, speed=v, route=())
            for i, (c, v) in enumerate(zip(positions, speeds))
        )
    }


def _never(_vid: int) -> float:
    return 1.0


def _always(_vid: int) -> float:
    return 0.0


class TestUpdateRules(unittest.TestCase):
    def test_lone_vehicle_accelerates_to_vmax(self):
        rules = _RingRules(100)
        lattices = _ring(100, [0])
        speeds = []
        for f in range(6):
            result = fine_step(lattices, NaschParams(p_brake=0.0), rules, f, _never)
            lattices = result.lattices
            speeds.append(lattices[0][0].speed)
        self.assertEqual(speeds, [1, 2, 3, 4, 5, 5])
        self.assertEqual(lattices[0][0].cell, 20)

    def test_follower_brakes_to_gap(self):
        rules = _RingRules(50)
        lattices = _ring(50, [0, 3], [5, 0])
        result = fine_step(lattices, NaschParams(p_brake=0.0), rules, 0, _never)
        by_id = {v.id: v for v in result.lattices[0]}
        self.assertEqual(by_id[0].speed, 2)
        self.assertEqual(by_id[0].cell, 2)
        self.assertEqual(by_id[1].speed, 1)

    def test_random_slowdown_applies_after_braking(self):
        rules = _RingRules(50)
        lattices = _ring(50, [0, 3], [5, 0])
        result = fine_step(lattices, NaschParams(p_brake=1.0), rules, 0, _always)
        by_id = {v.id: v for v in result.lattices[0]}
        self.assertEqual(by_id[0].speed, 1)
        self.assertEqual(by_id[1].speed, 0)

    def test_speed_records_before_and_after(self):
        rules = _RingRules(20)
        result = fine_step(_ring(20, [4], [2]), NaschParams(p_brake=0.0), rules, 0, _never)
        self.assertEqual(result.speeds, [(0, 2, 3)])

    def test_wrap_keeps_order_without_collision(self):
        rules = _RingRules(10)
        lattices = _ring(10, [1, 8], [1, 5])
        result = fine_step(lattices, NaschParams(p_brake=0.0), rules, 0, _never)
        cells = [v.cell for v in result.lattices[0]]
        self.assertEqual(len(set(cells)), 2)
        self.assertEqual(result.internal_moves, 1)

    def test_lattice_update_matches_per_vehicle_rules(self):
        rng = random.Random(7)
        params = NaschParams(vmax=5, p_brake=0.3)
        for trial in range(50):
            length = rng.randint(5, 60)
            positions = sorted(rng.sample(range(length), rng.randint(1, length)))
            speeds = [rng.randint(0, 5) for _ in positions]
            draws = {vid: rng.random() for vid in range(len(positions))}
            lattices = _ring(length, positions, speeds)
            vehicles = lattices[0]
            expected = set()
            for i, veh in enumerate(vehicles):
                if i + 1 < len(vehicles):
                    gap = vehicles[i + 1].cell - veh.cell - 1
                else:
                    gap = length - 1 - veh.cell + vehicles[0].cell
                v = min(veh.speed + 1, params.vmax, gap)
                if draws[veh.id] < params.p_brake:
                    v = max(v - 1, 0)
                expected.add((veh.id, (veh.cell + v) % length, v))
            with self.subTest(trial=trial):
                result = fine_step(lattices, params, _RingRules(length), trial, draws.__getitem__)
                self.assertEqual({(v.id, v.cell, v.speed) for v in result.lattices[0]}, expected)
                self.assertTrue(all(isinstance(v.speed, int) for v in result.lattices[0]))

    def test_exit_hands_lead_vehicle_to_rules(self):
        class Exit(_RingRules):
            def __init__(self, cells):
                super().__init__(cells)
                self.left = []

            def next_target(self, vehicle):
                return EXIT, 7

            def can_leave(self, vehicle, target):
                return True

            def leave(self, vehicle, target):
                self.left.append((vehicle.id, target))

        rules = Exit(10)
        result = fine_step(_ring(10, [9], [5]), NaschParams(p_brake=0.0), rules, 0, _never)
        self.assertEqual(rules.left, [(0, 7)])
        self.assertEqual(len(result.exited), 1)
        self.assertEqual(result.lattices[0], ())

    def test_blocked_lead_stops_at_arc_end(self):
        class Blocked(_RingRules):
            def next_target(self, vehicle):
                return BLOCKED, None

        result = fine_step(_ring(10, [7], [3]), NaschParams(p_brake=0.0), Blocked(10), 0, _never)
        self.assertEqual(result.lattices[0][0].cell, 9)
        self.assertEqual(result.lattices[0][0].speed, 2)


class TestFundamentalDiagram(unittest.TestCase):
    CELLS = 200
    WARMUP = 100
    STEPS = 1000

    def _flow(self, density: float) -> float:
        n = round(density * self.CELLS)
        rules = _RingRules(self.CELLS)
        lattices = _ring(self.CELLS, [i * self.CELLS // n for i in range(n)])
        params = NaschParams(vmax=5, p_brake=0.0)
        moved = 0
        for f in range(self.WARMUP + self.STEPS):
            result = fine_step(lattices, params, rules, f, _never)
            lattices = result.lattices
            if f >= self.WARMUP:
                moved += sum(after for _, _, after in result.speeds)
        return moved / (self.CELLS * self.STEPS)

    def test_deterministic_flow_matches_analytic(self):
        for density in (0.1, 0.3, 0.5, 0.8):
            with self.subTest(density=density):
                expected = min(density * 5, 1 - density)
                self.assertAlmostEqual(self._flow(density), expected, delta=0.01 * expected)


if __name__ == "__main__":
    unittest.main()
