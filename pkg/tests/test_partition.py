"""Tests for melsim.partition and melsim.regions: LP assignment, routing and subscriptions."""

import unittest

from melsim.errors import ConfigError, RoutingError
from melsim.kernel import EventMessage
from melsim.partition import CommunicationStats, Directory, make_partition, route_message
from melsim.regions import RegionTable


def _msg(src: int, dst: int) -> EventMessage:
    return EventMessage(src=src, dst=dst, send_step=0, deliver_step=1, seq=0)


class TestMakePartition(unittest.TestCase):
    def test_round_robin(self):
        partition = make_partition(range(10), 2)
        self.assertEqual(partition.resident(0), [0, 2, 4, 6, 8])
        self.assertEqual(partition.resident(1), [1, 3, 5, 7, 9])

    def test_single_lp(self):
        for strategy in ("round-robin", "block", "geographic"):
            with self.subTest(strategy=strategy):
                self.assertEqual(make_partition(range(7), 1, strategy).sizes(), [7])

    def test_block_sizes_differ_by_at_most_one(self):
        partition = make_partition(range(10), 3, "block")
        self.assertEqual(partition.sizes(), [4, 3, 3])
        self.assertEqual(partition.resident(0), [0, 1, 2, 3])

    def test_geographic_sorts_west_to_east(self):
        xs = {0: 30.0, 1: 10.0, 2: 20.0, 3: 0.0}
        partition = make_partition(range(5), 2, "geographic", position=lambda e: (xs[e], 0.0) if e in xs else None)
        # entity 4 has no position and goes last
        self.assertEqual(partition.resident(0), [1, 2, 3])
        self.assertEqual(partition.resident(1), [0, 4])

    def test_invalid_arguments(self):
        with self.assertRaises(ConfigError):
            make_partition(range(3), 0)
        with self.assertRaises(ConfigError):
            make_partition(range(3), 2, "spiral")


class TestRouteMessage(unittest.TestCase):
    def setUp(self):
        self.directory = Directory.from_partition(make_partition(range(4), 2))
        self.stats = CommunicationStats()

    def test_local_and_remote_counting(self):
        self.assertEqual(route_message(self.directory, _msg(0, 2), 0, self.stats), 0)
        self.assertEqual(route_message(self.directory, _msg(0, 3), 0, self.stats, size=40), 1)
        self.assertEqual((self.stats.local_msgs, self.stats.remote_msgs, self.stats.bytes_remote), (1, 1, 40))

    def test_follows_migrated_owner(self):
        self.directory.move([(3, 0)])
        self.assertEqual(self.directory.version, 1)
        self.assertEqual(route_message(self.directory, _msg(0, 3), 0, self.stats), 0)
        self.assertEqual(self.stats.remote_msgs, 0)

    def test_empty_batch_keeps_version(self):
        self.directory.move([])
        self.assertEqual(self.directory.version, 0)

    def test_unknown_destination(self):
        with self.assertRaises(RoutingError):
            route_message(self.directory, _msg(0, 99), 0)

    def test_loads(self):
        self.directory.add(10, 1)
        self.assertEqual(self.directory.loads(2), [2, 3])
        self.directory.remove(10)
        self.assertEqual(self.directory.loads(2), [2, 2])


class TestRegions(unittest.TestCase):
    def setUp(self):
        self.table = RegionTable()
        self.table.declare("hotspots")
        self.delivered = []

    def _publish(self, region: str, step: int) -> int:
        return self.table.publish(region, b"x", step, lambda lp, update: self.delivered.append((lp, update)))

    def test_no_subscribers(self):
        self.assertEqual(self._publish("hotspots", 0), 0)
        self.assertEqual(self.delivered, [])

    def test_only_subscribers_receive(self):
        for lp in (3, 0, 2):
            self.table.subscribe(lp, "hotspots")
        self.assertEqual(self._publish("hotspots", 4), 3)
        self.assertEqual(self.delivered, [(0, b"x"), (2, b"x"), (3, b"x")])
        self.assertEqual(self.table.deliveries, 3)

    def test_late_subscriber_sees_later_publishes_only(self):
        self.table.subscribe(1, "hotspots", step=5)
        self.assertEqual(self._publish("hotspots", 4), 0)
        self.assertEqual(self._publish("hotspots", 5), 1)
        self.assertEqual([lp for lp, _ in self.delivered], [1])

    def test_unknown_region(self):
        with self.assertRaises(RoutingError):
            self._publish("nowhere", 0)
        with self.assertRaises(RoutingError):
            self.table.subscribe(0, "nowhere")


if __name__ == "__main__":
    unittest.main()
