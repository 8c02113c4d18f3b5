"""Tests for melsim.macro: point-queue discharge, grants and vehicle conservation."""

import unittest

from melsim.errors import InvariantError
from melsim.macro import (
    NO_DEST,
    LinkState,
    coarse_step,
    free_flow_steps,
    grant_payload,
    link_step,
    parse_inbox,
    split_grant,
    vehicles_payload,
)
from melsim.roadgraph import ring_graph


def _queue(n: int, ready: int = 0, dest: int = NO_DEST) -> tuple:
    return tuple((vid, dest, ready) for vid in range(n))


class TestLinkStep(unittest.TestCase):
    def setUp(self):
        self.graph = ring_graph(3, capacity_per_step=2)

    def test_capacity_limits_discharge(self):
        state = LinkState(edge_id=0, vehicles=_queue(5), free_flow_steps=1)
        out = link_step(state, self.graph.arcs[0], self.graph, 3, [], {1: 10})
        self.assertEqual(sum(len(v) for v in out.sent.values()), 2)
        self.assertEqual(out.sent[1], [(0, NO_DEST), (1, NO_DEST)])
        self.assertEqual(out.state.count, 3)
        self.assertEqual(out.state.in_transit, 2)

    def test_no_grant_no_discharge(self):
        state = LinkState(edge_id=0, vehicles=_queue(5), free_flow_steps=1)
        out = link_step(state, self.graph.arcs[0], self.graph, 3, [], {})
        self.assertEqual(out.sent, {})
        self.assertEqual(out.state.queued, 5)

    def test_vehicles_wait_free_flow_time(self):
        state = LinkState(edge_id=0, vehicles=_queue(2, ready=6), free_flow_steps=3)
        out = link_step(state, self.graph.arcs[0], self.graph, 5, [], {1: 10})
        self.assertEqual(out.sent, {})
        self.assertEqual(out.state.queued, 0)

    def test_arrivals_join_tail_with_ready_step(self):
        state = LinkState(edge_id=1, free_flow_steps=4)
        out = link_step(state, self.graph.arcs[1], self.graph, 2, [(42, NO_DEST)], {})
        self.assertEqual(out.state.vehicles, ((42, NO_DEST, 6),))

    def test_vehicle_reaching_destination_counts_as_arrived(self):
        # arc 0 runs node 0 -> node 1
        state = LinkState(edge_id=0, vehicles=_queue(1, dest=1), free_flow_steps=1)
        out = link_step(state, self.graph.arcs[0], self.graph, 1, [], {})
        self.assertEqual(out.state.arrived, 1)
        self.assertEqual(out.state.count, 0)

    def test_grant_never_overcommits_cells(self):
        state = LinkState(edge_id=0, vehicles=_queue(4, ready=9), free_flow_steps=1)
        out = link_step(state, self.graph.arcs[0], self.graph, 0, [], {})
        self.assertEqual(out.grants, {2: 10 - 4})
        self.assertEqual(out.state.granted, 6)

    def test_overcommitted_link_raises(self):
        state = LinkState(edge_id=0, vehicles=_queue(8, ready=9), free_flow_steps=1, granted=5)
        with self.assertRaises(InvariantError):
            link_step(state, self.graph.arcs[0], self.graph, 0, [], {})

    def test_source_demand_held_until_space(self):
        state = LinkState(edge_id=0, vehicles=_queue(9, ready=9), free_flow_steps=1)
        out = link_step(state, self.graph.arcs[0], self.graph, 0, [], {}, demand=((100, NO_DEST), (101, NO_DEST)))
        self.assertEqual(out.state.count, 10)
        self.assertEqual(out.state.held, ((101, NO_DEST),))


class TestHelpers(unittest.TestCase):
    def test_split_grant_rotates_remainder(self):
        self.assertEqual(split_grant(5, [3, 7], 0), {3: 3, 7: 2})
        self.assertEqual(split_grant(5, [3, 7], 1), {3: 2, 7: 3})
        self.assertEqual(split_grant(4, [], 0), {})

    def test_free_flow_steps_at_least_one(self):
        self.assertEqual(free_flow_steps(75.0, 15.0, 3.0), 2)
        self.assertEqual(free_flow_steps(10.0, 15.0, 3.0), 1)

    def test_parse_inbox_splits_payloads(self):
        arrivals, grants = parse_inbox([vehicles_payload([(1, 2), (3, NO_DEST)]), grant_payload(4, 6)])
        self.assertEqual(arrivals, [(1, 2), (3, NO_DEST)])
        self.assertEqual(grants, {4: 6})


class TestCoarseStep(unittest.TestCase):
    def test_ring_conserves_vehicles(self):
        graph = ring_graph(4, capacity_per_step=2)
        links = {
            arc.index: LinkState(edge_id=arc.index, vehicles=tuple((arc.index * 10 + k, NO_DEST, 0) for k in range(3)),
                                 free_flow_steps=2)
            for arc in graph.arcs
        }
        inflight = {}
        moved = 0
        for step in range(40):
            links, inflight = coarse_step(links, graph, step, inflight)
            in_flight = sum(len(vehicles) for vehicles, _ in inflight.values())
            moved += in_flight
            self.assertEqual(sum(link.count for link in links.values()) + in_flight, 12)
            for link in links.values():
                self.assertLessEqual(link.count, graph.arcs[link.edge_id].cells)
        self.assertGreater(moved, 0)
        self.assertEqual(sum(link.arrived for link in links.values()), 0)


if __name__ == "__main__":
    unittest.main()
