"""Tests for melsim.roadgraph: native and OSM loading, arc expansion, generators, routing."""

import json
import random
import tempfile
import unittest
from pathlib import Path

import networkx as nx

from melsim.errors import GraphParseError
from melsim.roadgraph import cell_count, grid_graph, haversine_m, load_graph, load_graph_file, ring_graph


def _two_nodes(**edge) -> dict:
    base = {"id": "e1", "from": "a", "to": "b", "length_m": 75.0}
    base.update(edge)
    return {
        "nodes": [{"id": "a", "lat": 45.0, "lon": 9.0}, {"id": "b", "lat": 45.0, "lon": 9.001}],
        "edges": [base],
    }


class TestNativeLoader(unittest.TestCase):
    def test_two_way_edge_gives_two_arcs_of_ten_cells(self):
        graph = load_graph(_two_nodes())
        self.assertEqual(graph.node_count, 2)
        self.assertEqual(graph.arc_count, 2)
        self.assertEqual([a.cells for a in graph.arcs], [10, 10])
        self.assertEqual((graph.arcs[0].src, graph.arcs[0].dst), (0, 1))
        self.assertEqual((graph.arcs[1].src, graph.arcs[1].dst), (1, 0))

    def test_oneway_edge_gives_one_arc(self):
        graph = load_graph(_two_nodes(oneway=True))
        self.assertEqual(graph.arc_count, 1)

    def test_missing_node_rejected(self):
        with self.assertRaises(GraphParseError) as cm:
            load_graph(_two_nodes(to="zz"))
        self.assertIn("zz", str(cm.exception))

    def test_non_positive_length_rejected(self):
        with self.assertRaises(GraphParseError):
            load_graph(_two_nodes(length_m=0))

    def test_duplicate_edge_id_rejected(self):
        doc = _two_nodes()
        doc["edges"].append(dict(doc["edges"][0]))
        with self.assertRaises(GraphParseError):
            load_graph(doc)

    def test_lanes_set_default_capacity(self):
        graph = load_graph(_two_nodes(lanes=2))
        self.assertEqual(graph.arcs[0].capacity_per_step, 4)

    def test_bytes_and_bad_json(self):
        graph = load_graph(json.dumps(_two_nodes()).encode())
        self.assertEqual(graph.arc_count, 2)
        with self.assertRaises(GraphParseError):
            load_graph(b"{not json")

    def test_malformed_numbers_name_the_edge(self):
        for field, value in (("length_m", "long"), ("lanes", "two"), ("maxspeed_mps", "fast")):
            with self.subTest(field=field):
                with self.assertRaises(GraphParseError) as cm:
                    load_graph(_two_nodes(**{field: value}))
                self.assertIn("e1", str(cm.exception))

    def test_unknown_format(self):
        with self.assertRaises(GraphParseError):
            load_graph(_two_nodes(), fmt="shapefile")

    def test_file_error_names_path(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "g.json"
            path.write_text(json.dumps({"nodes": []}), encoding="utf-8")
            with self.assertRaises(GraphParseError) as cm:
                load_graph_file(path)
            self.assertIn("g.json", str(cm.exception))


class TestOsmLoader(unittest.TestCase):
    def _doc(self, tags: dict) -> dict:
        return {
            "elements": [
                {"type": "node", "id": 1, "lat": 45.0, "lon": 9.0},
                {"type": "node", "id": 2, "lat": 45.0, "lon": 9.001},
                {"type": "node", "id": 3, "lat": 45.0, "lon": 9.002},
                {"type": "way", "id": 10, "nodes": [1, 2, 3], "tags": tags},
                {"type": "way", "id": 11, "nodes": [1, 3], "tags": {"building": "yes"}},
            ]
        }

    def test_way_without_junction_is_one_edge(self):
        graph = load_graph(self._doc({"highway": "residential"}), fmt="osm-extract")
        self.assertEqual(graph.node_count, 2)
        self.assertEqual(graph.arc_count, 2)
        expected = haversine_m(45.0, 9.0, 45.0, 9.001) + haversine_m(45.0, 9.001, 45.0, 9.002)
        self.assertAlmostEqual(graph.arcs[0].length_m, expected)

    def test_reverse_oneway_flips_direction(self):
        graph = load_graph(self._doc({"highway": "primary", "oneway": "-1"}), fmt="osm-extract")
        self.assertEqual(graph.arc_count, 1)
        arc = graph.arcs[0]
        self.assertEqual(graph.nodes[arc.src].id, 3)
        self.assertEqual(graph.nodes[arc.dst].id, 1)

    def test_maxspeed_and_lanes_tags(self):
        graph = load_graph(self._doc({"highway": "primary", "maxspeed": "30 mph", "lanes": "2"}), fmt="osm-extract")
        self.assertAlmostEqual(graph.arcs[0].maxspeed_mps, 30 * 1.609344 / 3.6)
        self.assertEqual(graph.arcs[0].lanes, 2)

    def test_missing_node_reference(self):
        doc = self._doc({"highway": "residential"})
        doc["elements"][3]["nodes"] = [1, 2, 99]
        with self.assertRaises(GraphParseError):
            load_graph(doc, fmt="osm-extract")

    def test_malformed_node_names_the_element(self):
        doc = self._doc({"highway": "residential"})
        del doc["elements"][1]["lat"]
        with self.assertRaises(GraphParseError) as cm:
            load_graph(doc, fmt="osm-extract")
        self.assertIn("'lat'", str(cm.exception))
        doc["elements"][1]["lat"] = "north"
        with self.assertRaises(GraphParseError) as cm:
            load_graph(doc, fmt="osm-extract")
        self.assertIn("node element 2", str(cm.exception))

    def test_way_without_id_rejected(self):
        doc = self._doc({"highway": "residential"})
        del doc["elements"][3]["id"]
        with self.assertRaises(GraphParseError):
            load_graph(doc, fmt="osm-extract")

    def test_sample_extract_loads(self):
        path = Path(__file__).resolve().parent.parent / "configs" / "graphs" / "osm_sample.json"
        graph = load_graph_file(path, fmt="osm-extract")
        self.assertGreater(graph.arc_count, 0)
        self.assertTrue(all(a.cells >= 1 for a in graph.arcs))


class TestGenerators(unittest.TestCase):
    def test_ring_is_oneway_cycle(self):
        graph = ring_graph(4)
        self.assertEqual(graph.arc_count, 4)
        self.assertEqual([graph.arcs[i].dst for i in range(4)], [1, 2, 3, 0])
        self.assertEqual(graph.arcs[0].cells, 10)

    def test_grid_two_way_arc_count(self):
        graph = grid_graph(2, 3)
        self.assertEqual(graph.node_count, 6)
        self.assertEqual(graph.arc_count, 14)
        self.assertEqual(graph.arcs[0].cells, 20)

    def test_ring_needs_two_nodes(self):
        with self.assertRaises(GraphParseError):
            ring_graph(1)


class TestRouting(unittest.TestCase):
    def test_next_arc_and_route_on_ring(self):
        graph = ring_graph(5)
        self.assertEqual(graph.next_arc(0, 2), 0)
        self.assertEqual(graph.route_nodes(0, 3), (1, 2, 3))
        self.assertIsNone(graph.next_arc(2, 2))

    def test_unreachable(self):
        graph = load_graph(_two_nodes(oneway=True))
        self.assertFalse(graph.reachable(1, 0))
        self.assertEqual(graph.route_nodes(1, 0), ())

    def test_grid_shortest_route_length(self):
        graph = grid_graph(3, 3)
        self.assertEqual(len(graph.route_nodes(0, 8)), 4)

    def test_equal_length_routes_take_lower_arc_index(self):
        # a square a-b-d / a-c-d with both sides 100 m
        nodes = [{"id": n, "lat": 45.0, "lon": 9.0 + i * 0.001} for i, n in enumerate("abcd")]
        edges = [
            {"id": "ac", "from": "a", "to": "c", "length_m": 100.0, "oneway": True},
            {"id": "ab", "from": "a", "to": "b", "length_m": 100.0, "oneway": True},
            {"id": "bd", "from": "b", "to": "d", "length_m": 100.0, "oneway": True},
            {"id": "cd", "from": "c", "to": "d", "length_m": 100.0, "oneway": True},
        ]
        graph = load_graph({"nodes": nodes, "edges": edges})
        self.assertEqual(graph.next_arc(0, 3), 0)
        self.assertEqual(graph.route_nodes(0, 3), (2, 3))

    def test_route_lengths_match_networkx_dijkstra(self):
        rng = random.Random(11)
        nodes = [{"id": i, "lat": 45.0, "lon": 9.0 + i * 0.001} for i in range(15)]
        edges = [
            {"id": f"e{k}", "from": rng.randrange(15), "to": rng.randrange(15),
             "length_m": float(rng.randrange(10, 200)), "oneway": rng.random() < 0.5}
            for k in range(40)
        ]
        graph = load_graph({"nodes": nodes, "edges": edges})
        reference = nx.MultiDiGraph()
        reference.add_nodes_from(range(graph.node_count))
        for arc in graph.arcs:
            reference.add_edge(arc.src, arc.dst, length_m=arc.length_m)
        for src in range(graph.node_count):
            expected = nx.single_source_dijkstra_path_length(reference, src, weight="length_m")
            for dest in range(graph.node_count):
                with self.subTest(src=src, dest=dest):
                    self.assertEqual(graph.reachable(src, dest), dest in expected)
                    if src == dest or dest not in expected:
                        continue
                    length, current = 0.0, src
                    while current != dest:
                        arc = graph.arcs[graph.next_arc(current, dest)]
                        length += arc.length_m
                        current = arc.dst
                    self.assertAlmostEqual(length, expected[dest])

    def test_upstream_and_downstream(self):
        graph = ring_graph(4)
        self.assertEqual(graph.upstream(1), [0])
        self.assertEqual(graph.downstream(1), [2])


class TestCellCount(unittest.TestCase):
    def test_rounding_and_minimum(self):
        self.assertEqual(cell_count(75.0), 10)
        self.assertEqual(cell_count(11.25), 2)
        self.assertEqual(cell_count(1.0), 1)


if __name__ == "__main__":
    unittest.main()
