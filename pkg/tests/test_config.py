"""Tests for melsim.config: defaults, collected validation issues, relative paths and demand CSVs."""

import json
import tempfile
import unittest
from fractions import Fraction
from pathlib import Path

from melsim.config import DEFAULT_VERIFY_LPS, MigrationConfig, load_config, parse_config
from melsim.errors import ConfigError


def _doc(**overrides) -> dict:
    doc = {"horizon": 10, "scenario": {"graph": {"generator": "ring", "nodes": 4}}}
    doc.update(overrides)
    return doc


def _paths(exc: ConfigError) -> list[str]:
    return [issue.path for issue in exc.issues]


class TestDefaults(unittest.TestCase):
    def test_minimal_document(self):
        config = parse_config(_doc())
        self.assertEqual(config.horizon, 10)
        self.assertEqual(config.seed, 0)
        self.assertEqual(config.n_lps, 1)
        self.assertEqual(config.partition, "round-robin")
        self.assertIsNone(config.migration)
        self.assertEqual([lv.step_size for lv in config.levels], [Fraction(3), Fraction(1), Fraction(1)])
        self.assertEqual(config.ratio, 3)
        self.assertEqual(config.coarse_step_s, 3.0)
        self.assertEqual(config.verify.lps, DEFAULT_VERIFY_LPS)
        self.assertEqual(config.scenario.graph.length_m, 75.0)
        self.assertTrue(config.scenario.graph.oneway)
        self.assertEqual(config.scenario.trigger.sessions, ())

    def test_grid_defaults_two_way_150m(self):
        config = parse_config(_doc(scenario={"graph": {"generator": "grid", "rows": 2, "cols": 2}}))
        self.assertEqual(config.scenario.graph.length_m, 150.0)
        self.assertFalse(config.scenario.graph.oneway)

    def test_migration_block(self):
        self.assertEqual(parse_config(_doc(migration={})).migration, MigrationConfig())
        self.assertIsNone(parse_config(_doc(migration={"enabled": False})).migration)
        self.assertEqual(parse_config(_doc(migration={"theta": 0.75})).migration.params().theta, 0.75)

    def test_single_level_has_ratio_one(self):
        config = parse_config(_doc(levels=[{"step_size": 2}]))
        self.assertEqual(config.ratio, 1)

    def test_json_text_accepted(self):
        self.assertEqual(parse_config(json.dumps(_doc())).horizon, 10)


class TestValidation(unittest.TestCase):
    def assertIssue(self, doc, path):
        with self.assertRaises(ConfigError) as cm:
            parse_config(doc)
        self.assertIn(path, _paths(cm.exception))
        return cm.exception

    def test_non_integer_level_ratio(self):
        exc = self.assertIssue(_doc(levels=[{"step_size": 3}, {"step_size": 2}]), "levels[1].step_size")
        self.assertIn("integer ratio", str(exc))

    def test_theta_not_a_strict_majority(self):
        exc = self.assertIssue(_doc(migration={"theta": 0.4}), "migration.theta")
        self.assertIn("0.5 < theta <= 1", str(exc))

    def test_unknown_keys_at_every_level(self):
        self.assertIssue(_doc(sede=1), "sede")
        self.assertIssue(_doc(scenario={"graph": {"generator": "ring", "nodes": 4, "nodez": 3}}), "scenario.graph.nodez")

    def test_session_beyond_horizon(self):
        scenario = {"graph": {"generator": "ring", "nodes": 4}, "trigger": {"sessions": [{"s0": 2, "s1": 11, "node": 1}]}}
        self.assertIssue(_doc(scenario=scenario), "scenario.trigger.sessions[0].s1")

    def test_session_needs_node_or_arcs(self):
        scenario = {"graph": {"generator": "ring", "nodes": 4}, "trigger": {"sessions": [{"s0": 2, "s1": 5}]}}
        self.assertIssue(_doc(scenario=scenario), "scenario.trigger.sessions[0]")

    def test_missing_horizon_and_scenario(self):
        with self.assertRaises(ConfigError) as cm:
            parse_config({})
        self.assertIn("horizon", _paths(cm.exception))
        self.assertIn("scenario", _paths(cm.exception))

    def test_every_issue_collected(self):
        with self.assertRaises(ConfigError) as cm:
            parse_config(_doc(n_lps=0, partition="spiral", jitter_ms=-1))
        self.assertEqual(sorted(_paths(cm.exception)), ["jitter_ms", "n_lps", "partition"])

    def test_boolean_is_not_an_integer(self):
        self.assertIssue(_doc(horizon=True), "horizon")

    def test_negative_emission_rate(self):
        scenario = {"graph": {"generator": "ring", "nodes": 4}, "emissions": {"coeffs": [-1.0, 0.0, 0.0, 0.0]}}
        self.assertIssue(_doc(scenario=scenario), "scenario.emissions.coeffs")

    def test_graph_needs_exactly_one_source(self):
        self.assertIssue(_doc(scenario={"graph": {}}), "scenario.graph")

    def test_invalid_json(self):
        self.assertIssue("{", "<root>")


class TestFiles(unittest.TestCase):
    def _write(self, root: Path, config: dict, demand: str | None = None) -> Path:
        (root / "graphs").mkdir()
        graph = {
            "nodes": [{"id": n, "lat": 45.0, "lon": 9.0 + n * 0.001} for n in (1, 2, 3)],
            "edges": [{"id": "a", "from": 1, "to": 2, "length_m": 75}, {"id": "b", "from": 2, "to": 3, "length_m": 75}],
        }
        (root / "graphs" / "g.json").write_text(json.dumps(graph), encoding="utf-8")
        if demand is not None:
            (root / "demand.csv").write_text(demand, encoding="utf-8")
        path = root / "exp.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        return path

    def test_relative_paths_resolve_against_config_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            doc = {"horizon": 5, "scenario": {"graph": {"path": "graphs/g.json"}, "demand": "demand.csv"}}
            config = load_config(self._write(root, doc, "step,origin,dest,count\n0,1,3,4\n2,2,,1\n"))
            self.assertEqual(config.scenario.graph.path, root.resolve() / "graphs" / "g.json")
            self.assertEqual(len(config.scenario.demand), 2)
            first, second = config.scenario.demand
            self.assertEqual((first.step, first.origin, first.dest, first.count), (0, 1, 3, 4))
            self.assertIsNone(second.dest)
            self.assertEqual(config.source.name, "exp.json")

    def test_demand_csv_with_wrong_header(self):
        with tempfile.TemporaryDirectory() as tmp:
            doc = {"horizon": 5, "scenario": {"graph": {"path": "graphs/g.json"}, "demand": "demand.csv"}}
            path = self._write(Path(tmp), doc, "when,from,count\n0,1,4\n")
            with self.assertRaises(ConfigError) as cm:
                load_config(path)
            self.assertIn("scenario.demand", _paths(cm.exception))

    def test_bad_demand_value_names_row(self):
        with tempfile.TemporaryDirectory() as tmp:
            doc = {"horizon": 5, "scenario": {"graph": {"path": "graphs/g.json"}, "demand": "demand.csv"}}
            path = self._write(Path(tmp), doc, "step,origin,dest,count\n0,1,3,4\n1,1,3,many\n")
            with self.assertRaises(ConfigError) as cm:
                load_config(path)
            self.assertIn("scenario.demand[1].count", _paths(cm.exception))

    def test_missing_graph_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "exp.json"
            path.write_text(json.dumps({"horizon": 5, "scenario": {"graph": {"path": "nope.json"}}}), encoding="utf-8")
            with self.assertRaises(ConfigError) as cm:
                load_config(path)
            self.assertIn("scenario.graph.path", _paths(cm.exception))

    def test_missing_config_file(self):
        with self.assertRaises(ConfigError) as cm:
            load_config(Path(tempfile.gettempdir()) / "melsim-no-such-config.json")
        self.assertEqual(_paths(cm.exception), ["<file>"])

    def test_shipped_configs_are_valid(self):
        configs = Path(__file__).resolve().parent.parent / "configs"
        for path in sorted(configs.glob("*.json")):
            with self.subTest(config=path.name):
                self.assertGreater(load_config(path).horizon, 0)


if __name__ == "__main__":
    unittest.main()
