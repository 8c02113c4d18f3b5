"""Tests for melsim.cli: subcommand output, written files and exit codes."""

import contextlib
import io
import json
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import pandas as pd

from melsim.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_MISMATCH, EXIT_OK, build_parser, main, run_problems
from melsim.experiment import Experiment
from melsim.kernel import RunCounters
from melsim.metrics import (
    DIGEST_FILE,
    METRICS_COLUMNS,
    METRICS_FILE,
    SCORES_FILE,
    SESSIONS_FILE,
    TRACE_FILE,
    VERIFY_COLUMNS,
    VERIFY_FILE,
)
from melsim.trace import Trace

RING = {
    "seed": 3,
    "horizon": 9,
    "n_lps": 2,
    "migration": {"window": 3, "cooldown": 3},
    "scenario": {
        "graph": {"generator": "ring", "nodes": 8},
        "population": {"vehicles": 20},
        "trigger": {"sessions": [{"node": 2, "s0": 3, "s1": 6}]},
    },
    "verify": {"lps": [1, 2]},
}


def _run(argv: list[str]) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


class TestCli(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def _config(self, doc: dict, name: str = "exp.json") -> str:
        path = self.root / name
        path.write_text(json.dumps(doc), encoding="utf-8")
        return str(path)

    def test_simulate_is_reproducible(self):
        config = self._config(RING)
        runs = []
        for name in ("a", "b"):
            out_dir = self.root / name
            code, stdout, _ = _run(["simulate", "--config", config, "--out", str(out_dir)])
            self.assertEqual(code, EXIT_OK)
            digest = (out_dir / DIGEST_FILE).read_text(encoding="utf-8")
            self.assertEqual(stdout, digest)
            self.assertEqual(Trace.read(out_dir / TRACE_FILE).hexdigest(), digest.strip())
            runs.append((digest, (out_dir / METRICS_FILE).read_bytes(), (out_dir / SESSIONS_FILE).read_bytes()))
        self.assertEqual(runs[0], runs[1])
        header = runs[0][1].decode("utf-8").splitlines()[0]
        self.assertEqual(header, ",".join(METRICS_COLUMNS))

    def test_simulate_horizon_zero(self):
        config = self._config({**RING, "horizon": 0, "scenario": {**RING["scenario"], "trigger": {}}})
        code, stdout, _ = _run(["simulate", "--config", config, "--out", str(self.root / "zero")])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(stdout.strip()), 32)
        lines = (self.root / "zero" / METRICS_FILE).read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 1)

    def test_progress_goes_to_stderr(self):
        config = self._config(RING)
        code, stdout, stderr = _run(["simulate", "--config", config, "--out", str(self.root / "p"), "--progress"])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("step 9/9", stderr)
        self.assertNotIn("step", stdout)

    def test_verify_matches(self):
        code, stdout, _ = _run(["verify", "--config", self._config(RING)])
        self.assertEqual(code, EXIT_OK)
        lines = stdout.splitlines()
        self.assertTrue(lines[0].startswith("sequential,"))
        oracle = lines[0].split(",")[1]
        self.assertEqual(
            [line.rsplit(",", 1)[0] for line in lines[1:]],
            ["lps=1 migration=off,match", "lps=2 migration=off,match", "lps=2 migration=on,match"],
        )
        self.assertTrue(all(line.endswith(oracle) for line in lines[1:]))

    def test_verify_reports_injected_fault(self):
        doc = {
            "seed": 9,
            "horizon": 6,
            "partition": "geographic",
            "scenario": {"graph": {"generator": "grid", "rows": 4, "cols": 4}, "population": {"vehicles": 80}},
            "verify": {"fault_step": 1, "fault_lp": 0},
        }
        code, stdout, _ = _run(["verify", "--config", self._config(doc), "--lps", "1"])
        self.assertEqual(code, EXIT_MISMATCH)
        self.assertIn("lps=1 migration=off,mismatch,", stdout)

    def test_verify_out_writes_table(self):
        out_dir = self.root / "ver"
        code, stdout, _ = _run(["verify", "--config", self._config(RING), "--out", str(out_dir)])
        self.assertEqual(code, EXIT_OK)
        table = pd.read_csv(out_dir / VERIFY_FILE)
        self.assertEqual(list(table.columns), VERIFY_COLUMNS)
        self.assertEqual(table["run"].tolist(), ["sequential", "parallel", "parallel", "parallel"])
        self.assertEqual(table["n_lps"].tolist(), [1, 1, 2, 2])
        self.assertEqual(table["status"].tolist(), ["oracle", "match", "match", "match"])
        oracle = stdout.splitlines()[0].split(",")[1]
        self.assertEqual(set(table["digest"]), {oracle})

    def test_verify_without_out_writes_nothing(self):
        config = self._config(RING)
        _run(["verify", "--config", config])
        self.assertEqual(sorted(p.name for p in self.root.iterdir()), ["exp.json"])

    def test_simulate_fails_when_barrier_spread_exceeded(self):
        real_run = Experiment.run

        def run_with_spread(experiment, *args, **kwargs):
            trace = real_run(experiment, *args, **kwargs)
            trace.report.counters.max_step_spread = 2
            return trace

        out_dir = self.root / "spread"
        with mock.patch.object(Experiment, "run", run_with_spread):
            code, stdout, stderr = _run(["simulate", "--config", self._config(RING), "--out", str(out_dir)])
        self.assertEqual(code, EXIT_FAILURE)
        self.assertIn("barrier violated", stderr)
        self.assertEqual(stdout.strip(), (out_dir / DIGEST_FILE).read_text(encoding="utf-8").strip())

    def test_run_problems(self):
        self.assertEqual(run_problems(RunCounters(max_step_spread=1)), [])
        self.assertEqual(len(run_problems(RunCounters(max_step_spread=3))), 1)

    def test_invalid_config_exit_code(self):
        config = self._config({"horizon": 5, "migration": {"theta": 0.3}, "scenario": {"graph": {"generator": "ring", "nodes": 4}}})
        code, stdout, stderr = _run(["simulate", "--config", config])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertEqual(stdout, "")
        self.assertIn("migration.theta", stderr)

    def test_missing_config_file(self):
        code, _, stderr = _run(["analyze", "--config", str(self.root / "absent.json")])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("config error", stderr)

    def test_analyze_prints_ranking(self):
        doc = {"horizon": 1, "scenario": {"graph": {"generator": "ring", "nodes": 5}}, "output": {"top_k": 2}}
        out_dir = self.root / "an"
        code, stdout, _ = _run(["analyze", "--config", self._config(doc), "--out", str(out_dir)])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(stdout.splitlines(), ["1,0,6.0", "2,1,6.0"])
        scores = (out_dir / SCORES_FILE).read_text(encoding="utf-8").splitlines()
        self.assertEqual(scores[0], "rank,node,score")
        self.assertEqual(len(scores), 6)

    def test_lps_argument_validation(self):
        parser = build_parser()
        with contextlib.redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit):
                parser.parse_args(["verify", "--config", "x.json", "--lps", "1,0"])
        self.assertEqual(parser.parse_args(["verify", "--config", "x.json", "--lps", "1,2,4"]).lps, [1, 2, 4])


if __name__ == "__main__":
    unittest.main()
