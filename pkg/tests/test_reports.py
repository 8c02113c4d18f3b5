"""Tests for melsim.metrics and melsim.reports: per-step tables and reading run directories back."""

import os
import tempfile
import unittest
from pathlib import Path

from melsim.kernel import RunCounters, RunReport, StepSummary
from melsim.metrics import (
    DIGEST_FILE,
    METRICS_FILE,
    SCORES_FILE,
    metrics_frame,
    migrations_frame,
    sessions_frame,
    timing_frame,
    write_csv,
)
from melsim.reports import find_runs, load_table, read_digest, run_overview


def _summary(step: int, lp: int, *, local: int = 0, remote: int = 0, wall: float = 1.0, **obs) -> StepSummary:
    return StepSummary(
        step=step,
        lp=lp,
        resident=10 + lp,
        stepped=10 + lp,
        local_msgs=local,
        remote_msgs=remote,
        bytes_remote=remote * 20,
        observations=obs,
        wall_ms=wall,
    )


def _report() -> RunReport:
    summaries = [
        _summary(0, 1, local=4, remote=1, wall=2.5, vehicles=5),
        _summary(0, 0, local=2, remote=3, wall=1.0, vehicles=7),
        _summary(1, 0, local=5, remote=0, vehicles=6, sessions=1, emissions_g=1.5),
        _summary(1, 1, local=1, remote=2, vehicles=6),
        _summary(2, 0, vehicles=12),
        _summary(2, 1),
    ]
    sessions = [{"session_id": 0, "region": "1;2", "s0": 1, "s1": 2, "emissions_g": 2.0}]
    migrations = [{"step": 2, "entity": 9, "from_lp": 1, "to_lp": 0, "external_ratio": 0.8},
                  {"step": 1, "entity": 4, "from_lp": 0, "to_lp": 1, "external_ratio": 0.7}]
    return RunReport(summaries, sessions, migrations, RunCounters(), n_lps=2, wall_seconds=0.1)


class TestMetricsFrames(unittest.TestCase):
    def test_one_row_per_step_in_lp_order(self):
        df = metrics_frame(_report())
        self.assertEqual(df["step"].tolist(), [0, 1, 2])
        self.assertEqual(df["lp_loads"].tolist(), ["10;11"] * 3)
        self.assertEqual(df["local_msgs"].tolist(), [6, 6, 0])
        self.assertEqual(df["remote_msgs"].tolist(), [4, 2, 0])
        self.assertEqual(df["bytes_remote"].tolist(), [80, 40, 0])
        self.assertEqual(df["total_vehicles"].tolist(), [12, 12, 12])
        self.assertEqual(df["active_sessions"].tolist(), [0, 1, 0])

    def test_emissions_are_cumulative_over_closed_sessions(self):
        df = metrics_frame(_report())
        self.assertEqual(df["emissions_g"].tolist(), [0.0, 1.5, 2.0])

    def test_timing_uses_slowest_lp(self):
        df = timing_frame(_report())
        self.assertEqual(df["wall_ms"].tolist()[0], 2.5)
        self.assertEqual(df["lp_wall_ms"].tolist()[0], "1.0;2.5")

    def test_event_tables_sorted(self):
        self.assertEqual(migrations_frame(_report().migration_rows)["entity"].tolist(), [4, 9])
        self.assertEqual(len(sessions_frame([]).columns), len(sessions_frame(_report().session_rows).columns))


class TestReports(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def _write_run(self, name: str) -> Path:
        run = self.root / name
        report = _report()
        write_csv(metrics_frame(report), run / METRICS_FILE)
        write_csv(timing_frame(report), run / "timing.csv")
        write_csv(sessions_frame(report.session_rows), run / "sessions.csv")
        write_csv(migrations_frame(report.migration_rows), run / "migrations.csv")
        (run / DIGEST_FILE).write_text("ab" * 16 + "\n", encoding="utf-8")
        return run

    def test_find_runs_newest_first_by_kind(self):
        old = self._write_run("old")
        new = self._write_run("nested/new")
        os.utime(old / METRICS_FILE, (1_000_000, 1_000_000))
        self.assertEqual(find_runs(self.root), [new, old])
        self.assertEqual(find_runs(self.root, "analyze"), [])
        write_csv(metrics_frame(_report()).head(0), self.root / "scores" / SCORES_FILE)
        self.assertEqual(find_runs(self.root, "analyze"), [self.root / "scores"])
        self.assertEqual(find_runs(self.root / "missing"), [])

    def test_load_table(self):
        run = self._write_run("r")
        self.assertEqual(len(load_table(run, METRICS_FILE)), 3)
        self.assertIsNone(load_table(run, "nope.csv"))
        (run / "empty.csv").write_text("", encoding="utf-8")
        self.assertTrue(load_table(run, "empty.csv").empty)

    def test_run_overview(self):
        overview = run_overview(self._write_run("r"))
        self.assertEqual(overview["steps"], 3)
        self.assertEqual(overview["sessions"], 1)
        self.assertEqual(overview["migrations"], 2)
        self.assertEqual(overview["digest"], "ab" * 16)
        self.assertEqual(overview["final_vehicles"], 12)
        self.assertAlmostEqual(overview["emissions_g"], 2.0)
        self.assertAlmostEqual(overview["remote_ratio"], 6 / 18)
        self.assertAlmostEqual(overview["wall_s"], (2.5 + 1.0 + 1.0) / 1000.0)

    def test_overview_of_empty_directory(self):
        overview = run_overview(self.root)
        self.assertEqual(overview["steps"], 0)
        self.assertIsNone(read_digest(self.root))
        self.assertNotIn("final_vehicles", overview)


if __name__ == "__main__":
    unittest.main()
