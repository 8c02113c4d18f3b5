"""
Tabular outputs of a run: per-step metrics, wall-clock timings, refinement
sessions, migrations and the critical-points ranking.

Every table is a pandas DataFrame with fixed, ordered columns, written as
comma-separated text with a header row and LF line endings. metrics.csv
holds no wall-clock values, so two runs of one configuration produce the
same bytes; timings go to timing.csv.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Iterable

import pandas as pd

from melsim.kernel import RunReport, StepSummary
from melsim.trace import Trace

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
TIMING_FILE = "timing.csv"
SESSIONS_FILE = "sessions.csv"
MIGRATIONS_FILE = "migrations.csv"
DIGEST_FILE = "trace.digest"
TRACE_FILE = "trace.bin"
SCORES_FILE = "scores.csv"
TOP_K_FILE = "critical_points.csv"
SUMMARY_FILE = "summary.csv"
VERIFY_FILE = "verify.csv"

METRICS_COLUMNS = [
    "step",
    "lp_loads",
    "local_msgs",
    "remote_msgs",
    "bytes_remote",
    "active_sessions",
    "total_vehicles",
    "emissions_g",
]
TIMING_COLUMNS = ["step", "wall_ms", "lp_wall_ms"]
SESSION_COLUMNS = [
    "session_id",
    "region",
    "s0",
    "s1",
    "trigger_mode",
    "vehicles_in",
    "vehicles_out",
    "fine_steps",
    "emissions_g",
    "fuel_l",
    "v2v_coverage",
    "v2v_latency",
    "speed_in",
    "speed_out",
    "throughput",
]
MIGRATION_COLUMNS = ["step", "entity", "from_lp", "to_lp", "external_ratio"]
SCORE_COLUMNS = ["rank", "node", "score"]
SUMMARY_COLUMNS = ["metric", "value"]
VERIFY_COLUMNS = ["run", "n_lps", "migration", "status", "digest", "divergence"]


def _by_step(summaries: Iterable[StepSummary]) -> dict[int, list[StepSummary]]:
    grouped: dict[int, list[StepSummary]] = {}
    for summary in summaries:
        grouped.setdefault(summary.step, []).append(summary)
    for rows in grouped.values():
        rows.sort(key=lambda s: s.lp)
    return grouped


def _joined(values: Iterable[Any]) -> str:
    return ";".join(str(v) for v in values)


def metrics_frame(report: RunReport) -> pd.DataFrame:
    """
    One row per executed coarse step.

    emissions_g is cumulative: the accumulators of open sessions plus the
    totals of sessions that already closed.
    """
    closed = sorted((row["s1"], row["emissions_g"]) for row in report.session_rows)
    rows = []
    for step, per_lp in sorted(_by_step(report.summaries).items()):
        totals: dict[str, float] = {}
        for summary in per_lp:
            for key, value in summary.observations.items():
                totals[key] = totals.get(key, 0) + value
        closed_g = sum(grams for s1, grams in closed if s1 <= step)
        rows.append(
            {
                "step": step,
                "lp_loads": _joined(s.resident for s in per_lp),
                "local_msgs": sum(s.local_msgs for s in per_lp),
                "remote_msgs": sum(s.remote_msgs for s in per_lp),
                "bytes_remote": sum(s.bytes_remote for s in per_lp),
                "active_sessions": int(totals.get("sessions", 0)),
                "total_vehicles": int(totals.get("vehicles", 0)),
                "emissions_g": round(totals.get("emissions_g", 0.0) + closed_g, 6),
            }
        )
    return pd.DataFrame(rows, columns=METRICS_COLUMNS)


def timing_frame(report: RunReport) -> pd.DataFrame:
    """Per-step wall clock: slowest LP and every LP's own time."""
    rows = []
    for step, per_lp in sorted(_by_step(report.summaries).items()):
        rows.append(
            {
                "step": step,
                "wall_ms": round(max(s.wall_ms for s in per_lp), 3),
                "lp_wall_ms": _joined(round(s.wall_ms, 3) for s in per_lp),
            }
        )
    return pd.DataFrame(rows, columns=TIMING_COLUMNS)


def sessions_frame(rows: list[dict[str, Any]]) -> pd.DataFrame:
    ordered = sorted(rows, key=lambda r: (r["s1"], r["session_id"]))
    return pd.DataFrame(ordered, columns=SESSION_COLUMNS)


def migrations_frame(rows: list[dict[str, Any]]) -> pd.DataFrame:
    ordered = sorted(rows, key=lambda r: (r["step"], r["entity"]))
    return pd.DataFrame(ordered, columns=MIGRATION_COLUMNS)


def scores_frame(scores: dict[Any, Any], ranking: list[Any]) -> pd.DataFrame:
    """Ranked scores; ranking is the node order from top_k_critical."""
    rows = [{"rank": i + 1, "node": node, "score": float(scores[node])} for i, node in enumerate(ranking)]
    return pd.DataFrame(rows, columns=SCORE_COLUMNS)


def summary_frame(values: dict[str, Any]) -> pd.DataFrame:
    return pd.DataFrame([{"metric": k, "value": v} for k, v in values.items()], columns=SUMMARY_COLUMNS)


def verify_frame(oracle: str, results: Iterable[Any]) -> pd.DataFrame:
    """One row for the sequential oracle, then one per parallel configuration in run order."""
    rows = [{"run": "sequential", "n_lps": 1, "migration": False, "status": "oracle", "digest": oracle, "divergence": ""}]
    for result in results:
        rows.append(
            {
                "run": "parallel",
                "n_lps": result.n_lps,
                "migration": result.migration,
                "status": "match" if result.match else "mismatch",
                "digest": result.digest,
                "divergence": "" if result.divergence is None else str(result.divergence),
            }
        )
    return pd.DataFrame(rows, columns=VERIFY_COLUMNS)


def write_csv(df: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, lineterminator="\n")
    logger.info("Wrote %s (%s rows)", path, len(df))
    return path


def write_run_outputs(trace: Trace, out_dir: str | Path) -> dict[str, Path]:
    """metrics, timing, sessions, migrations, the binary trace and its digest; returns name -> path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report: RunReport = trace.report
    written = {
        METRICS_FILE: write_csv(metrics_frame(report), out_dir / METRICS_FILE),
        TIMING_FILE: write_csv(timing_frame(report), out_dir / TIMING_FILE),
        SESSIONS_FILE: write_csv(sessions_frame(report.session_rows), out_dir / SESSIONS_FILE),
        MIGRATIONS_FILE: write_csv(migrations_frame(report.migration_rows), out_dir / MIGRATIONS_FILE),
        TRACE_FILE: trace.write(out_dir / TRACE_FILE),
    }
    digest_path = out_dir / DIGEST_FILE
    digest_path.write_text(trace.hexdigest() + "\n", encoding="utf-8")
    written[DIGEST_FILE] = digest_path
    return written
