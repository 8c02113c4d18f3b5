"""
Loading helpers for the report viewer: find output directories written by
`analyze` / `simulate` and read their CSV tables back into DataFrames.
"""

from __future__ import annotations

import logging
from pathlib import Path

import pandas as pd

from melsim.metrics import (
    DIGEST_FILE,
    METRICS_FILE,
    MIGRATIONS_FILE,
    SCORES_FILE,
    SESSIONS_FILE,
    SUMMARY_FILE,
    TIMING_FILE,
    TOP_K_FILE,
)

logger = logging.getLogger(__name__)

SIMULATE_FILES = (METRICS_FILE, TIMING_FILE, SESSIONS_FILE, MIGRATIONS_FILE)
ANALYZE_FILES = (SCORES_FILE, TOP_K_FILE, SUMMARY_FILE)


def _has_any(path: Path, names: tuple[str, ...]) -> bool:
    return any((path / name).is_file() for name in names)


def find_runs(base: str | Path, kind: str = "simulate") -> list[Path]:
    """Output directories under base (base included) holding `kind` results, newest first."""
    base = Path(base)
    if not base.is_dir():
        return []
    names = SIMULATE_FILES if kind == "simulate" else ANALYZE_FILES
    candidates = [base, *sorted(p for p in base.rglob("*") if p.is_dir())]
    runs = [p for p in candidates if _has_any(p, names)]
    runs.sort(key=lambda p: (-max((p / n).stat().st_mtime for n in names if (p / n).is_file()), str(p)))
    return runs


def load_table(run_dir: str | Path, name: str) -> pd.DataFrame | None:
    """A CSV of the run as a DataFrame; None when missing or unreadable, empty frame for header-only files."""
    path = Path(run_dir) / name
    if not path.is_file():
        return None
    try:
        return pd.read_csv(path)
    except pd.errors.EmptyDataError:
        return pd.DataFrame()
    except (OSError, pd.errors.ParserError) as exc:
        logger.warning("Could not read %s: %s", path, exc)
        return None


def read_digest(run_dir: str | Path) -> str | None:
    path = Path(run_dir) / DIGEST_FILE
    if not path.is_file():
        return None
    return path.read_text(encoding="utf-8").strip()


def run_overview(run_dir: str | Path) -> dict[str, object]:
    """Headline numbers of a simulate run for the viewer's summary row."""
    metrics = load_table(run_dir, METRICS_FILE)
    sessions = load_table(run_dir, SESSIONS_FILE)
    migrations = load_table(run_dir, MIGRATIONS_FILE)
    timing = load_table(run_dir, TIMING_FILE)
    steps = 0 if metrics is None else len(metrics)
    overview: dict[str, object] = {
        "steps": steps,
        "sessions": 0 if sessions is None else len(sessions),
        "migrations": 0 if migrations is None else len(migrations),
        "digest": read_digest(run_dir),
    }
    if metrics is not None and steps:
        last = metrics.iloc[-1]
        overview["final_vehicles"] = int(last["total_vehicles"])
        overview["emissions_g"] = float(last["emissions_g"])
        remote = metrics["remote_msgs"].sum()
        total = remote + metrics["local_msgs"].sum()
        overview["remote_ratio"] = float(remote / total) if total else 0.0
    if timing is not None and len(timing):
        overview["wall_s"] = float(timing["wall_ms"].sum()) / 1000.0
    return overview
