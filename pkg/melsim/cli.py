"""
Command-line front end: analyze | simulate | verify.

  melsim analyze  --config configs/demo_ring.json --out out/analyze
  melsim simulate --config configs/demo_ring.json --out out/demo --progress
  melsim verify   --config configs/demo_ring.json --lps 1,2,4

Standard output carries only machine-readable results; logs (MELSIM_LOG =
error | info | debug) and --progress lines go to standard error.
Exit codes: 0 success, 1 run failure, 2 invalid configuration, 3 verify
mismatch.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable

from melsim.centrality import top_k_critical
from melsim.config import Config, load_config
from melsim.errors import ConfigError, LevelConfigError, MelsimError
from melsim.experiment import analyze, prepare, verify
from melsim.kernel import RunCounters
from melsim.metrics import (
    SCORES_FILE,
    SUMMARY_FILE,
    TOP_K_FILE,
    VERIFY_FILE,
    scores_frame,
    summary_frame,
    verify_frame,
    write_csv,
    write_run_outputs,
)

logger = logging.getLogger(__name__)

LOG_ENV = "MELSIM_LOG"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISMATCH = 3

# --progress prints at most one line per this many steps (plus the last one)
PROGRESS_EVERY = 10

# EOS barrier: no LP may run more than one step ahead of another
MAX_STEP_SPREAD = 1


def configure_logging() -> bool:
    """Root logger on stderr at the MELSIM_LOG level; returns True when debugging."""
    name = os.environ.get(LOG_ENV, "error").strip().lower()
    level = LOG_LEVELS.get(name, logging.ERROR)
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return level == logging.DEBUG


def progress_printer(stream=None) -> Callable[[int, int], None]:
    stream = stream or sys.stderr
    started = time.perf_counter()

    def report(done: int, horizon: int) -> None:
        if done % PROGRESS_EVERY and done != horizon:
            return
        elapsed = time.perf_counter() - started
        rate = done / elapsed if elapsed > 0 else 0.0
        print(f"step {done}/{horizon} ({rate:.1f} steps/s)", file=stream, flush=True)

    return report


def _out_dir(config: Config, override: Path | None) -> Path:
    return override if override is not None else config.output.dir


def cmd_analyze(config: Config, out: Path | None = None) -> int:
    """Betweenness scores, top-k critical points and graph summary as CSV."""
    out_dir = _out_dir(config, out)
    scores, ranking, summary = analyze(config)
    write_csv(scores_frame(scores, top_k_critical(scores, None)), out_dir / SCORES_FILE)
    write_csv(scores_frame(scores, ranking), out_dir / TOP_K_FILE)
    write_csv(summary_frame(summary), out_dir / SUMMARY_FILE)
    for rank, node in enumerate(ranking, start=1):
        print(f"{rank},{node},{float(scores[node])!r}")
    return EXIT_OK


def cmd_simulate(config: Config, out: Path | None = None, progress: bool = False) -> int:
    """Full run on config.n_lps LPs; writes metrics, sessions, migrations and the trace digest."""
    experiment = prepare(config)
    migration = config.migration.params() if config.migration is not None else None
    trace = experiment.run(migration=migration, progress=progress_printer() if progress else None)
    written = write_run_outputs(trace, _out_dir(config, out))
    counters = trace.report.counters
    logger.info(
        "Simulated %s steps on %s LPs in %.2f s (%s messages, max step spread %s)",
        config.horizon, config.n_lps, trace.report.wall_seconds, counters.sent, counters.max_step_spread,
    )
    for name, path in sorted(written.items()):
        logger.info("Output %s -> %s", name, path)
    print(trace.hexdigest())
    problems = run_problems(counters)
    for problem in problems:
        print(f"error: {problem}", file=sys.stderr)
    return EXIT_FAILURE if problems else EXIT_OK


def run_problems(counters: RunCounters) -> list[str]:
    """Run-level invariants a finished run can still break."""
    problems = []
    if counters.max_step_spread > MAX_STEP_SPREAD:
        problems.append(f"barrier violated: LPs were up to {counters.max_step_spread} steps apart (max {MAX_STEP_SPREAD})")
    return problems


def cmd_verify(
    config: Config,
    lp_counts: list[int] | None = None,
    progress: bool = False,
    out: Path | None = None,
) -> int:
    """Sequential oracle against each parallel configuration; exit 3 on any mismatch. With out, also writes verify.csv."""
    experiment = prepare(config)
    lp_counts = lp_counts or list(config.verify.lps)
    oracle, results = verify(experiment, lp_counts, progress=progress_printer() if progress else None)
    print(f"sequential,{oracle}")
    status = EXIT_OK
    for result in results:
        label = f"lps={result.n_lps} migration={'on' if result.migration else 'off'}"
        if result.match:
            print(f"{label},match,{result.digest}")
        else:
            print(f"{label},mismatch,{result.divergence}")
            status = EXIT_MISMATCH
    if out is not None:
        write_csv(verify_frame(oracle, results), out / VERIFY_FILE)
    return status


def _lp_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("LP counts must be integers >= 1")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="melsim",
        description="Multi-level parallel time-stepped simulation of road traffic.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("analyze", "Rank critical intersections by betweenness."),
        ("simulate", "Run the configured scenario and write metrics."),
        ("verify", "Compare parallel runs against the sequential oracle."),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", type=Path, required=True, metavar="PATH", help="Experiment JSON file.")
        if name == "verify":
            cmd.add_argument("--out", type=Path, default=None, metavar="DIR", help="Also write verify.csv into this directory.")
            cmd.add_argument("--lps", type=_lp_list, default=None, metavar="LIST", help="LP counts, e.g. 1,2,4,8.")
        else:
            cmd.add_argument("--out", type=Path, default=None, metavar="DIR", help="Output directory (default: config output.dir).")
        if name != "analyze":
            cmd.add_argument("--progress", action="store_true", help="Print step/second lines to stderr.")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    debug = configure_logging()
    try:
        config = load_config(args.config)
        if args.command == "analyze":
            return cmd_analyze(config, args.out)
        if args.command == "simulate":
            return cmd_simulate(config, args.out, args.progress)
        return cmd_verify(config, args.lps, args.progress, args.out)
    except (ConfigError, LevelConfigError) as exc:
        if debug:
            logger.exception("Invalid configuration")
        issues = getattr(exc, "issues", None) or [exc]
        for issue in issues:
            print(f"config error: {issue}", file=sys.stderr)
        return EXIT_CONFIG
    except MelsimError as exc:
        if debug:
            logger.exception("Run failed")
        print(f"error: {exc.diagnostic()}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
