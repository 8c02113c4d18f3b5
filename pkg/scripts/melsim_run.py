#!/usr/bin/env python3
"""
Run melsim from a checkout without installing the package.

Same subcommands and flags as the `melsim` console script. Run from project root:
  uv run python scripts/melsim_run.py analyze --config configs/demo_ring.json
  uv run python scripts/melsim_run.py simulate --config configs/demo_ring.json --out out/demo --progress
  uv run python scripts/melsim_run.py verify --config configs/acceptance_ring.json --lps 1,2,4,8
"""

import sys
from pathlib import Path

# Project root
_root = Path(__file__).resolve().parent.parent
if str(_root) not in sys.path:
    sys.path.insert(0, str(_root))

from melsim.cli import main


if __name__ == "__main__":
    sys.exit(main())
