"""Rank, acceptance and ESS across truncation thresholds.

Pass ``--config scripts/configs/truncation_elliptic.json`` for the PDE model.
Extra arguments are passed to the CLI, e.g. ``--seed 3 --out somewhere``.
"""

import sys
from pathlib import Path

from scalable_rto.cli import main

CONFIG = Path(__file__).parent / "configs" / "truncation_toy.json"

if __name__ == "__main__":
    sys.exit(main(["truncation-study", "--config", str(CONFIG), "-v", *sys.argv[1:]]))
