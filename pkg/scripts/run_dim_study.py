"""Acceptance, ESS and cost per proposal across mesh sizes.

Extra arguments are passed to the CLI, e.g. ``--seed 3 --out somewhere``.
"""

import sys
from pathlib import Path

from scalable_rto.cli import main

CONFIG = Path(__file__).parent / "configs" / "dim_study.json"

if __name__ == "__main__":
    sys.exit(main(["dim-study", "--config", str(CONFIG), "-v", *sys.argv[1:]]))
