"""Acceptance, ESS and optimizer iterations across noise levels.

Extra arguments are passed to the CLI, e.g. ``--seed 3 --out somewhere``.
"""

import sys
from pathlib import Path

from scalable_rto.cli import main

CONFIG = Path(__file__).parent / "configs" / "noise_study.json"

if __name__ == "__main__":
    sys.exit(main(["noise-study", "--config", str(CONFIG), "-v", *sys.argv[1:]]))
