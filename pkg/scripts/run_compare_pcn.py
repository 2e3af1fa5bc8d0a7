"""CPU time per effective sample for RTO against a tuned pCN chain.

Extra arguments are passed to the CLI, e.g. ``--seed 3 --out somewhere``.
"""

import sys
from pathlib import Path

from scalable_rto.cli import main

CONFIG = Path(__file__).parent / "configs" / "compare_pcn.json"

if __name__ == "__main__":
    sys.exit(main(["compare-pcn", "--config", str(CONFIG), "-v", *sys.argv[1:]]))
