#!/usr/bin/env python3
"""Run the repair experiment harness from a source checkout.

Example:
    python3 scripts/run_experiment.py --preset mlp-blobs --seed 42 --out runs/blobs42
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from qrepair.cli import cli_main

if __name__ == "__main__":
    sys.exit(cli_main(["experiment"] + sys.argv[1:]))
