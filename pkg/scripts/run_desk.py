"""Run both shipped desk-scale experiments and print their report tables.

    python scripts/run_desk.py [--out runs] [--workers 2]
"""

import argparse
import sys
from pathlib import Path

from gradosr.cli import main as cli

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    status = 0
    for name in ("desk_identification", "desk_classification"):
        print(f"== {name}")
        status |= cli(["run-all", "--config", str(CONFIGS / f"{name}.yaml"), "--run-dir", str(args.out / name), "--workers", str(args.workers)])
    return status


if __name__ == "__main__":
    sys.exit(main())
