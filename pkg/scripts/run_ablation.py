#!/usr/bin/env python3
"""Generate a cohort and run the 8-cell SE/SPP ablation on it (writes table2.csv).

    python scripts/run_ablation.py --out runs/ablation
    python scripts/run_ablation.py --config scripts/configs/learnability.ini --out runs/learn
"""

import argparse
import sys
from pathlib import Path

from sespp.cli import main

HERE = Path(__file__).resolve().parent


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(HERE / "configs" / "learnability.ini"))
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    out = Path(args.out)
    common = ["--config", args.config, "--seed", str(args.seed)]
    rc = main(["gen-data", *common, "--out", str(out / "cohort")])
    if rc:
        return rc
    rc = main(["ablate", *common, "--cohort", str(out / "cohort"), "--out", str(out)])
    if (out / "table2.csv").exists():
        print((out / "table2.csv").read_text(), end="")
    return rc


if __name__ == "__main__":
    sys.exit(run())
