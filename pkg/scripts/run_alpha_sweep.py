#!/usr/bin/env python3
"""Alpha sweep over a synthetic dataset: per-alpha runs plus summary.csv."""

import argparse
import sys
from pathlib import Path

from tmloss.cli import main


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", type=Path, default=Path("runs/sweep"))
    p.add_argument("--alphas", default="0.3,0.4,0.5,0.6")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", type=Path, help="existing dataset root; synthesized under --out when omitted")
    args = p.parse_args(argv)

    data = args.data or args.out / "data"
    if args.data is None and not data.exists():
        rc = main(["synth", "--classes", "10", "--per-class", "200", "--size", "32", "--seed", "7",
                   "--out", str(data)])
        if rc:
            return rc
    return main(["ablate", "--data", str(data), "--out", str(args.out / "ablate"), "--alphas", args.alphas,
                 "--epochs", str(args.epochs), "--seed", str(args.seed), "--eval-pairs", "500"])


if __name__ == "__main__":
    sys.exit(run())
