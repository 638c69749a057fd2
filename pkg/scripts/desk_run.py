#!/usr/bin/env python3
"""Synthesize the 10x200 32px dataset, train Transformer-ArcFace at alpha 0.4, then evaluate."""

import argparse
import sys
from pathlib import Path

from tmloss.cli import main


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", type=Path, default=Path("runs/desk"))
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=7)
    p.add_argument("--combine-mode", default="weighted", choices=["weighted", "summed_logits", "metric_only"])
    args = p.parse_args(argv)

    data = args.out / "data"
    if not data.exists():
        rc = main(["synth", "--classes", "10", "--per-class", "200", "--size", "32",
                   "--seed", str(args.data_seed), "--out", str(data)])
        if rc:
            return rc
    run_dir = args.out / f"train_{args.combine_mode}"
    rc = main(["train", "--data", str(data), "--out", str(run_dir), "--loss", "arcface", "--alpha", "0.4",
               "--combine-mode", args.combine_mode, "--epochs", str(args.epochs), "--seed", str(args.seed),
               "--eval-pairs", "500"])
    if rc:
        return rc
    return main(["eval", "--checkpoint", str(run_dir / "checkpoints" / "final.ckpt"), "--data", str(data),
                 "--pairs", str(run_dir / "pairs.txt"), "--out", str(run_dir / "eval")])


if __name__ == "__main__":
    sys.exit(run())
