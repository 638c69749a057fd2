#!/usr/bin/env python3
"""Render accuracy-per-epoch curves from an ablation summary.csv (needs matplotlib)."""

import argparse
import csv
from collections import defaultdict
from pathlib import Path


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("summary", type=Path)
    p.add_argument("--out", type=Path, default=Path("alpha_sweep.png"))
    args = p.parse_args()

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = defaultdict(list)
    with open(args.summary, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["accuracy"]:
                curves[float(row["alpha"])].append((int(row["epoch"]), float(row["accuracy"])))
    fig, ax = plt.subplots(figsize=(6, 4))
    for alpha in sorted(curves):
        epochs, acc = zip(*sorted(curves[alpha]))
        ax.plot(epochs, acc, marker="o", label=f"alpha={alpha:g}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("holdout verification accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
