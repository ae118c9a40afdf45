"""Per-seed view of an ablation run directory.

Usage: python scripts/ablation_variance.py RUN_DIR

Reads ablation_runs.csv written by ``ovseg ablate`` and prints novel mIoU and
similarity diagonal per seed, plus each seed's gain of the full variant over
the baseline.
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path


def main(run_dir):
    with open(Path(run_dir) / "ablation_runs.csv", newline="", encoding="utf-8") as fh:
        runs = list(csv.DictReader(fh))
    by_seed = defaultdict(dict)
    variants = []
    for r in runs:
        by_seed[r["seed"]][r["variant"]] = (100 * float(r["novel_miou"]), float(r["sim_diag"]))
        if r["variant"] not in variants:
            variants.append(r["variant"])
    print("seed  " + "  ".join(f"{v:>24s}" for v in variants) + "   gain(novel, diag)")
    for seed, per in sorted(by_seed.items()):
        cells = "  ".join(f"{per[v][0]:>14.2f} / {per[v][1]:.3f}" for v in variants)
        gain = (per[variants[-1]][0] - per[variants[0]][0], per[variants[-1]][1] - per[variants[0]][1])
        print(f"{seed:>4s}  {cells}   {gain[0]:+.2f}, {gain[1]:+.3f}")


if __name__ == "__main__":
    main(sys.argv[1])
