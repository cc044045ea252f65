#!/usr/bin/env python3
"""Plot a simulate run: sampled paths and their terminal spread.

Reads paths.csv from a `steer simulate` output directory, draws a bundle
of state trajectories per component, and histograms the terminal states.

    python scripts/plot_paths.py out/inertial_s1_sim [--paths 50] [--save fig.png]
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib.pyplot as plt


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path, help="output directory of a steer simulate run")
    ap.add_argument("--paths", type=int, default=50, help="how many paths to draw")
    ap.add_argument("--save", type=Path, help="write the figure here instead of showing it")
    args = ap.parse_args()

    with open(args.run_dir / "paths.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    state_cols = [i for i, name in enumerate(header) if name.startswith("x")]

    by_path = defaultdict(list)
    for row in data:
        by_path[int(row[0])].append([float(v) for v in row[1:]])

    n = len(state_cols)
    fig, axes = plt.subplots(2, n, figsize=(5.5 * n, 7), squeeze=False)
    shown = sorted(by_path)[: args.paths]
    for col, idx in enumerate(state_cols):
        ax = axes[0][col]
        for pid in shown:
            samples = by_path[pid]
            ax.plot([s[0] for s in samples], [s[idx - 1] for s in samples], lw=0.6, alpha=0.6)
        ax.set_xlabel("t")
        ax.set_title(header[idx])

        ax = axes[1][col]
        terminal = [by_path[pid][-1][idx - 1] for pid in by_path]
        ax.hist(terminal, bins=40, density=True)
        ax.set_title(f"{header[idx]} at the horizon ({len(terminal)} paths)")

    fig.tight_layout()
    if args.save:
        fig.savefig(args.save, dpi=150)
        print(f"wrote {args.save}")
    else:
        plt.show()


if __name__ == "__main__":
    main()
