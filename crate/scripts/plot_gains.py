#!/usr/bin/env python3
"""Plot a solver run: gain schedule and covariance path.

Reads gains.csv and covariance.csv from a `steer` output directory and
draws the gain entries over time next to the covariance entries (with the
trace overlaid). Purely a viewer — all numbers come from the run.

    python scripts/plot_gains.py out/inertial_s1 [--save fig.png]
"""

import argparse
import csv
import math
from pathlib import Path

import matplotlib.pyplot as plt


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    cols = {name: [float(r[i]) for r in data] for i, name in enumerate(header)}
    return header, cols


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path, help="output directory of a steer run")
    ap.add_argument("--save", type=Path, help="write the figure here instead of showing it")
    args = ap.parse_args()

    fig, (ax_k, ax_s) = plt.subplots(1, 2, figsize=(11, 4))

    header, gains = read_table(args.run_dir / "gains.csv")
    for name in header[1:]:
        ax_k.plot(gains["t"], gains[name], label=name)
    ax_k.set_xlabel("t")
    ax_k.set_title("feedback gains")
    ax_k.legend()

    header, cov = read_table(args.run_dir / "covariance.csv")
    for name in header[1:]:
        ax_s.plot(cov["t"], cov[name], label=name)
    diag = [name for name in header[1:] if name[-2] == name[-1]]
    trace = [sum(cov[name][i] for name in diag) for i in range(len(cov["t"]))]
    ax_s.plot(cov["t"], trace, "k--", label="trace")
    ax_s.set_xlabel("t")
    ax_s.set_title("covariance entries")
    ax_s.legend()

    fig.tight_layout()
    if args.save:
        fig.savefig(args.save, dpi=150)
        print(f"wrote {args.save}")
    else:
        plt.show()


if __name__ == "__main__":
    main()
