#!/usr/bin/env python3
"""Plot harness CSVs (dev tool, needs matplotlib).

    python scripts/plot_results.py results/sweep_beta.csv -o sweep.png
    python scripts/plot_results.py results/learn_beta.csv
    python scripts/plot_results.py results/compare.csv

The plot type is picked from the CSV header.
"""
import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def plot_sweep(rows, ax):
    by = defaultdict(list)
    for r in rows:
        by[float(r["a_true"])].append(r)
    for a, rs in sorted(by.items()):
        line, = ax.plot([float(r["beta_1"]) for r in rs], [float(r["J_r"]) for r in rs], label=f"A_hat = {a:g}")
        ax.axhline(float(rs[0]["riccati_optimal"]), color=line.get_color(), ls=":")
    ax.set_xlabel("beta_1")
    ax.set_ylabel("J_r")


def plot_trace(rows, ax):
    ax.plot([int(r["k"]) for r in rows], [float(r["J_tilde"]) for r in rows], marker="o", label="J_r")
    ax.axhline(float(rows[0]["riccati_optimal"]), color="k", ls=":", label="optimal")
    ax2 = ax.twinx()
    ax2.plot([int(r["k"]) for r in rows], [float(r["beta_1"]) for r in rows], color="C1", label="beta_1")
    ax2.set_ylabel("beta_1")
    ax.set_xlabel("iteration")
    ax.set_ylabel("J_r")


def plot_curves(rows, ax):
    col = "best_Jr" if "best_Jr" in rows[0] else "greedy_Jr"
    by = defaultdict(list)
    for r in rows:
        by[(r["method"], r["seed"])].append(r)
    colors = {}
    for (m, _), rs in sorted(by.items()):
        c = colors.setdefault(m, f"C{len(colors)}")
        ax.plot([int(r["episodes"]) for r in rs], [float(r[col]) for r in rs], color=c, alpha=0.5,
                label=m if m not in ax.get_legend_handles_labels()[1] else None)
    ax.axhline(float(rows[0]["riccati_optimal"]), color="k", ls=":")
    ax.set_xscale("log")
    ax.set_xlabel("episodes")
    ax.set_ylabel(col)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("csv")
    p.add_argument("-o", "--out", default=None)
    args = p.parse_args()
    rows = _read(args.csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    if "beta_1" in rows[0] and "a_true" in rows[0]:
        plot_sweep(rows, ax)
    elif "J_tilde" in rows[0]:
        plot_trace(rows, ax)
    elif "method" in rows[0]:
        plot_curves(rows, ax)
    else:
        raise SystemExit(f"don't know how to plot {args.csv}")
    ax.legend()
    fig.tight_layout()
    out = args.out or args.csv.rsplit(".", 1)[0] + ".png"
    fig.savefig(out, dpi=120)
    print(out)


if __name__ == "__main__":
    main()
