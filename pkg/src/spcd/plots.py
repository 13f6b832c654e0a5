"""Static SVG plots drawn from a finished ``metrics.csv`` and nothing else."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp, so the same CSV gives the same bytes
matplotlib.rcParams["svg.hashsalt"] = "spcd"


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _num(v):
    try:
        return float(v)
    except ValueError:
        return None


def plot_from_csv(csv_path, out_path, spec) -> Path | None:
    """Draw ``spec.y`` against ``spec.x``; returns the file written, if any."""
    rows = read_metrics(csv_path)
    if spec.where is not None:
        col, val = spec.where
        rows = [r for r in rows if r[col] == str(val)]
    groups = {}
    for r in rows:
        groups.setdefault(r[spec.series] if spec.series else "", []).append(r)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    drawn = False
    for label, grp in groups.items():
        for ycol in spec.y:
            pts = [(_num(r[spec.x]), _num(r[ycol])) for r in grp]
            pts = [(x, y) for x, y in pts if x is not None and y is not None]
            if not pts:
                continue
            xs, ys = zip(*pts)
            name = f"{ycol} ({spec.series}={label})" if spec.series else ycol
            ax.plot(xs, ys, marker="o", ms=3, lw=1, label=name)
            drawn = True
    if not drawn:
        plt.close(fig)
        return None
    if spec.logx:
        ax.set_xscale("log")
    if spec.logy:
        ax.set_yscale("log")
    ax.set_xlabel(spec.x)
    ax.legend(fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path
