"""Scatter plots of a banana-train run: model samples at the first and last
checkpoint next to held-out data, plus the Sinkhorn trace.

    python3 scripts/plot_banana.py runs/banana_train [--out banana.png]
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from spcd.config import load_config  # noqa: E402
from spcd.experiments import prepare  # noqa: E402


def load(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("run_dir", type=Path)
    p.add_argument("--out", type=Path, default=None)
    args = p.parse_args()
    run_dir = args.run_dir
    # the manifest rebuilds the exact held-out set
    _, held = prepare(load_config(run_dir / "manifest.ini"))
    samples = sorted((run_dir / "checkpoints").glob("samples_*.csv"))
    with open(run_dir / "metrics.csv", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["kind"] == "checkpoint"]

    fig, ax = plt.subplots(1, 3, figsize=(13, 4))
    for a, path, title in ((ax[0], samples[0], "initial"), (ax[1], samples[-1], "final")):
        x = load(path)
        a.scatter(held[:, 0], held[:, 1], s=3, alpha=0.4, label="held-out")
        a.scatter(x[:, 0], x[:, 1], s=3, alpha=0.4, label="model")
        a.set_title(f"{title} (step {int(path.stem.split('_')[1])})")
        a.legend(loc="upper right", markerscale=3)
    ax[2].semilogy([int(r["step"]) for r in rows], [float(r["sinkhorn"]) for r in rows], "o-")
    ax[2].set_xlabel("step")
    ax[2].set_ylabel("debiased Sinkhorn")
    fig.tight_layout()
    out = args.out or run_dir / "banana.png"
    fig.savefig(out, dpi=120)
    print(out)


if __name__ == "__main__":
    main()
