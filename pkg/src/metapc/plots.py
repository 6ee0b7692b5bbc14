"""Report figures rendered from the CSV/checkpoint outputs.

Every experiment writes delimited output as its primary artifact; these
helpers turn those files into PNGs saved next to them.  Rendering is always
to file (Agg backend), never interactive.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .grammar import CHANCE_LEVEL
from .sas import EnsembleNetwork


def _read_metrics(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = {}
    for j, name in enumerate(header):
        vals = [row[j] for row in rows]
        cols[name] = np.array([float(v) if v else np.nan for v in vals])
    return cols


def training_curves(metrics_csv, out_path) -> Path:
    """Energy (log scale) and the task metric against the epoch."""
    cols = _read_metrics(metrics_csv)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(cols["epoch"], np.log(cols["mean_F"]), marker="o", ms=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("ln mean energy")
    if np.any(np.isfinite(cols["metric"])):
        ax2.plot(cols["epoch"], cols["metric"], marker="o", ms=3, color="tab:orange")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("task metric")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def layer_stat_curves(metrics_csv, out_path) -> Path:
    """Log mean |m|, mean pi and mean xi per layer against the epoch."""
    cols = _read_metrics(metrics_csv)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, stat, label in zip(
        axes,
        ("mean_abs_m", "mean_pi", "mean_xi"),
        ("ln mean |m|", "ln mean pi", "ln mean xi"),
    ):
        for layer in ("in", "rec", "out"):
            vals = cols[f"{stat}_{layer}"]
            with np.errstate(divide="ignore"):
                ax.plot(cols["epoch"], np.log(vals), label=layer)
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def hyperparameter_histograms(ens: EnsembleNetwork, out_path, bins: int = 50) -> Path:
    """3x3 grid: m / pi / xi distributions for each layer."""
    fig, axes = plt.subplots(3, 3, figsize=(11, 8))
    for row, (name, layer) in enumerate(ens.layers().items()):
        for col, param in enumerate(("m", "pi", "xi")):
            ax = axes[row][col]
            ax.hist(getattr(layer, param).ravel(), bins=bins, color=f"C{row}")
            ax.set_title(f"{name} layer: {param}", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def sweep_curve(sweep_csv, out_path) -> Path:
    """Correct-letter ratio against the data load, with the chance line."""
    with open(sweep_csv) as fh:
        fh.readline()
        rows = [line.strip().split(",") for line in fh if line.strip()]
    alphas = np.array([float(r[0]) for r in rows])
    ratios = np.array([float(r[3]) for r in rows])
    uniq = np.unique(alphas)
    means = np.array([ratios[alphas == a].mean() for a in uniq])
    stds = np.array([ratios[alphas == a].std(ddof=1) if (alphas == a).sum() > 1 else 0.0 for a in uniq])

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(uniq, means, yerr=stds, marker="o", ms=4, capsize=3)
    ax.axhline(CHANCE_LEVEL, color="gray", ls="--", lw=1, label="chance (1/13)")
    ax.set_xlabel("data load M/N")
    ax.set_ylabel("correct letter ratio")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)
