"""Figure rendering for loss traces and scale histograms."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import ScaleHistogram


def plot_trace(trace, path) -> None:
    """Per-step calibration loss with its running mean."""
    steps = [r.step for r in trace]
    losses = [r.loss for r in trace]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.6, alpha=0.5, label="per-step loss")
    if len(losses) >= 10:
        k = min(50, len(losses))
        run = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1 :], run, lw=1.5, label=f"running mean ({k})")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_histogram(hist: ScaleHistogram, path) -> None:
    """Stacked per-site magnitude distribution of the trained scales."""
    fig, ax = plt.subplots(figsize=(7, 4))
    centers = 0.5 * (hist.edges[:-1] + hist.edges[1:])
    sites = sorted(hist.counts)
    cmap = plt.get_cmap("coolwarm")
    for i, site in enumerate(sites):
        color = cmap(i / max(1, len(sites) - 1))
        ax.step(centers, hist.counts[site][:-1], where="mid", label=site, color=color)
    ax.set_xlabel("|scale|")
    ax.set_ylabel("count")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
