"""Static figures for the report, rendered with the Agg backend.

PNG metadata is stripped so repeated runs produce identical files.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "path.simplify": False,
    "svg.hashsalt": "chainlens",
}
COLORS = {"malicious": "#c0392b", "benign": "#2c7fb8"}


def new_figure(width=5.0, height=3.2):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def save_figure(fig, path) -> None:
    with plt.rc_context(RC):
        fig.tight_layout()
        fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_pk_histogram(bins, malicious, benign, title, path) -> None:
    """Grouped bars: entity counts per p bin for each class."""
    fig, ax = new_figure()
    x = np.arange(len(bins))
    ax.bar(x - 0.2, malicious, 0.4, label="malicious", color=COLORS["malicious"])
    ax.bar(x + 0.2, benign, 0.4, label="benign", color=COLORS["benign"])
    ax.set_xticks(x)
    ax.set_xticklabels([f"{lo:.1f}" for lo, _ in bins], rotation=0)
    ax.set_xlabel("p (bin lower edge)")
    ax.set_ylabel("entities")
    ax.set_yscale("symlog", linthresh=1)
    ax.set_title(title)
    ax.legend(frameon=False)
    save_figure(fig, path)


def plot_sweep(grid, curves: dict, title, path) -> None:
    """Flagged benign entities versus epsilon, one line per segment."""
    fig, ax = new_figure()
    for label in sorted(curves):
        ax.plot(grid, curves[label], marker="o", ms=2.5, lw=1, label=label)
    ax.set_xlabel("epsilon")
    ax.set_ylabel("flagged benign entities")
    ax.set_yscale("symlog", linthresh=1)
    ax.set_title(title)
    if curves:
        ax.legend(frameon=False, ncol=2)
    save_figure(fig, path)


def plot_distribution(hists: dict, title, xlabel, path) -> None:
    """Log-log probability density of binned samples per class."""
    fig, ax = new_figure()
    for cls in sorted(hists):
        edges, masses = hists[cls]
        widths = np.diff(edges)
        dens = np.asarray(masses) / widths
        mid = np.sqrt(edges[:-1] * edges[1:])
        keep = dens > 0
        ax.loglog(mid[keep], dens[keep], "o", ms=3, label=cls, color=COLORS.get(cls))
    ax.set_xlabel(xlabel)
    ax.set_ylabel("p(x)")
    ax.set_title(title)
    if hists:
        ax.legend(frameon=False)
    save_figure(fig, path)
