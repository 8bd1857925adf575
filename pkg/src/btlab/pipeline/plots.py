"""Report figures. Everything is rendered headless and saved as SVG.

The two shapes used by the reports: a line chart with error bars for sweeps
(score vs steps, paraphrase count, or train size) and grouped bars for the
strategy comparison and the robustness table. SVG output is stabilized
(fixed hash salt, no embedded creation date) so identical data produces
identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

matplotlib.rcParams["svg.hashsalt"] = "btlab"

_COLORS = ("#1b6ca8", "#c24f38", "#3d8f5f", "#8057a3", "#b3852f")


def _finish(fig, ax, title: str, xlabel: str, ylabel: str, path) -> Path:
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3, linewidth=0.5)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def sweep_lines(series, title: str, xlabel: str, ylabel: str, path) -> Path:
    """Line chart with error bars.

    ``series`` is a list of (label, xs, means, stds) tuples; stds may be
    None for a plain line.
    """
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for k, (label, xs, means, stds) in enumerate(series):
        color = _COLORS[k % len(_COLORS)]
        ax.errorbar(xs, means, yerr=stds, label=label, color=color,
                    marker="o", markersize=4, capsize=3, linewidth=1.5)
    if len(series) > 1:
        ax.legend(frameon=False)
    return _finish(fig, ax, title, xlabel, ylabel, path)


def grouped_bars(group_labels, series, title: str, xlabel: str, ylabel: str,
                 path) -> Path:
    """Grouped bar chart with error bars.

    ``group_labels`` name the positions along x; ``series`` is a list of
    (label, values, stds) with one value per group.
    """
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(group_labels)), 4.0))
    n = max(len(series), 1)
    width = 0.8 / n
    for k, (label, values, stds) in enumerate(series):
        xs = [i + (k - (n - 1) / 2.0) * width for i in range(len(group_labels))]
        color = _COLORS[k % len(_COLORS)]
        ax.bar(xs, values, width=width, yerr=stds, label=label, color=color,
               capsize=3, error_kw={"linewidth": 1.0})
    ax.set_xticks(range(len(group_labels)))
    ax.set_xticklabels(group_labels)
    ax.axhline(0.0, color="black", linewidth=0.8)
    if len(series) > 1:
        ax.legend(frameon=False)
    return _finish(fig, ax, title, xlabel, ylabel, path)
