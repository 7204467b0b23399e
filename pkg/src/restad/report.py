"""Matplotlib figures rendered next to the delimited outputs.

Figures are a human-facing convenience: they are not covered by the
byte-identity guarantee that checkpoints, traces, and reports carry.
The Agg backend keeps rendering headless, and the PNG Software chunk is
stripped so reruns produce stable files in practice.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

METRIC_KEYS = ("f1", "auc_roc", "auc_pr", "vus_roc", "vus_pr")
METRIC_LABELS = ("F1-Score", "AUC-ROC", "AUC-PR", "VUS-ROC", "VUS-PR")

_SAVE_OPTS = {"dpi": 120, "metadata": {"Software": None}}


def _label_segments(labels):
    """Contiguous [start, stop) runs of label 1."""
    labels = np.asarray(labels)
    edges = np.flatnonzero(np.diff(np.concatenate(([0], labels, [0]))))
    return list(zip(edges[::2], edges[1::2]))


def save_score_figure(trace, path, title: str | None = None) -> str:
    """Three stacked panels: eps_r, eps_s, and the composite score.

    Anomalous stretches of the label vector are shaded across all panels
    so score excursions can be read against ground truth.
    """
    channels = [
        ("reconstruction error", trace.eps_r),
        ("dissimilarity", trace.eps_s),
        (f"composite ({trace.criterion})", trace.composite),
    ]
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(10, 6))
    for ax, (name, values) in zip(axes, channels):
        ax.plot(np.arange(len(values)), values, linewidth=0.7, color="tab:blue")
        ax.set_ylabel(name, fontsize=8)
        if trace.labels is not None:
            for start, stop in _label_segments(trace.labels):
                ax.axvspan(start, stop, color="tab:red", alpha=0.25, linewidth=0)
    axes[-1].set_xlabel("time index")
    if title:
        axes[0].set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)
    return str(path)


def save_ablation_figure(aggregates, axis: str, path: str) -> str:
    """One figure per ablation axis, built from the aggregate rows.

    Numeric axes (n_centers) get mean lines with a +-std band on a log2
    x scale; categorical axes (criterion, rbf_position) get grouped bars
    with std error bars. Aggregates missing their metrics (all repeats
    failed) are skipped.
    """
    rows = [a for a in aggregates if a.get("f1") not in (None, "")]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    if not rows:
        ax.text(0.5, 0.5, "no completed cells", ha="center", va="center")
        ax.set_axis_off()
    elif axis == "n_centers":
        values = [float(r["value"]) for r in rows]
        for key, label in zip(METRIC_KEYS, METRIC_LABELS):
            mean = np.array([float(r[key]) for r in rows])
            std = np.array([float(r[f"{key}_std"]) for r in rows])
            ax.plot(values, mean, marker="o", markersize=3, label=label)
            ax.fill_between(values, mean - std, mean + std, alpha=0.15)
        ax.set_xscale("log", base=2)
        ax.set_xticks(values)
        ax.set_xticklabels([str(int(v)) for v in values])
        ax.set_xlabel("number of centers")
        ax.set_ylabel("metric value")
        ax.legend(fontsize=8)
    else:
        labels = [str(r["value"]) for r in rows]
        x = np.arange(len(rows))
        width = 0.8 / len(METRIC_KEYS)
        for j, (key, label) in enumerate(zip(METRIC_KEYS, METRIC_LABELS)):
            mean = [float(r[key]) for r in rows]
            std = [float(r[f"{key}_std"]) for r in rows]
            offs = x + (j - (len(METRIC_KEYS) - 1) / 2) * width
            ax.bar(offs, mean, width, yerr=std, capsize=2, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_xlabel(axis)
        ax.set_ylabel("metric value")
        ax.legend(fontsize=8)
    ax.set_title(f"ablation over {axis}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)
    return str(path)
