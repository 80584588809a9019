"""Figure rendering for evaluation reports.

The report stage writes two figures next to the delimited tables: a
metrics comparison across models, and the cold-start breakdown of recall,
MAP and median rank by training-occurrence bucket. Rendering is headless
(Agg) and free of timestamps so reruns produce identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluator import COLDSTART_RECALL_K, ComparisonTable


def render_metrics_figure(table: ComparisonTable, path, dpi: int = 120) -> None:
    """Grouped bars of recall@k per model plus a median-rank panel."""
    ks = sorted(table.reports[0].recall_at)
    n_models = len(table.names)
    fig, (ax_recall, ax_rank) = plt.subplots(
        1, 2, figsize=(9, 3.6), gridspec_kw={"width_ratios": [2, 1]}
    )
    width = 0.8 / n_models
    x = np.arange(len(ks))
    for i, (name, rep) in enumerate(zip(table.names, table.reports)):
        vals = [rep.recall_at[k] for k in ks]
        ax_recall.bar(x + (i - (n_models - 1) / 2) * width, vals, width, label=name)
    ax_recall.set_xticks(x)
    ax_recall.set_xticklabels([f"recall@{k}" for k in ks])
    ax_recall.set_ylabel("mean recall")
    ax_recall.legend(fontsize=8)
    ax_recall.set_title("retrieval of withheld songs")

    ranks = [rep.median_rank for rep in table.reports]
    ax_rank.bar(np.arange(n_models), ranks, 0.6, color="tab:gray")
    ax_rank.set_xticks(np.arange(n_models))
    ax_rank.set_xticklabels(table.names, rotation=20, ha="right", fontsize=8)
    ax_rank.set_ylabel("median rank (lower is better)")
    ax_rank.set_title("median rank")
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def render_coldstart_figure(table: ComparisonTable, path, dpi: int = 120) -> None:
    """Per-bucket metrics as a function of training-occurrence count."""
    labels = list(table.reports[0].bins)
    rkey = f"recall_at_{COLDSTART_RECALL_K}"
    panels = [
        ("median_rank", "median rank"),
        ("map", "MAP"),
        (rkey, f"recall@{COLDSTART_RECALL_K}"),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    x = np.arange(len(labels))
    for ax, (key, title) in zip(axes, panels):
        for name, rep in zip(table.names, table.reports):
            ys = [
                np.nan if rep.bins.get(lab, {}).get(key) is None
                else rep.bins[lab][key]
                for lab in labels
            ]
            ax.plot(x, ys, marker="o", label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_xlabel("occurrences in training playlists")
        ax.set_title(title)
    axes[0].set_ylabel("metric value")
    axes[-1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
