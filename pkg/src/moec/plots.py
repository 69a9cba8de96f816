"""Figure rendering for the analyze/report paths.

Every figure is written next to the CSV that backs it, so the PNGs are
a convenience view of the same data.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import (RoutingStats, SimilarityMatrix, expert_count_table,
                       load_balance_curve)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_load_balance(stats_list, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for st in stats_list:
        curve = load_balance_curve(st)
        ax.plot(np.arange(1, len(curve) + 1), curve, marker="o", ms=3,
                label=f"layer {st.layer}")
    ax.set_xlabel("expert rank")
    ax.set_ylabel("token fraction")
    ax.set_title("Sorted routing distribution")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_similarity(sim: SimilarityMatrix, path):
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(sim.values, vmin=-1, vmax=1, cmap="RdBu_r")
    fig.colorbar(im, ax=ax)
    ax.set_title(f"Mean-input cosine similarity, layer {sim.layer}")
    ax.set_xlabel("expert")
    ax.set_ylabel("expert")
    return _save(fig, path)


def plot_routing_per_class(st: RoutingStats, path, max_classes: int = 8):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(st.per_class), 1)
    xs = np.arange(st.k)
    for j, c in enumerate(sorted(st.per_class)[:max_classes]):
        ax.bar(xs + j * width, st.class_fractions(c), width=width, label=f"class {c}")
    ax.set_xlabel("expert")
    ax.set_ylabel("fraction of class tokens")
    ax.set_title(f"Routing distribution per class, layer {st.layer}")
    ax.legend(fontsize=6, ncol=2)
    return _save(fig, path)


def plot_expert_counts(model, path):
    counts = expert_count_table(model)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(np.arange(len(counts)), counts)
    ax.set_xlabel("layer")
    ax.set_ylabel("experts (0 = dense)")
    ax.set_title("Experts per layer")
    return _save(fig, path)
