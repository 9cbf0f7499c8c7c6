"""Render evaluation artifacts to figure files next to the delimited output.

Kept separate from the metric code on purpose: the core returns arrays,
this module owns matplotlib.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_FIG_KW = dict(figsize=(5.2, 3.6), dpi=120)


def _finish(fig, ax, path: str | Path):
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_cmc_plot(curves: dict[str, np.ndarray], path: str | Path, std: dict[str, np.ndarray] | None = None):
    fig, ax = plt.subplots(**_FIG_KW)
    for label, values in curves.items():
        ranks = np.arange(1, len(values) + 1)
        ax.plot(ranks, values, marker="o", markersize=3, label=label)
        if std and label in std:
            ax.fill_between(ranks, values - std[label], values + std[label], alpha=0.2)
    ax.set_xlabel("rank")
    ax.set_ylabel("match rate")
    ax.set_ylim(0.0, 1.02)
    ax.legend(fontsize=8)
    _finish(fig, ax, path)


def save_roc_plot(curves: dict[str, tuple[np.ndarray, np.ndarray]], path: str | Path):
    fig, ax = plt.subplots(**_FIG_KW)
    for label, (far, tar) in curves.items():
        ax.plot(far, tar, label=label)
    ax.plot([0, 1], [0, 1], linestyle=":", color="gray", linewidth=0.8)
    ax.set_xlabel("false accept rate")
    ax.set_ylabel("true accept rate")
    ax.legend(fontsize=8)
    _finish(fig, ax, path)


def save_loss_plot(history, path: str | Path):
    fig, ax = plt.subplots(**_FIG_KW)
    ax.plot(np.arange(1, len(history) + 1), history)
    ax.set_xlabel("step")
    ax.set_ylabel("verification loss")
    _finish(fig, ax, path)


def save_timing_plot(report: dict, path: str | Path):
    modes = list(report["modes"])
    means = [report["modes"][m]["mean_per_probe_s"] for m in modes]
    p95s = [report["modes"][m]["p95_per_probe_s"] for m in modes]
    fig, ax = plt.subplots(**_FIG_KW)
    xs = np.arange(len(modes))
    ax.bar(xs - 0.18, means, width=0.36, label="mean")
    ax.bar(xs + 0.18, p95s, width=0.36, label="p95")
    ax.set_xticks(xs)
    ax.set_xticklabels(modes, rotation=15, fontsize=7)
    ax.set_ylabel("seconds per probe")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    _finish(fig, ax, path)
