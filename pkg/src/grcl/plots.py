"""Figure rendering for the report path. Every plot is drawn from the same
rows that go into the delimited output, never recomputed."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_first_domain_evolution(per_method: dict[str, list[float]], out_path):
    """Accuracy on the first target domain as more domains are observed."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, accs in sorted(per_method.items()):
        tasks = np.arange(1, len(accs) + 1)
        ax.plot(tasks, accs, marker="o", label=method)
    ax.set_xlabel("tasks observed")
    ax.set_ylabel("accuracy on first target domain")
    ax.set_ylim(0.0, 1.0)
    ax.set_xticks(np.arange(1, max((len(a) for a in per_method.values()),
                                   default=1) + 1))
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_source_target(rows: list[tuple[str, float, float]], out_path):
    """Grouped bars: final source accuracy vs mean target accuracy."""
    fig, ax = plt.subplots(figsize=(6, 4))
    methods = [r[0] for r in rows]
    x = np.arange(len(methods))
    width = 0.38
    ax.bar(x - width / 2, [r[1] for r in rows], width, label="source")
    ax.bar(x + width / 2, [r[2] for r in rows], width, label="target (mean)")
    ax.set_xticks(x)
    ax.set_xticklabels(methods, rotation=20, ha="right")
    ax.set_ylabel("accuracy after final task")
    ax.set_ylim(0.0, 1.0)
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_summary(rows: list[tuple[str, float, float, float, float]], out_path):
    """ACC and BWT per method with seed-spread error bars."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    methods = [r[0] for r in rows]
    x = np.arange(len(methods))
    for ax, (mean_i, std_i, title) in zip(axes, ((1, 2, "ACC"), (3, 4, "BWT"))):
        ax.bar(x, [r[mean_i] for r in rows], yerr=[r[std_i] for r in rows],
               capsize=4)
        ax.set_xticks(x)
        ax.set_xticklabels(methods, rotation=20, ha="right")
        ax.set_title(title)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
