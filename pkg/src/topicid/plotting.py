"""Matplotlib figures written next to the TSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MetricReport  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _heatmap(ax, matrix, labels_x, labels_y, fmt):
    im = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(labels_x)), labels_x, rotation=45, ha="right")
    ax.set_yticks(range(len(labels_y)), labels_y)
    hi = np.max(matrix) if np.size(matrix) else 0
    for (i, j), v in np.ndenumerate(matrix):
        ax.text(j, i, fmt.format(v), ha="center", va="center", color="white" if v > hi / 2 else "black")
    return im


def plot_confusion(report: MetricReport, path, title: str = ""):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    _heatmap(ax, report.confusion, report.class_names, report.class_names, "{:d}")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title or f"micro-F1 {report.micro_f1:.1f}  UAR {report.uar:.1f}")
    _save(fig, path)


def plot_agreement(names: list[str], matrix: np.ndarray, path):
    size = 2 + 0.8 * len(names)
    fig, ax = plt.subplots(figsize=(size, size * 0.9))
    _heatmap(ax, matrix, names, names, "{:.1f}")
    ax.set_title("model agreement (micro-F1)")
    _save(fig, path)


def plot_embeddings(system_coords: dict[str, tuple[np.ndarray, list[str]]], path):
    """One panel per system: 2-D coordinates coloured by true topic."""
    n = len(system_coords)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 4), squeeze=False)
    for ax, (system, (coords, topics)) in zip(axes[0], system_coords.items()):
        for topic in sorted(set(topics)):
            sel = [i for i, t in enumerate(topics) if t == topic]
            ax.scatter(coords[sel, 0], coords[sel, 1], s=10, label=topic)
        ax.set_title(system)
        ax.set_xlabel("pc1")
        ax.set_ylabel("pc2")
    axes[0][-1].legend(fontsize="small")
    _save(fig, path)


def plot_history(history: list[dict], path, title: str = ""):
    """Loss components (left) and dev metrics (right) per epoch."""
    epochs = [row["epoch"] for row in history]
    metric_keys = [k for k in ("dev_micro_f1", "dev_uar", "dev_wer") if any(k in r for r in history)]
    loss_keys = [k for k in history[0] if k not in ("epoch", "dev_loss", *metric_keys)] if history else []
    for row in history:
        loss_keys += [k for k in row if k not in loss_keys and k not in ("epoch", "dev_loss", *metric_keys)]
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.5))
    for k in loss_keys:
        left.plot(epochs, [r.get(k, np.nan) for r in history], label=k)
    left.set_xlabel("epoch")
    left.set_ylabel("loss per utterance")
    left.legend(fontsize="small")
    for k in metric_keys:
        right.plot(epochs, [r.get(k, np.nan) for r in history], marker="o", label=k)
    right.set_xlabel("epoch")
    right.set_ylabel("percent")
    if metric_keys:
        right.legend(fontsize="small")
    fig.suptitle(title)
    _save(fig, path)
