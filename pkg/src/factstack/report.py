"""Report rendering: loss-trace CSVs with loss-curve figures, and metrics
CSVs with an aligned text table and a confusion-matrix heatmap.

Figures are rendered headlessly to files next to their delimited outputs.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import ConfusionMatrix, per_class_f1, weighted_f1  # noqa: E402

__all__ = [
    "write_loss_trace", "plot_loss_curve",
    "write_metrics_csv", "format_metrics_table", "plot_confusion_heatmap",
]

TraceRow = tuple[int, float, float]


def write_loss_trace(trace: Sequence[TraceRow], path: str | Path) -> None:
    """CSV with columns step,lr,loss; one row per optimizer step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in trace:
            writer.writerow([step, repr(float(lr)), repr(float(loss))])


def plot_loss_curve(
    traces: dict[str, Sequence[TraceRow]] | Sequence[TraceRow],
    path: str | Path,
    title: str = "training loss",
) -> None:
    """Loss vs step, one line per named trace."""
    if not isinstance(traces, dict):
        traces = {"loss": traces}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, trace in traces.items():
        steps = [row[0] for row in trace]
        losses = [row[2] for row in trace]
        ax.plot(steps, losses, lw=0.9, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if len(traces) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_metrics_csv(cm: ConfusionMatrix, path: str | Path) -> None:
    """Per-class F1 rows plus a final support-weighted row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    f1s = per_class_f1(cm)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "f1"])
        for label in cm.classes:
            writer.writerow([label.canonical_name, repr(float(f1s[label]))])
        writer.writerow(["Final", repr(float(weighted_f1(cm)))])


def format_metrics_table(cm: ConfusionMatrix) -> str:
    """A one-row aligned table: per-class F1 columns plus the final score."""
    f1s = per_class_f1(cm)
    headers = [label.canonical_name for label in cm.classes] + ["Final"]
    values = [f"{f1s[label]:.4f}" for label in cm.classes] + [f"{weighted_f1(cm):.4f}"]
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    vals = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return head + "\n" + vals + "\n"


def plot_confusion_heatmap(cm: ConfusionMatrix, path: str | Path) -> None:
    """Annotated gold-by-predicted count heatmap."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    c = len(cm.classes)
    names = [label.canonical_name for label in cm.classes]
    fig, ax = plt.subplots(figsize=(1.2 * c + 2.5, 1.0 * c + 2))
    im = ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(c), names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(c), names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("gold")
    vmax = cm.counts.max() if cm.total else 1
    for i in range(c):
        for j in range(c):
            color = "white" if cm.counts[i, j] > 0.6 * vmax else "black"
            ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center",
                    fontsize=8, color=color)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
