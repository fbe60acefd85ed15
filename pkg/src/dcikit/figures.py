"""Matplotlib figure rendering for the report path.

Figures are written straight to files (Agg backend); nothing is shown
interactively.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import MetricReport
from .training import LossLog


def save_loss_figure(logs: Sequence[tuple[str, LossLog]], path: str | Path,
                     first_k: int | None = None) -> Path:
    """Overlay loss curves; optionally shade the first-k comparison window."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, log in logs:
        ax.plot(log.steps, log.losses, label=label, linewidth=1.2)
    if first_k:
        ax.axvspan(0, first_k, color="gray", alpha=0.15, label=f"first {first_k} steps")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_score_figure(report: MetricReport, path: str | Path) -> Path:
    """Horizontal bars of per-dataset mean scores, annotated with the metric."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(report.datasets)
    scores = [report.datasets[n].mean for n in names]
    labels = [f"{n} [{report.datasets[n].metric}]" for n in names]
    height = max(2.0, 0.4 * len(names) + 1.2)
    fig, ax = plt.subplots(figsize=(7, height))
    ax.barh(range(len(names)), scores, color="#4878a8")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("mean score")
    ax.set_xlim(0, 100)
    ax.grid(True, axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
