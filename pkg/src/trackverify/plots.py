"""Evaluation figures: per-frame error curves and selector comparison bars."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalReport, error_curve
from .trajectory import Trajectory

__all__ = ["plot_error_curve", "plot_selector_bars"]


def plot_error_curve(
    pred: Trajectory,
    gt: Trajectory,
    out_path: str | Path,
    title: str | None = None,
) -> Path:
    """Per-frame position error over time; occluded spans are shaded."""
    errors, occluded = error_curve(pred, gt)
    frames = np.arange(gt.start, gt.start + gt.length)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(frames, errors, marker="o", markersize=3, linewidth=1.2, color="tab:blue")
    in_span = False
    span_start = 0
    labeled = False
    for i, occ in enumerate(list(occluded) + [False]):
        if occ and not in_span:
            in_span, span_start = True, i
        elif not occ and in_span:
            in_span = False
            ax.axvspan(
                frames[span_start] - 0.5,
                frames[i - 1] + 0.5,
                color="0.85",
                zorder=0,
                label=None if labeled else "occluded",
            )
            labeled = True
    if labeled:
        ax.legend(fontsize=8)
    ax.set_xlabel("frame")
    ax.set_ylabel("error (px)")
    ax.set_ylim(bottom=0)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_selector_bars(
    reports: dict[str, EvalReport],
    out_path: str | Path,
    metrics: Sequence[str] = ("delta_avg", "average_jaccard", "occlusion_accuracy"),
) -> Path:
    """Grouped bars comparing selectors on the requested report fields."""
    if not reports:
        raise ValueError("need at least one report")
    names = list(reports)
    x = np.arange(len(names))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(names), 3.5))
    for j, metric in enumerate(metrics):
        values = [getattr(reports[name], metric) for name in names]
        ax.bar(x + (j - (len(metrics) - 1) / 2) * width, values, width, label=metric)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
