"""Point-tracking metrics: position accuracy, occlusion accuracy, Jaccard.

delta^x is the fraction of ground-truth-visible frames with position error
within x pixels, for x in {1, 2, 4, 8, 16}; delta_avg averages the five.
Occlusion accuracy compares predicted and true visibility over every frame.
Jaccard at x counts a frame as a true positive when both tracks mark it
visible and the error is within x; predicted-visible frames that fail that
are false positives, ground-truth-visible frames that fail it are false
negatives. The average Jaccard pools counts over tracks before dividing,
and a threshold with an empty denominator contributes a Jaccard of 1.
delta and occlusion accuracy average per track by default; a pooled mode
weights frames instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .trajectory import Trajectory

__all__ = [
    "THRESHOLDS",
    "EvalReport",
    "error_curve",
    "delta_metrics",
    "occlusion_accuracy",
    "jaccard_counts",
    "average_jaccard",
    "evaluate_tracks",
    "report_from_obj",
]

THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)


def _check_pair(pred: Trajectory, gt: Trajectory) -> None:
    if pred.frame_range() != gt.frame_range():
        raise ValueError(
            f"prediction covers frames {pred.frame_range()}, "
            f"ground truth covers {gt.frame_range()}"
        )


def error_curve(pred: Trajectory, gt: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame position error and the ground-truth occlusion mask."""
    _check_pair(pred, gt)
    errors = np.linalg.norm(pred.positions - gt.positions, axis=1)
    return errors, ~gt.visibility


def delta_metrics(
    pred: Trajectory, gt: Trajectory, thresholds: Sequence[float] = THRESHOLDS,
) -> dict[float, float] | None:
    """Fraction of gt-visible frames within each threshold, or None if the
    ground truth is never visible."""
    errors, occluded = error_curve(pred, gt)
    visible = ~occluded
    denom = int(visible.sum())
    if denom == 0:
        return None
    errors = errors[visible]
    return {float(x): float((errors <= x).mean()) for x in thresholds}


def occlusion_accuracy(pred: Trajectory, gt: Trajectory) -> float:
    """Fraction of frames where predicted visibility matches the ground truth."""
    _check_pair(pred, gt)
    return float((pred.visibility == gt.visibility).mean())


def jaccard_counts(
    pred: Trajectory, gt: Trajectory, threshold: float,
) -> tuple[int, int, int]:
    """(true positives, false positives, false negatives) at one threshold."""
    errors, occluded = error_curve(pred, gt)
    gt_vis = ~occluded
    within = errors <= threshold
    tp = gt_vis & pred.visibility & within
    fp = pred.visibility & ~tp
    fn = gt_vis & ~tp
    return int(tp.sum()), int(fp.sum()), int(fn.sum())


def average_jaccard(
    pairs: Iterable[tuple[Trajectory, Trajectory]],
    thresholds: Sequence[float] = THRESHOLDS,
) -> float:
    """Mean over thresholds of pooled TP / (TP + FP + FN)."""
    pairs = list(pairs)
    jaccards = []
    for x in thresholds:
        tp = fp = fn = 0
        for pred, gt in pairs:
            tp_i, fp_i, fn_i = jaccard_counts(pred, gt, x)
            tp += tp_i
            fp += fp_i
            fn += fn_i
        denom = tp + fp + fn
        jaccards.append(tp / denom if denom else 1.0)
    return float(np.mean(jaccards))


@dataclass
class EvalReport:
    """Aggregate metrics over a set of (prediction, ground truth) pairs."""

    delta: dict[float, float]
    delta_avg: float
    occlusion_accuracy: float
    average_jaccard: float
    num_tracks: int
    num_visible_frames: int
    delta_mode: str = "per_track"
    extra: dict = field(default_factory=dict)

    def to_obj(self) -> dict:
        obj = {
            "delta": {f"{x:g}": v for x, v in sorted(self.delta.items())},
            "delta_avg": self.delta_avg,
            "occlusion_accuracy": self.occlusion_accuracy,
            "average_jaccard": self.average_jaccard,
            "num_tracks": self.num_tracks,
            "num_visible_frames": self.num_visible_frames,
            "delta_mode": self.delta_mode,
        }
        obj.update(self.extra)
        return obj


def report_from_obj(obj: dict) -> EvalReport:
    known = {
        "delta", "delta_avg", "occlusion_accuracy", "average_jaccard",
        "num_tracks", "num_visible_frames", "delta_mode",
    }
    return EvalReport(
        delta={float(x): float(v) for x, v in obj["delta"].items()},
        delta_avg=float(obj["delta_avg"]),
        occlusion_accuracy=float(obj["occlusion_accuracy"]),
        average_jaccard=float(obj["average_jaccard"]),
        num_tracks=int(obj["num_tracks"]),
        num_visible_frames=int(obj["num_visible_frames"]),
        delta_mode=obj.get("delta_mode", "per_track"),
        extra={k: v for k, v in obj.items() if k not in known},
    )


def evaluate_tracks(
    pairs: Sequence[tuple[Trajectory, Trajectory]],
    thresholds: Sequence[float] = THRESHOLDS,
    delta_mode: str = "per_track",
) -> EvalReport:
    """Evaluate prediction/ground-truth pairs.

    per_track averages each track's delta and occlusion accuracy equally;
    pooled weights every gt-visible frame equally instead. Tracks whose
    ground truth is never visible are excluded from delta either way. The
    average Jaccard always pools counts across tracks.
    """
    if delta_mode not in ("per_track", "pooled"):
        raise ValueError(f"delta_mode must be per_track or pooled, got {delta_mode!r}")
    if not pairs:
        raise ValueError("need at least one (prediction, ground truth) pair")

    num_visible = sum(int(gt.visibility.sum()) for _, gt in pairs)
    oa = float(np.mean([occlusion_accuracy(pred, gt) for pred, gt in pairs]))

    if delta_mode == "per_track":
        per_track = [delta_metrics(pred, gt, thresholds) for pred, gt in pairs]
        per_track = [d for d in per_track if d is not None]
        if not per_track:
            raise ValueError("no pair has a visible ground-truth frame")
        delta = {
            float(x): float(np.mean([d[float(x)] for d in per_track])) for x in thresholds
        }
    else:
        delta = {}
        for x in thresholds:
            hits = total = 0
            for pred, gt in pairs:
                errors, occluded = error_curve(pred, gt)
                visible = ~occluded
                hits += int((errors[visible] <= x).sum())
                total += int(visible.sum())
            if total == 0:
                raise ValueError("no pair has a visible ground-truth frame")
            delta[float(x)] = hits / total

    return EvalReport(
        delta=delta,
        delta_avg=float(np.mean(list(delta.values()))),
        occlusion_accuracy=oa,
        average_jaccard=average_jaccard(pairs, thresholds),
        num_tracks=len(pairs),
        num_visible_frames=num_visible,
        delta_mode=delta_mode,
    )
