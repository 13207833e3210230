"""Pseudo-label fusion and the reference selectors.

fuse_pseudo_label picks the argmax-scored candidate per frame and majority-
votes visibility. Reference selectors: oracle (argmin error, evaluation
only), random teacher (round-robin over a seeded shuffled teacher order),
geometric median (Weiszfeld), agreement (min mean distance to the others),
Kalman-style constant velocity, and minimum acceleration.

Conventions: argmax/argmin ties break to the lowest candidate index;
majority-vote visibility uses >= ceil(M/2) votes (even ties count visible);
provenance is the selected candidate index per frame, with -1 marking fused
positions that match no single candidate (geometric median) and -2 marking
frames where the median iteration did not converge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .trajectory import CandidateSet, QueryPoint, ReliabilityScores, Trajectory, euclidean_errors

__all__ = [
    "SELECTOR_KINDS",
    "PseudoLabel",
    "fuse_pseudo_label",
    "oracle_select",
    "random_teacher_select",
    "RandomTeacherSelector",
    "geometric_median_fuse",
    "weiszfeld",
    "agreement_select",
    "kalman_cv_select",
    "min_acceleration_select",
    "sample_queries",
]

SELECTOR_KINDS = (
    "verifier",
    "oracle",
    "random_teacher",
    "geometric_median",
    "agreement",
    "kalman_cv",
    "min_acceleration",
)


@dataclass(frozen=True)
class PseudoLabel:
    """A fused trajectory with per-frame provenance and optional scores."""

    trajectory: Trajectory
    provenance: np.ndarray  # (L,) int
    scores: ReliabilityScores | None = None

    def __post_init__(self) -> None:
        provenance = np.ascontiguousarray(np.asarray(self.provenance, dtype=np.int64))
        if provenance.shape != (self.trajectory.length,):
            raise ValueError(
                f"provenance has shape {provenance.shape}, trajectory covers "
                f"{self.trajectory.length} frames"
            )
        if self.scores is not None:
            if self.scores.length != self.trajectory.length:
                raise ValueError("scores and trajectory cover different frame counts")
            argmax = self.scores.scores.argmax(axis=1)
            chosen = provenance >= 0
            if not np.array_equal(argmax[chosen], provenance[chosen]):
                raise ValueError("provenance must equal the per-frame score argmax")
        provenance.flags.writeable = False
        object.__setattr__(self, "provenance", provenance)

    @property
    def positions(self) -> np.ndarray:
        return self.trajectory.positions

    @property
    def visibility(self) -> np.ndarray:
        return self.trajectory.visibility


def _majority_visibility(teacher_visibility: np.ndarray | None, length: int, m: int) -> np.ndarray:
    if teacher_visibility is None:
        return np.ones(length, dtype=bool)
    votes = np.asarray(teacher_visibility, dtype=bool)
    if votes.shape != (length, m):
        raise ValueError(
            f"teacher visibility has shape {votes.shape}, expected ({length}, {m})"
        )
    return votes.sum(axis=1) >= math.ceil(m / 2)


def _one_hot_scores(indices: np.ndarray, m: int) -> ReliabilityScores:
    scores = np.zeros((len(indices), m))
    scores[np.arange(len(indices)), indices] = 1.0
    return ReliabilityScores(scores=scores)


def _indexed_label(
    candidates: CandidateSet,
    indices: np.ndarray,
    visibility: np.ndarray,
    scores: ReliabilityScores | None,
) -> PseudoLabel:
    positions = candidates.positions[np.arange(candidates.length), indices]
    traj = Trajectory(start=candidates.start, positions=positions, visibility=visibility)
    return PseudoLabel(trajectory=traj, provenance=indices, scores=scores)


def fuse_pseudo_label(
    candidates: CandidateSet,
    scores: ReliabilityScores,
    teacher_visibility: np.ndarray | None,
) -> PseudoLabel:
    """Per frame: highest-scored candidate, majority-voted visibility."""
    if scores.scores.shape != (candidates.length, candidates.num_candidates):
        raise ValueError(
            f"scores have shape {scores.scores.shape}, candidates are "
            f"({candidates.length}, {candidates.num_candidates})"
        )
    indices = scores.scores.argmax(axis=1)
    visibility = _majority_visibility(
        teacher_visibility, candidates.length, candidates.num_candidates
    )
    return _indexed_label(candidates, indices, visibility, scores)


def oracle_select(candidates: CandidateSet, gt: Trajectory) -> PseudoLabel:
    """Evaluation-only upper bound: the closest candidate per frame."""
    errors = euclidean_errors(candidates, gt)
    indices = errors.argmin(axis=1)
    scores = _one_hot_scores(indices, candidates.num_candidates)
    return _indexed_label(candidates, indices, gt.visibility.copy(), scores)


class RandomTeacherSelector:
    """Round-robin over a seeded shuffled teacher order, advancing per track."""

    def __init__(self, num_candidates: int, seed: int):
        self.order = np.random.default_rng(seed).permutation(num_candidates)
        self.count = 0

    def select(
        self, candidates: CandidateSet, teacher_visibility: np.ndarray | None = None,
    ) -> PseudoLabel:
        label = random_teacher_select(
            candidates, seed=0, track_index=self.count, order=self.order,
            teacher_visibility=teacher_visibility,
        )
        self.count += 1
        return label


def random_teacher_select(
    candidates: CandidateSet,
    seed: int,
    track_index: int = 0,
    teacher_visibility: np.ndarray | None = None,
    order: np.ndarray | None = None,
) -> PseudoLabel:
    """One teacher for the whole track: round-robin position track_index in a
    seed-shuffled order. Visibility is the chosen teacher's own votes when
    provided."""
    m = candidates.num_candidates
    if order is None:
        order = np.random.default_rng(seed).permutation(m)
    if len(order) != m:
        raise ValueError(f"order covers {len(order)} teachers, candidates have {m}")
    chosen = int(order[track_index % m])
    indices = np.full(candidates.length, chosen, dtype=np.int64)
    if teacher_visibility is not None:
        votes = np.asarray(teacher_visibility, dtype=bool)
        if votes.shape != (candidates.length, m):
            raise ValueError(
                f"teacher visibility has shape {votes.shape}, expected "
                f"({candidates.length}, {m})"
            )
        visibility = votes[:, chosen].copy()
    else:
        visibility = np.ones(candidates.length, dtype=bool)
    return _indexed_label(candidates, indices, visibility, _one_hot_scores(indices, m))


def weiszfeld(
    points: np.ndarray, tol: float = 1e-6, max_iter: int = 100,
) -> tuple[np.ndarray, bool]:
    """Geometric median of (M, 2) points; returns (median, converged).

    Iteratively reweighted averaging from the centroid; an iterate within
    1e-9 of a data point is returned as-is (the update is singular there).
    The summed-distance objective is non-increasing by construction and is
    asserted with a tiny slack.
    """
    points = np.asarray(points, dtype=np.float64)
    x = points.mean(axis=0)
    objective = float(np.linalg.norm(points - x, axis=1).sum())
    for _ in range(max_iter):
        dist = np.linalg.norm(points - x, axis=1)
        nearest = int(dist.argmin())
        if dist[nearest] < 1e-9:
            return points[nearest].copy(), True
        weights = 1.0 / dist
        x_new = (weights[:, None] * points).sum(axis=0) / weights.sum()
        new_objective = float(np.linalg.norm(points - x_new, axis=1).sum())
        if new_objective > objective + 1e-9 * max(objective, 1.0):
            raise RuntimeError("Weiszfeld objective increased; numerical breakdown")
        moved = float(np.linalg.norm(x_new - x))
        x = x_new
        objective = new_objective
        if moved < tol:
            return x, True
    return x, False


def geometric_median_fuse(
    candidates: CandidateSet,
    teacher_visibility: np.ndarray | None = None,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> PseudoLabel:
    """Per-frame geometric median of the candidates. Provenance is -1 (no
    single source), or -2 where the iteration hit max_iter without
    converging."""
    length = candidates.length
    positions = np.empty((length, 2))
    provenance = np.empty(length, dtype=np.int64)
    for t in range(length):
        median, converged = weiszfeld(candidates.positions[t], tol=tol, max_iter=max_iter)
        positions[t] = median
        provenance[t] = -1 if converged else -2
    visibility = _majority_visibility(teacher_visibility, length, candidates.num_candidates)
    traj = Trajectory(start=candidates.start, positions=positions, visibility=visibility)
    return PseudoLabel(trajectory=traj, provenance=provenance, scores=None)


def _agreement_indices(frame_positions: np.ndarray) -> int:
    """Index minimizing the mean distance to the other candidates (ties: lowest)."""
    m = frame_positions.shape[0]
    if m == 1:
        return 0
    diff = frame_positions[:, None, :] - frame_positions[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    mean_to_others = dist.sum(axis=1) / (m - 1)
    return int(mean_to_others.argmin())


def agreement_select(
    candidates: CandidateSet, teacher_visibility: np.ndarray | None = None,
) -> PseudoLabel:
    indices = np.array(
        [_agreement_indices(candidates.positions[t]) for t in range(candidates.length)],
        dtype=np.int64,
    )
    visibility = _majority_visibility(
        teacher_visibility, candidates.length, candidates.num_candidates
    )
    return _indexed_label(
        candidates, indices, visibility, _one_hot_scores(indices, candidates.num_candidates)
    )


def kalman_cv_select(
    candidates: CandidateSet, teacher_visibility: np.ndarray | None = None,
) -> PseudoLabel:
    """Constant-velocity selection: frame 0 by the agreement rule with zero
    velocity; afterwards pick the candidate nearest pos + vel, then trust the
    selection fully (pos <- selection, vel <- selection - previous pos)."""
    length = candidates.length
    indices = np.empty(length, dtype=np.int64)
    indices[0] = _agreement_indices(candidates.positions[0])
    pos = candidates.positions[0, indices[0]].copy()
    vel = np.zeros(2)
    for t in range(1, length):
        predicted = pos + vel
        dist = np.linalg.norm(candidates.positions[t] - predicted, axis=1)
        indices[t] = int(dist.argmin())
        selected = candidates.positions[t, indices[t]]
        vel = selected - pos
        pos = selected.copy()
    visibility = _majority_visibility(teacher_visibility, length, candidates.num_candidates)
    return _indexed_label(
        candidates, indices, visibility, _one_hot_scores(indices, candidates.num_candidates)
    )


def min_acceleration_select(
    candidates: CandidateSet, teacher_visibility: np.ndarray | None = None,
) -> PseudoLabel:
    """Pick the candidate closest to the constant-velocity extrapolation
    2*sel[t-1] - sel[t-2]; the first two frames use the agreement rule."""
    length = candidates.length
    indices = np.empty(length, dtype=np.int64)
    for t in range(min(2, length)):
        indices[t] = _agreement_indices(candidates.positions[t])
    for t in range(2, length):
        prev = candidates.positions[t - 1, indices[t - 1]]
        prev2 = candidates.positions[t - 2, indices[t - 2]]
        extrapolated = 2.0 * prev - prev2
        dist = np.linalg.norm(candidates.positions[t] - extrapolated, axis=1)
        indices[t] = int(dist.argmin())
    visibility = _majority_visibility(teacher_visibility, length, candidates.num_candidates)
    return _indexed_label(
        candidates, indices, visibility, _one_hot_scores(indices, candidates.num_candidates)
    )


# --- query sampling -----------------------------------------------------------


def _intensity(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.ndim == 3:
        return np.linalg.norm(frame, axis=-1)
    raise ValueError(f"frames must be (H, W) or (H, W, C), got shape {frame.shape}")


def _corner_score(intensity: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(intensity)
    return np.hypot(gx, gy)


def _top_local_maxima(score: np.ndarray, count: int) -> list[tuple[float, float]]:
    """Up to count local maxima with positive score, strongest first; ties
    break lexicographically by (y, x)."""
    local_max = score == ndimage.maximum_filter(score, size=3, mode="nearest")
    ys, xs = np.nonzero(local_max & (score > 0))
    if len(ys) == 0:
        return []
    values = score[ys, xs]
    ranking = np.lexsort((xs, ys, -values))
    picked = ranking[:count]
    return [(float(xs[i]), float(ys[i])) for i in picked]


def sample_queries(
    frames: Sequence[np.ndarray] | np.ndarray,
    n: int,
    t0_frames: Sequence[int] | None = None,
    seed: int = 0,
    keypoint_detector: Callable[[np.ndarray], np.ndarray] | None = None,
) -> list[QueryPoint]:
    """Sample n query points over the given query frames.

    ceil(2n/3) slots come from a keypoint detector (default: gradient-
    magnitude corner score on the per-frame intensity) and the rest from
    motion saliency (box-blurred absolute frame difference). Slots rotate
    round-robin over the query frames. Any deficit (flat score maps, static
    video) is filled with uniformly random points. By default query frames
    are four uniformly spaced frames in the first half of the video.
    """
    frames = [np.asarray(f) for f in frames]
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    t = len(frames)
    if t == 0:
        raise ValueError("need at least one frame")
    intensity = [_intensity(f) for f in frames]
    height, width = intensity[0].shape
    if n > height * width:
        raise ValueError(f"requested {n} queries but frames have {height * width} pixels")
    if t0_frames is None:
        half = max(t // 2, 1)
        t0_frames = sorted({int(round(v)) for v in np.linspace(0, half - 1, min(4, half))})
    t0_frames = [int(f) for f in t0_frames]
    for f in t0_frames:
        if not 0 <= f < t:
            raise ValueError(f"query frame {f} out of range [0, {t})")

    detector = keypoint_detector or _corner_score
    rng = np.random.default_rng(seed)
    n_keypoint = math.ceil(2 * n / 3)
    n_motion = n - n_keypoint

    slots_per_frame_kp: dict[int, int] = {f: 0 for f in t0_frames}
    slots_per_frame_mo: dict[int, int] = {f: 0 for f in t0_frames}
    for i in range(n_keypoint):
        slots_per_frame_kp[t0_frames[i % len(t0_frames)]] += 1
    for i in range(n_motion):
        slots_per_frame_mo[t0_frames[i % len(t0_frames)]] += 1

    queries: list[QueryPoint] = []
    deficit: list[int] = []  # frames still owed a random point
    for f in t0_frames:
        if slots_per_frame_kp[f]:
            points = _top_local_maxima(detector(intensity[f]), slots_per_frame_kp[f])
            for x, y in points:
                queries.append(QueryPoint(t0=f, pos=np.array([x, y])))
            deficit.extend([f] * (slots_per_frame_kp[f] - len(points)))
        if slots_per_frame_mo[f]:
            other = f - 1 if f > 0 else min(1, t - 1)
            diff = np.abs(intensity[f] - intensity[other])
            smoothed = ndimage.uniform_filter(diff, size=3, mode="nearest")
            points = _top_local_maxima(smoothed, slots_per_frame_mo[f])
            for x, y in points:
                queries.append(QueryPoint(t0=f, pos=np.array([x, y])))
            deficit.extend([f] * (slots_per_frame_mo[f] - len(points)))
    for f in deficit:
        pos = np.array([rng.uniform(0, width - 1), rng.uniform(0, height - 1)])
        queries.append(QueryPoint(t0=f, pos=pos))
    return queries
