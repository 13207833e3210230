"""Core track data types, geometry utilities, and the JSON interchange format.

Positions are continuous pixel coordinates (x, y) at the working resolution.
A track starting at frame t0 stores per-frame data in arrays of length
L = T - t0; array index i corresponds to frame t0 + i, so the query frame
itself occupies index 0. Candidates may lie outside the frame bounds
(trackers drift off-frame); coordinates are only clamped inside feature
sampling, never in geometry.

All types are immutable value objects and all operations are pure functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

__all__ = [
    "QueryPoint",
    "Trajectory",
    "CandidateSet",
    "ReliabilityScores",
    "euclidean_errors",
    "displacements",
    "trajectory_to_obj",
    "trajectory_from_obj",
    "candidates_to_obj",
    "candidates_from_obj",
    "dump_json",
    "load_json",
]

ROW_SUM_TOL = 1e-5


def _frozen_array(values: Any, dtype: Any, shape_desc: str, ndim: int) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim != ndim:
        raise ValueError(f"expected {shape_desc}, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class QueryPoint:
    """A (frame, position) pair identifying the point to track.

    Frame-bound containment (pos inside [0, W) x [0, H)) can only be checked
    where the world dimensions are known and is validated there.
    """

    t0: int
    pos: np.ndarray  # (2,) float64, pixels (x, y)

    def __post_init__(self) -> None:
        pos = _frozen_array(self.pos, np.float64, "a 2-vector", 1)
        if pos.shape != (2,):
            raise ValueError(f"query position must be a 2-vector, got shape {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("query position must be finite")
        if self.t0 < 0:
            raise ValueError(f"t0 must be >= 0, got {self.t0}")
        object.__setattr__(self, "pos", pos)


@dataclass(frozen=True)
class Trajectory:
    """Per-frame 2D positions and visibility for one tracked point."""

    start: int
    positions: np.ndarray  # (L, 2) float64
    visibility: np.ndarray  # (L,) bool

    def __post_init__(self) -> None:
        positions = _frozen_array(self.positions, np.float64, "(L, 2) positions", 2)
        visibility = _frozen_array(self.visibility, bool, "(L,) visibility", 1)
        if positions.shape[1] != 2:
            raise ValueError(f"positions must be (L, 2), got shape {positions.shape}")
        if len(positions) != len(visibility):
            raise ValueError(
                f"positions cover {len(positions)} frames but visibility covers "
                f"{len(visibility)}"
            )
        if len(positions) < 1:
            raise ValueError("a trajectory must cover at least one frame")
        if self.start < 0:
            raise ValueError(f"start frame must be >= 0, got {self.start}")
        if not np.all(np.isfinite(positions)):
            raise ValueError("trajectory positions must be finite")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "visibility", visibility)

    @property
    def length(self) -> int:
        return len(self.positions)

    def frame_range(self) -> range:
        return range(self.start, self.start + self.length)


@dataclass(frozen=True)
class CandidateSet:
    """M alternative position hypotheses per frame for one query."""

    start: int
    positions: np.ndarray  # (L, M, 2) float64
    source_labels: tuple[str, ...]  # length M

    def __post_init__(self) -> None:
        positions = _frozen_array(self.positions, np.float64, "(L, M, 2) positions", 3)
        labels = tuple(str(s) for s in self.source_labels)
        if positions.shape[2] != 2:
            raise ValueError(f"positions must be (L, M, 2), got shape {positions.shape}")
        if positions.shape[0] < 1:
            raise ValueError("a candidate set must cover at least one frame")
        if positions.shape[1] < 1:
            raise ValueError("a candidate set needs at least one candidate")
        if len(labels) != positions.shape[1]:
            raise ValueError(
                f"{positions.shape[1]} candidates but {len(labels)} source labels"
            )
        if self.start < 0:
            raise ValueError(f"start frame must be >= 0, got {self.start}")
        if not np.all(np.isfinite(positions)):
            raise ValueError("candidate positions must be finite")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "source_labels", labels)

    @property
    def length(self) -> int:
        return self.positions.shape[0]

    @property
    def num_candidates(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class ReliabilityScores:
    """Per-frame probability distributions over candidates."""

    scores: np.ndarray  # (L, M), rows sum to 1

    def __post_init__(self) -> None:
        scores = _frozen_array(self.scores, np.float64, "(L, M) scores", 2)
        if scores.size == 0:
            raise ValueError("scores must be non-empty")
        if scores.min() < -1e-9 or scores.max() > 1.0 + 1e-9:
            raise ValueError("scores must lie in [0, 1]")
        row_sums = scores.sum(axis=1)
        worst = np.abs(row_sums - 1.0).max()
        if worst > ROW_SUM_TOL:
            raise ValueError(f"score rows must sum to 1 within {ROW_SUM_TOL}, worst |sum-1| = {worst}")
        object.__setattr__(self, "scores", scores)

    @property
    def length(self) -> int:
        return self.scores.shape[0]

    @property
    def num_candidates(self) -> int:
        return self.scores.shape[1]


def _check_aligned(candidates: CandidateSet, other_start: int, other_len: int, other_name: str) -> None:
    if candidates.start != other_start or candidates.length != other_len:
        raise ValueError(
            f"frame ranges differ: candidates cover {candidates.length} frames from "
            f"{candidates.start}, {other_name} covers {other_len} frames from {other_start}"
        )


def euclidean_errors(candidates: CandidateSet, gt: Trajectory) -> np.ndarray:
    """Per-frame Euclidean distance of every candidate to the ground truth, (L, M)."""
    _check_aligned(candidates, gt.start, gt.length, "ground truth")
    diff = candidates.positions - gt.positions[:, None, :]
    return np.linalg.norm(diff, axis=-1)


def displacements(candidates: CandidateSet, query: QueryPoint) -> np.ndarray:
    """Per-frame displacement of every candidate from the query position, (L, M, 2)."""
    if candidates.start != query.t0:
        raise ValueError(
            f"candidates start at frame {candidates.start} but the query is at frame {query.t0}"
        )
    return candidates.positions - query.pos


# --- JSON interchange ------------------------------------------------------
#
# Trajectories: {"start": int, "positions": [[x, y], ...], "visibility": [bool, ...]}
# Candidate sets use "positions" shaped [L][M][2] and add "sources": [str, ...];
# they may carry extra keys (e.g. "query", "visibility" votes, "video") which
# round-trip untouched. Floats are serialized with repr, which preserves the
# exact value.


def trajectory_to_obj(traj: Trajectory) -> dict[str, Any]:
    return {
        "start": int(traj.start),
        "positions": [[float(x), float(y)] for x, y in traj.positions],
        "visibility": [bool(v) for v in traj.visibility],
    }


def trajectory_from_obj(obj: dict[str, Any]) -> Trajectory:
    for key in ("start", "positions", "visibility"):
        if key not in obj:
            raise ValueError(f"trajectory object is missing key {key!r}")
    return Trajectory(
        start=int(obj["start"]),
        positions=np.asarray(obj["positions"], dtype=np.float64),
        visibility=np.asarray(obj["visibility"], dtype=bool),
    )


def candidates_to_obj(candidates: CandidateSet, **extra: Any) -> dict[str, Any]:
    obj: dict[str, Any] = {
        "start": int(candidates.start),
        "positions": [
            [[float(x), float(y)] for x, y in frame] for frame in candidates.positions
        ],
        "sources": list(candidates.source_labels),
    }
    for key, value in extra.items():
        if value is not None:
            obj[key] = value
    return obj


def candidates_from_obj(obj: dict[str, Any]) -> tuple[CandidateSet, dict[str, Any]]:
    """Parse a candidate-set object; returns (candidates, full object) so callers
    can read optional keys ("query", "visibility", ...)."""
    for key in ("start", "positions", "sources"):
        if key not in obj:
            raise ValueError(f"candidate object is missing key {key!r}")
    cands = CandidateSet(
        start=int(obj["start"]),
        positions=np.asarray(obj["positions"], dtype=np.float64),
        source_labels=tuple(obj["sources"]),
    )
    return cands, obj


def dump_json(obj: Any, path: str | Path) -> None:
    """Write canonical JSON: sorted keys, two-space indent, trailing newline.

    Output bytes depend only on the object, so identical inputs produce
    byte-identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_json(path: str | Path) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
