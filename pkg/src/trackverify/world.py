"""Synthetic feature-field videos with ground-truth point tracks.

Instead of RGB frames plus a frozen CNN encoder, the world synthesizes the
feature grids directly: each video is a set of moving appearance anchors,
and frame features are Gaussian-kernel splats of the anchor appearance
vectors plus i.i.d. noise. Appearance matching along the true track is
therefore learnable by construction, at desk scale.

Videos are pure functions of (config, seed): files store only config + seed
and features are re-rendered on demand.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Protocol

import numpy as np

from .trajectory import QueryPoint, Trajectory, dump_json, load_json

__all__ = [
    "WorldConfig",
    "AppearanceAnchor",
    "SyntheticVideo",
    "FeatureProvider",
    "VideoFeatureProvider",
    "generate_video",
    "render_features",
    "ground_truth_tracks",
    "queried_first_tracks",
    "save_video",
    "load_video",
    "write_dataset",
    "read_dataset",
]

# Occlusion interval lengths are drawn uniformly from {2..5}.
_OCC_LEN_LOW, _OCC_LEN_HIGH = 2, 5


@dataclass(frozen=True)
class WorldConfig:
    frames: int = 24  # T
    height: int = 64  # H'
    width: int = 64  # W'
    d_raw: int = 32
    n_anchors: int = 12
    sigma_app: float = 2.0  # Gaussian appearance kernel bandwidth, px
    noise_std: float = 0.02
    occlusion_rate: float = 0.15  # target fraction of occluded frames per anchor
    ou_theta: float = 0.3  # velocity mean reversion
    ou_sigma: float = 1.5  # velocity noise, px/frame

    def validate(self) -> None:
        if self.frames < 2:
            raise ValueError(f"frames must be >= 2, got {self.frames}")
        if self.height < 2 or self.width < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.height}x{self.width}")
        if self.d_raw < 1:
            raise ValueError(f"d_raw must be >= 1, got {self.d_raw}")
        if self.n_anchors < 1:
            raise ValueError(f"n_anchors must be >= 1, got {self.n_anchors}")
        if not self.sigma_app > 0:
            raise ValueError(f"sigma_app must be > 0, got {self.sigma_app}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.occlusion_rate < 1.0:
            raise ValueError(f"occlusion_rate must be in [0, 1), got {self.occlusion_rate}")
        if not 0.0 < self.ou_theta <= 1.0:
            raise ValueError(f"ou_theta must be in (0, 1], got {self.ou_theta}")
        if self.ou_sigma < 0:
            raise ValueError(f"ou_sigma must be >= 0, got {self.ou_sigma}")


@dataclass(frozen=True)
class AppearanceAnchor:
    """One moving point with a fixed unit appearance vector."""

    appearance: np.ndarray  # (d_raw,), unit norm
    path: np.ndarray  # (T, 2) pixels, inside frame bounds
    occlusion_intervals: tuple[tuple[int, int], ...]  # disjoint [a, b) within [0, T)
    sigma_app: float

    def __post_init__(self) -> None:
        appearance = np.ascontiguousarray(np.asarray(self.appearance, dtype=np.float64))
        path = np.ascontiguousarray(np.asarray(self.path, dtype=np.float64))
        if abs(float(np.linalg.norm(appearance)) - 1.0) > 1e-6:
            raise ValueError("anchor appearance must be unit norm")
        appearance.flags.writeable = False
        path.flags.writeable = False
        object.__setattr__(self, "appearance", appearance)
        object.__setattr__(self, "path", path)
        object.__setattr__(
            self, "occlusion_intervals", tuple((int(a), int(b)) for a, b in self.occlusion_intervals)
        )

    def visible(self, t: int) -> bool:
        return not any(a <= t < b for a, b in self.occlusion_intervals)

    def visibility_mask(self) -> np.ndarray:
        mask = np.ones(len(self.path), dtype=bool)
        for a, b in self.occlusion_intervals:
            mask[a:b] = False
        return mask


@dataclass(frozen=True)
class SyntheticVideo:
    config: WorldConfig
    anchors: tuple[AppearanceAnchor, ...]
    rng_seed: int

    @property
    def frames(self) -> int:
        return self.config.frames

    @property
    def height(self) -> int:
        return self.config.height

    @property
    def width(self) -> int:
        return self.config.width

    @property
    def d_raw(self) -> int:
        return self.config.d_raw

    @property
    def noise_std(self) -> float:
        return self.config.noise_std


class FeatureProvider(Protocol):
    """Per-frame dense feature grids. A real encoder would sit behind this;
    the default build uses the single synthetic level."""

    height: int
    width: int
    d_raw: int
    frames: int

    def features(self, t: int) -> np.ndarray:  # (H', W', d_raw)
        ...


def _reflect(value: float, velocity: float, lo: float, hi: float) -> tuple[float, float]:
    # Reflect into [lo, hi], flipping the velocity on each bounce.
    while value < lo or value > hi:
        if value < lo:
            value = 2.0 * lo - value
            velocity = -velocity
        elif value > hi:
            value = 2.0 * hi - value
            velocity = -velocity
    return value, velocity


def _sample_occlusions(rng: np.random.Generator, frames: int, rate: float) -> tuple[tuple[int, int], ...]:
    if rate <= 0.0:
        return ()
    mean_len = 0.5 * (_OCC_LEN_LOW + _OCC_LEN_HIGH)
    hazard = rate / ((1.0 - rate) * mean_len)
    intervals: list[tuple[int, int]] = []
    t = 0
    while t < frames:
        if rng.random() < hazard:
            length = int(rng.integers(_OCC_LEN_LOW, _OCC_LEN_HIGH + 1))
            end = min(t + length, frames)
            intervals.append((t, end))
            t = end + 1  # keep at least one visible frame between intervals
        else:
            t += 1
    return tuple(intervals)


def generate_video(config: WorldConfig, seed: int) -> SyntheticVideo:
    """Sample anchors with OU-velocity paths reflected at the borders.

    Deterministic: the same (config, seed) always yields the same video.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    x_hi = float(config.width - 1)
    y_hi = float(config.height - 1)
    anchors = []
    for _ in range(config.n_anchors):
        appearance = rng.normal(size=config.d_raw)
        norm = float(np.linalg.norm(appearance))
        if norm < 1e-12:  # astronomically unlikely; keeps the invariant airtight
            appearance = np.ones(config.d_raw)
            norm = float(np.linalg.norm(appearance))
        appearance = appearance / norm
        pos = np.array([rng.uniform(0.0, x_hi), rng.uniform(0.0, y_hi)])
        vel = rng.normal(0.0, config.ou_sigma, size=2)
        path = np.empty((config.frames, 2))
        path[0] = pos
        for t in range(1, config.frames):
            vel = (1.0 - config.ou_theta) * vel + config.ou_sigma * rng.normal(size=2)
            x, vx = _reflect(path[t - 1, 0] + vel[0], vel[0], 0.0, x_hi)
            y, vy = _reflect(path[t - 1, 1] + vel[1], vel[1], 0.0, y_hi)
            vel = np.array([vx, vy])
            path[t] = (x, y)
        intervals = _sample_occlusions(rng, config.frames, config.occlusion_rate)
        anchors.append(
            AppearanceAnchor(
                appearance=appearance,
                path=path,
                occlusion_intervals=intervals,
                sigma_app=config.sigma_app,
            )
        )
    return SyntheticVideo(config=config, anchors=tuple(anchors), rng_seed=int(seed))


def render_features(video: SyntheticVideo, t: int) -> np.ndarray:
    """Render frame t: visible anchors splat their appearance under a Gaussian
    kernel, plus N(0, noise_std^2) noise seeded by (video seed, t)."""
    cfg = video.config
    if not 0 <= t < cfg.frames:
        raise ValueError(f"frame {t} out of range [0, {cfg.frames})")
    grid = np.zeros((cfg.height, cfg.width, cfg.d_raw))
    xs = np.arange(cfg.width, dtype=np.float64)
    ys = np.arange(cfg.height, dtype=np.float64)
    inv_two_sigma2 = 1.0 / (2.0 * cfg.sigma_app**2)
    for anchor in video.anchors:
        if not anchor.visible(t):
            continue
        px, py = anchor.path[t]
        d2 = (xs[None, :] - px) ** 2 + (ys[:, None] - py) ** 2
        kernel = np.exp(-d2 * inv_two_sigma2)
        grid += kernel[:, :, None] * anchor.appearance
    if cfg.noise_std > 0:
        rng = np.random.default_rng([video.rng_seed, t])
        grid += rng.normal(0.0, cfg.noise_std, size=grid.shape)
    return grid


class VideoFeatureProvider:
    """FeatureProvider over a synthetic video, caching rendered frames."""

    def __init__(self, video: SyntheticVideo):
        self.video = video
        self.height = video.height
        self.width = video.width
        self.d_raw = video.d_raw
        self.frames = video.frames
        self._cache: dict[int, np.ndarray] = {}

    def features(self, t: int) -> np.ndarray:
        if t not in self._cache:
            grid = render_features(self.video, t)
            grid.flags.writeable = False
            self._cache[t] = grid
        return self._cache[t]


def ground_truth_tracks(video: SyntheticVideo, t0: int) -> list[tuple[QueryPoint, Trajectory]]:
    """Ground-truth tracks queried at frame t0; anchors occluded at t0 are skipped."""
    if not 0 <= t0 < video.frames:
        raise ValueError(f"t0 {t0} out of range [0, {video.frames})")
    out = []
    for anchor in video.anchors:
        if not anchor.visible(t0):
            continue
        query = QueryPoint(t0=t0, pos=anchor.path[t0])
        traj = Trajectory(
            start=t0,
            positions=anchor.path[t0:],
            visibility=anchor.visibility_mask()[t0:],
        )
        out.append((query, traj))
    return out


def queried_first_tracks(video: SyntheticVideo) -> list[tuple[QueryPoint, Trajectory]]:
    """One track per anchor, queried at the anchor's first visible frame."""
    out = []
    for anchor in video.anchors:
        mask = anchor.visibility_mask()
        visible_frames = np.flatnonzero(mask)
        if len(visible_frames) == 0:
            continue
        t0 = int(visible_frames[0])
        query = QueryPoint(t0=t0, pos=anchor.path[t0])
        out.append((query, Trajectory(start=t0, positions=anchor.path[t0:], visibility=mask[t0:])))
    return out


# --- dataset files ----------------------------------------------------------


def _config_to_obj(config: WorldConfig) -> dict[str, Any]:
    return {k: v for k, v in dataclasses.asdict(config).items()}


def _config_from_obj(obj: dict[str, Any]) -> WorldConfig:
    known = {f.name for f in dataclasses.fields(WorldConfig)}
    unknown = set(obj) - known
    if unknown:
        raise ValueError(f"unknown world config keys: {sorted(unknown)}")
    return WorldConfig(**obj)


def save_video(video: SyntheticVideo, path: str | Path) -> None:
    dump_json({"config": _config_to_obj(video.config), "seed": video.rng_seed}, path)


def load_video(path: str | Path) -> SyntheticVideo:
    obj = load_json(path)
    return generate_video(_config_from_obj(obj["config"]), int(obj["seed"]))


def video_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0])


def write_dataset(out_dir: str | Path, config: WorldConfig, n_videos: int, seed: int) -> list[str]:
    """Write a manifest plus one config+seed file per video; returns video ids."""
    config.validate()
    if n_videos < 1:
        raise ValueError(f"n_videos must be >= 1, got {n_videos}")
    out_dir = Path(out_dir)
    ids = []
    videos = []
    for i in range(n_videos):
        vid = f"video_{i:04d}"
        vseed = video_seed(seed, i)
        dump_json({"config": _config_to_obj(config), "seed": vseed}, out_dir / f"{vid}.json")
        ids.append(vid)
        videos.append({"id": vid, "seed": vseed})
    dump_json({"config": _config_to_obj(config), "seed": int(seed), "videos": videos},
              out_dir / "manifest.json")
    return ids


def read_dataset(dataset_dir: str | Path) -> list[tuple[str, SyntheticVideo]]:
    """Load every video listed in the manifest (regenerated from config + seed)."""
    dataset_dir = Path(dataset_dir)
    manifest = load_json(dataset_dir / "manifest.json")
    config = _config_from_obj(manifest["config"])
    out = []
    for entry in manifest["videos"]:
        out.append((entry["id"], generate_video(config, int(entry["seed"]))))
    return out


def iter_dataset(dataset_dir: str | Path) -> Iterator[tuple[str, SyntheticVideo]]:
    yield from read_dataset(dataset_dir)
