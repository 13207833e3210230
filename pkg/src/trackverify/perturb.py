"""Stochastic corruption of ground-truth tracks into training candidates.

Six perturbation types, each triggered independently with a fixed
probability, stack on top of light base Gaussian noise:

  1. stable:     smoothed Gaussian wobble of 2-4 px
  2. gradual:    slow drift, either a ramped offset or soft blending toward a
                 neighbor 16-32 px away
  3. long_drift: offset growing linearly to 8-64 px at the final frame
  4. spike:      1-3 isolated spikes of ~8 px lasting 1-2 frames
  5. jump:       from a random frame on, a 32-128 px offset or following a
                 neighbor
  6. switch:     the whole track replaced by a visible neighbor

A triggered switch replaces the base track outright (base noise discarded);
any other triggered types still stack on top of the replacement. Trigger
flags for all six types are drawn first, in the order above, then base noise,
then per-type parameters in application order (switch, stable, gradual,
long_drift, spike, jump), so outputs are deterministic given the rng state
and trigger rates never depend on neighbor availability.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trajectory import CandidateSet, Trajectory

__all__ = ["PerturbationConfig", "PERTURB_TYPES", "perturb_track", "generate_candidates"]

logger = logging.getLogger(__name__)

PERTURB_TYPES = ("stable", "gradual", "long_drift", "spike", "jump", "switch")


@dataclass(frozen=True)
class PerturbationConfig:
    m_candidates: int = 6
    base_noise_std: float = 1.0
    p_stable: float = 0.5
    p_gradual: float = 0.4
    p_long_drift: float = 0.3
    p_spike: float = 0.3
    p_jump: float = 0.1
    p_switch: float = 0.1
    stable_mag: tuple[float, float] = (2.0, 4.0)
    stable_window: tuple[int, int] = (3, 5)
    gradual_mag: tuple[float, float] = (16.0, 32.0)  # ramp magnitude and blend-neighbor distance band
    blend_end: tuple[float, float] = (0.3, 1.0)  # final blending weight
    long_drift_mag: tuple[float, float] = (8.0, 64.0)
    spike_mag: tuple[float, float] = (6.0, 10.0)
    spike_count: tuple[int, int] = (1, 3)
    spike_frames: tuple[int, int] = (1, 2)
    jump_mag: tuple[float, float] = (32.0, 128.0)

    def probabilities(self) -> tuple[float, ...]:
        return (self.p_stable, self.p_gradual, self.p_long_drift,
                self.p_spike, self.p_jump, self.p_switch)

    def validate(self) -> None:
        if self.m_candidates < 1:
            raise ValueError(f"m_candidates must be >= 1, got {self.m_candidates}")
        if self.base_noise_std < 0:
            raise ValueError(f"base_noise_std must be >= 0, got {self.base_noise_std}")
        for name, p in zip(PERTURB_TYPES, self.probabilities()):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"p_{name} must be in [0, 1], got {p}")
        for name in ("stable_mag", "gradual_mag", "blend_end", "long_drift_mag",
                     "spike_mag", "jump_mag"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be a positive ordered range, got ({lo}, {hi})")
        for name in ("stable_window", "spike_count", "spike_frames"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise ValueError(f"{name} must be an ordered range of ints >= 1, got ({lo}, {hi})")


def _unit(rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([np.cos(angle), np.sin(angle)])


def _uniform(rng: np.random.Generator, rng_pair: tuple[float, float]) -> float:
    return float(rng.uniform(rng_pair[0], rng_pair[1]))


def _randint(rng: np.random.Generator, rng_pair: tuple[int, int]) -> int:
    return int(rng.integers(rng_pair[0], rng_pair[1] + 1))


def _pick(rng: np.random.Generator, items: Sequence[Trajectory]) -> Trajectory:
    return items[int(rng.integers(len(items)))]


def _smooth(noise: np.ndarray, window: int) -> np.ndarray:
    # convolve 'same' returns max(L, window) samples, so cap at track length
    window = min(window, noise.shape[0])
    kernel = np.ones(window) / window
    out = np.empty_like(noise)
    for axis in range(noise.shape[1]):
        out[:, axis] = np.convolve(noise[:, axis], kernel, mode="same")
    return out


def perturb_track(
    gt: Trajectory,
    neighbors: Sequence[Trajectory],
    cfg: PerturbationConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Corrupt one ground-truth track; returns (positions (L, 2), triggered types).

    Neighbor-dependent types (switch, blend, jump-follow) are silently skipped
    when no suitable neighbor exists; other triggered types still apply.
    """
    cfg.validate()
    L = gt.length
    for nb in neighbors:
        if nb.start != gt.start or nb.length != L:
            raise ValueError(
                f"neighbor covers {nb.length} frames from {nb.start}, "
                f"ground truth covers {L} frames from {gt.start}"
            )

    triggered = tuple(
        name for name, p in zip(PERTURB_TYPES, cfg.probabilities()) if rng.random() < p
    )
    base_noise = rng.normal(0.0, 1.0, size=(L, 2)) * cfg.base_noise_std
    visible_neighbors = [nb for nb in neighbors if bool(nb.visibility.any())]

    if "switch" in triggered:
        if visible_neighbors:
            out = _pick(rng, visible_neighbors).positions.copy()
        else:
            logger.debug("switch triggered with no visible neighbor; skipped")
            out = gt.positions + base_noise
    else:
        out = gt.positions + base_noise

    if "stable" in triggered:
        amp = _uniform(rng, cfg.stable_mag)
        window = _randint(rng, cfg.stable_window)
        out = out + _smooth(rng.normal(0.0, amp, size=(L, 2)), window)

    if "gradual" in triggered:
        blend = rng.random() < 0.5
        applied = False
        if blend:
            lo, hi = cfg.gradual_mag
            eligible = []
            for nb in visible_neighbors:
                both = gt.visibility & nb.visibility
                if not both.any():
                    continue
                dist = float(
                    np.linalg.norm(nb.positions[both] - gt.positions[both], axis=1).mean()
                )
                if lo <= dist <= hi:
                    eligible.append(nb)
            if eligible:
                nb = _pick(rng, eligible)
                w_end = _uniform(rng, cfg.blend_end)
                w = np.linspace(0.0, w_end, L)[:, None]
                out = (1.0 - w) * out + w * nb.positions
                applied = True
            else:
                logger.debug("gradual blend had no neighbor in range; using ramp")
        if not applied:
            direction = _unit(rng)
            mag = _uniform(rng, cfg.gradual_mag)
            start = int(rng.integers(0, max(L - 1, 1)))  # ramp start; L=1 leaves no room to drift
            ramp = np.zeros(L)
            if start < L - 1:
                ramp[start:] = np.linspace(0.0, 1.0, L - start)
            out = out + direction * mag * ramp[:, None]

    if "long_drift" in triggered:
        direction = _unit(rng)
        mag = _uniform(rng, cfg.long_drift_mag)
        out = out + direction * mag * np.linspace(0.0, 1.0, L)[:, None]

    if "spike" in triggered:
        n_spikes = _randint(rng, cfg.spike_count)
        for _ in range(n_spikes):
            frame = int(rng.integers(0, L))
            duration = _randint(rng, cfg.spike_frames)
            mag = _uniform(rng, cfg.spike_mag)
            direction = _unit(rng)
            out[frame : frame + duration] += direction * mag

    if "jump" in triggered:
        follow = rng.random() < 0.5
        frame = int(rng.integers(0, L))
        if follow and visible_neighbors:
            nb = _pick(rng, visible_neighbors)
            out[frame:] = nb.positions[frame:]
        else:
            if follow:
                logger.debug("jump-follow had no visible neighbor; using offset")
            direction = _unit(rng)
            mag = _uniform(rng, cfg.jump_mag)
            out[frame:] = out[frame:] + direction * mag

    return out, triggered


def generate_candidates(
    gt: Trajectory,
    neighbors: Sequence[Trajectory],
    cfg: PerturbationConfig,
    rng: np.random.Generator,
) -> CandidateSet:
    """M independent perturbations of one track; labels record triggered types."""
    cfg.validate()
    if not 1 <= cfg.m_candidates <= 64:
        raise ValueError(f"m_candidates must be in [1, 64], got {cfg.m_candidates}")
    columns = []
    labels = []
    for _ in range(cfg.m_candidates):
        positions, triggered = perturb_track(gt, neighbors, cfg, rng)
        columns.append(positions)
        labels.append("+".join(triggered) if triggered else "clean")
    return CandidateSet(
        start=gt.start,
        positions=np.stack(columns, axis=1),
        source_labels=tuple(labels),
    )
