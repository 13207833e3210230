"""Supervision of the verifier on perturbed synthetic tracks.

Targets are softmaxed negative candidate-to-truth distances at temperature
tau_s; the loss is visibility-masked cross-entropy, summed per track and
reduced over a batch as the mean over visible frames. Optimization is AdamW
(decoupled weight decay) under a cosine schedule with 1% linear warmup and
gradient-norm clipping at 1.0.

Desk-scale defaults: 2000 steps, batch 8 tracks of L = 24 frames, peak LR
3e-4 (the full-scale reference schedule peaks at 5e-4). Tracks are sampled
queried-first; batches use tracks visible at frame 0 so every track spans
the full clip. M is drawn once per step from {m_low..m_high} and shared by
the batch, keeping shapes rectangular; the per-track marginal is unchanged.

Training is deterministic given the seed and a fixed thread count. Epoch
shuffles are derived statelessly from (seed, epoch index), so resuming from
a checkpoint reproduces the uninterrupted run bit-exactly.
"""

from __future__ import annotations

import base64
import dataclasses
import io
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import torch

from .features import ModelConfig
from .perturb import PerturbationConfig, generate_candidates
from .trajectory import QueryPoint, ReliabilityScores, Trajectory
from .transformer import Verifier
from .world import SyntheticVideo, render_features

__all__ = [
    "TrainingConfig",
    "TrainResult",
    "TrainingDiverged",
    "Checkpoint",
    "target_distribution",
    "target_rows",
    "verifier_loss",
    "masked_cross_entropy",
    "make_verifier",
    "train",
    "gradient_check",
    "verifier_gradient_check",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)

_CKPT_MAGIC = b"TVCKPT00"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainingConfig:
    tau_s: float = 0.3
    max_steps: int = 2000
    epochs: int | None = None  # one pass over the shuffled track list; caps jointly with max_steps
    batch_size: int = 8
    peak_lr: float = 3e-4
    warmup_frac: float = 0.01
    weight_decay: float = 1e-3
    clip_norm: float = 1.0
    m_low: int = 6
    m_high: int = 12
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def validate(self) -> None:
        if not self.tau_s > 0:
            raise ValueError(f"tau_s must be > 0, got {self.tau_s}")
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.max_steps < 0:
            raise ValueError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.peak_lr > 0:
            raise ValueError(f"peak_lr must be > 0, got {self.peak_lr}")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError(f"warmup_frac must be in [0, 1], got {self.warmup_frac}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 1 <= self.m_low <= self.m_high:
            raise ValueError(f"need 1 <= m_low <= m_high, got [{self.m_low}, {self.m_high}]")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_checkpoint: str | None):
        where = f"; last good checkpoint: {last_checkpoint}" if last_checkpoint else ""
        super().__init__(f"non-finite loss at step {step}{where}")
        self.step = step
        self.last_checkpoint = last_checkpoint


# --- targets and loss --------------------------------------------------------


def target_distribution(candidates_t: np.ndarray, gt_t: np.ndarray, tau_s: float) -> np.ndarray:
    """Softmax over negative candidate-to-truth distances for one frame.

    candidates_t: (M, 2), gt_t: (2,). Invariant to adding a constant to all
    distances and equivariant to candidate permutation.
    """
    if not tau_s > 0:
        raise ValueError(f"tau_s must be > 0, got {tau_s}")
    candidates_t = np.asarray(candidates_t, dtype=np.float64)
    gt_t = np.asarray(gt_t, dtype=np.float64)
    dist = np.linalg.norm(candidates_t - gt_t, axis=-1)
    logits = -dist / tau_s
    logits = logits - logits.max()
    exp = np.exp(logits)
    return exp / exp.sum()


def target_rows(candidate_positions: np.ndarray, gt_positions: np.ndarray, tau_s: float) -> np.ndarray:
    """target_distribution applied per frame: (L, M, 2), (L, 2) -> (L, M)."""
    if not tau_s > 0:
        raise ValueError(f"tau_s must be > 0, got {tau_s}")
    dist = np.linalg.norm(
        np.asarray(candidate_positions, dtype=np.float64)
        - np.asarray(gt_positions, dtype=np.float64)[:, None, :],
        axis=-1,
    )
    logits = -dist / tau_s
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    return exp / exp.sum(axis=1, keepdims=True)


def verifier_loss(
    pred: ReliabilityScores | np.ndarray,
    targets: np.ndarray,
    visibility: np.ndarray,
) -> float:
    """Sum over visible frames of CE(target, predicted); all-occluded -> 0.

    Per-track reference implementation; the batched torch reduction in
    masked_cross_entropy averages this quantity over visible frames.
    """
    probs = pred.scores if isinstance(pred, ReliabilityScores) else np.asarray(pred, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=bool)
    if probs.shape != targets.shape or probs.shape[0] != visibility.shape[0]:
        raise ValueError(
            f"shape mismatch: pred {probs.shape}, targets {targets.shape}, "
            f"visibility {visibility.shape}"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        log_terms = np.where(targets > 0, targets * np.log(probs), 0.0)
    ce = -log_terms.sum(axis=1)
    return float(ce[visibility].sum())


def masked_cross_entropy(
    logits: torch.Tensor, targets: torch.Tensor, visibility: torch.Tensor,
) -> torch.Tensor:
    """Batched loss: mean over visible frames of CE(target, softmax(logits)).

    logits/targets (..., L, M); visibility (..., L) float or bool mask.
    """
    logp = torch.log_softmax(logits, dim=-1)
    ce = -(targets * logp).sum(dim=-1)
    mask = visibility.to(logits.dtype)
    return (ce * mask).sum() / mask.sum().clamp_min(1.0)


# --- model + checkpoint ------------------------------------------------------


def make_verifier(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> Verifier:
    """Seeded, dtype-cast verifier; leaves the global torch RNG untouched."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        verifier = Verifier(cfg)
    return verifier.to(dtype)


@dataclass
class Checkpoint:
    verifier: Verifier
    model_config: ModelConfig
    train_config: TrainingConfig | None
    step: int
    optimizer_state: dict[str, Any] | None
    np_rng_state: dict[str, Any] | None
    torch_rng_state: torch.Tensor | None
    dtype: torch.dtype


def _dtype_name(dtype: torch.dtype) -> str:
    return {torch.float32: "float32", torch.float64: "float64"}[dtype]


def _named_arrays(verifier: Verifier, optimizer: torch.optim.Optimizer | None):
    for name, p in verifier.named_parameters():
        yield name, p.detach().cpu().double().numpy()
    if optimizer is not None:
        names = [n for n, _ in verifier.named_parameters()]
        params = [p for _, p in verifier.named_parameters()]
        for name, p in zip(names, params):
            state = optimizer.state.get(p)
            if not state:
                continue
            yield f"opt.{name}.exp_avg", state["exp_avg"].detach().cpu().double().numpy()
            yield f"opt.{name}.exp_avg_sq", state["exp_avg_sq"].detach().cpu().double().numpy()


def save_checkpoint(
    path: str | Path,
    verifier: Verifier,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    train_config: TrainingConfig | None = None,
    np_rng_state: dict[str, Any] | None = None,
    torch_rng_state: torch.Tensor | None = None,
) -> None:
    """Single-file container: version header, config echo, named float64 LE
    arrays, optimizer moments, RNG state. Round-trips bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = list(_named_arrays(verifier, optimizer))

    opt_steps: dict[str, float] = {}
    if optimizer is not None:
        names = [n for n, _ in verifier.named_parameters()]
        params = [p for _, p in verifier.named_parameters()]
        for name, p in zip(names, params):
            state = optimizer.state.get(p)
            if state:
                opt_steps[name] = float(state["step"])

    header = {
        "version": _CKPT_VERSION,
        "step": int(step),
        "dtype": _dtype_name(verifier.dtype),
        "model_config": dataclasses.asdict(verifier.cfg),
        "train_config": dataclasses.asdict(train_config) if train_config else None,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "optimizer_steps": opt_steps or None,
        "np_rng": _jsonify_np_state(np_rng_state) if np_rng_state else None,
        "torch_rng": (
            base64.b64encode(torch_rng_state.numpy().tobytes()).decode("ascii")
            if torch_rng_state is not None else None
        ),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<I", _CKPT_VERSION))
    buf.write(struct.pack("<Q", len(header_bytes)))
    buf.write(header_bytes)
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.write_bytes(buf.getvalue())


def _jsonify_np_state(state: dict[str, Any]) -> dict[str, Any]:
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__ndarray__": x.tolist(), "dtype": str(x.dtype)}
        if isinstance(x, (np.integer,)):
            return int(x)
        return x
    return conv(state)


def _unjsonify_np_state(state: Any) -> Any:
    if isinstance(state, dict):
        if "__ndarray__" in state:
            return np.asarray(state["__ndarray__"], dtype=state["dtype"])
        return {k: _unjsonify_np_state(v) for k, v in state.items()}
    return state


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(_CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off : off + header_len].decode("utf-8"))
    off += header_len

    dtype = {"float32": torch.float32, "float64": torch.float64}[header["dtype"]]
    model_cfg = ModelConfig(**header["model_config"])
    train_cfg = None
    if header["train_config"] is not None:
        tc = dict(header["train_config"])
        train_cfg = TrainingConfig(**tc)

    tensors: dict[str, torch.Tensor] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += count * 8
        tensors[entry["name"]] = torch.from_numpy(arr.copy())

    verifier = make_verifier(model_cfg, seed=0, dtype=dtype)
    state_dict = {
        name: tensors[name].to(dtype)
        for name, _ in verifier.named_parameters()
    }
    verifier.load_state_dict(state_dict)

    optimizer_state = None
    if header["optimizer_steps"]:
        names = [n for n, _ in verifier.named_parameters()]
        opt_state: dict[int, dict[str, torch.Tensor]] = {}
        for i, name in enumerate(names):
            if name not in header["optimizer_steps"]:
                continue
            opt_state[i] = {
                "step": torch.tensor(header["optimizer_steps"][name]),
                "exp_avg": tensors[f"opt.{name}.exp_avg"].to(dtype),
                "exp_avg_sq": tensors[f"opt.{name}.exp_avg_sq"].to(dtype),
            }
        optimizer_state = {"state": opt_state}

    torch_rng = None
    if header["torch_rng"]:
        torch_rng = torch.from_numpy(
            np.frombuffer(base64.b64decode(header["torch_rng"]), dtype=np.uint8).copy()
        )
    return Checkpoint(
        verifier=verifier,
        model_config=model_cfg,
        train_config=train_cfg,
        step=int(header["step"]),
        optimizer_state=optimizer_state,
        np_rng_state=_unjsonify_np_state(header["np_rng"]) if header["np_rng"] else None,
        torch_rng_state=torch_rng,
        dtype=dtype,
    )


# --- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    verifier: Verifier
    log: list[dict[str, float]]
    steps_run: int
    checkpoint_path: str | None


@dataclass
class _Track:
    video_index: int
    query: QueryPoint
    gt: Trajectory
    neighbors: tuple[Trajectory, ...]


def _full_clip_tracks(videos: Sequence[SyntheticVideo]) -> list[_Track]:
    """Queried-first tracks visible at frame 0, with same-range neighbors."""
    tracks: list[_Track] = []
    for vi, video in enumerate(videos):
        trajs = []
        for anchor in video.anchors:
            mask = anchor.visibility_mask()
            trajs.append(Trajectory(start=0, positions=anchor.path, visibility=mask))
        for ai, traj in enumerate(trajs):
            if not traj.visibility[0]:
                continue
            neighbors = tuple(t for aj, t in enumerate(trajs) if aj != ai)
            query = QueryPoint(t0=0, pos=traj.positions[0])
            tracks.append(_Track(vi, query, traj, neighbors))
    return tracks


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 1000003, epoch]).permutation(n)


def _lr_at(step: int, total: int, cfg: TrainingConfig) -> float:
    warmup = max(1, int(round(cfg.warmup_frac * total)))
    if step < warmup:
        return cfg.peak_lr * (step + 1) / warmup
    if total <= warmup:
        return cfg.peak_lr
    progress = (step - warmup) / (total - warmup)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _render_volume(video: SyntheticVideo, dtype: torch.dtype) -> torch.Tensor:
    vol = np.stack([render_features(video, t) for t in range(video.frames)])
    return torch.from_numpy(vol).to(dtype)


def train(
    videos: Sequence[SyntheticVideo],
    cfg: TrainingConfig,
    model_cfg: ModelConfig | None = None,
    perturb_cfg: PerturbationConfig | None = None,
    *,
    dtype: torch.dtype = torch.float32,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    resume: Checkpoint | None = None,
    step_callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train the verifier on perturbed ground-truth tracks.

    All feature volumes are pre-rendered and held in memory
    (n_videos * T * H' * W' * d_raw floats), which desk-scale datasets fit
    comfortably.
    """
    cfg.validate()
    model_cfg = model_cfg or ModelConfig()
    perturb_cfg = perturb_cfg or PerturbationConfig()
    perturb_cfg.validate()
    if not videos:
        raise ValueError("training needs at least one video")

    tracks = _full_clip_tracks(videos)
    if not tracks:
        raise ValueError("no track is visible at frame 0; regenerate the dataset")
    n_tracks = len(tracks)
    steps_per_epoch = math.ceil(n_tracks / cfg.batch_size)
    total_steps = cfg.max_steps
    if cfg.epochs is not None:
        total_steps = min(total_steps, cfg.epochs * steps_per_epoch)

    if resume is not None:
        verifier = resume.verifier.to(dtype)
        start_step = resume.step
        sample_rng = np.random.default_rng(cfg.seed)
        if resume.np_rng_state is not None:
            sample_rng.bit_generator.state = resume.np_rng_state
        if resume.torch_rng_state is not None:
            torch.set_rng_state(resume.torch_rng_state.to(torch.uint8))
        else:
            torch.manual_seed(cfg.seed)
    else:
        verifier = make_verifier(model_cfg, cfg.seed, dtype)
        start_step = 0
        sample_rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)

    optimizer = torch.optim.AdamW(
        verifier.parameters(), lr=cfg.peak_lr, weight_decay=cfg.weight_decay,
    )
    if resume is not None and resume.optimizer_state is not None:
        skeleton = optimizer.state_dict()
        skeleton["state"] = resume.optimizer_state["state"]
        optimizer.load_state_dict(skeleton)

    volumes = [_render_volume(v, dtype) for v in videos]
    log: list[dict[str, float]] = []
    last_checkpoint: str | None = None
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "a" if resume is not None else "w", encoding="utf-8")

    try:
        for step in range(start_step, total_steps):
            epoch, within = divmod(step, steps_per_epoch)
            order = _epoch_order(cfg.seed, epoch, n_tracks)
            batch_ids = [
                int(order[(within * cfg.batch_size + j) % n_tracks])
                for j in range(cfg.batch_size)
            ]
            m = int(sample_rng.integers(cfg.m_low, cfg.m_high + 1))
            pcfg = dataclasses.replace(perturb_cfg, m_candidates=m)

            grids, queries, centers, targets, vis = [], [], [], [], []
            for ti in batch_ids:
                track = tracks[ti]
                cands = generate_candidates(track.gt, track.neighbors, pcfg, sample_rng)
                grids.append(volumes[track.video_index])
                queries.append(track.query.pos)
                centers.append(cands.positions)
                targets.append(target_rows(cands.positions, track.gt.positions, cfg.tau_s))
                vis.append(track.gt.visibility)

            grids_t = torch.stack(grids)
            queries_t = torch.from_numpy(np.stack(queries)).to(dtype)
            centers_t = torch.from_numpy(np.stack(centers)).to(dtype)
            targets_t = torch.from_numpy(np.stack(targets)).to(dtype)
            vis_t = torch.from_numpy(np.stack(vis)).to(dtype)

            logits = verifier(grids_t, queries_t, centers_t, train_mode=True)
            loss = masked_cross_entropy(logits, targets_t, vis_t)
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise TrainingDiverged(step, last_checkpoint)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(verifier.parameters(), cfg.clip_norm)
            lr = _lr_at(step, total_steps, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.step()

            entry = {"step": step, "loss": loss_val, "lr": lr}
            log.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            if step_callback is not None:
                step_callback(step, loss_val)

            if (
                checkpoint_path is not None
                and cfg.checkpoint_every
                and (step + 1) % cfg.checkpoint_every == 0
                and step + 1 < total_steps
            ):
                save_checkpoint(
                    checkpoint_path, verifier, optimizer, step + 1, cfg,
                    np_rng_state=sample_rng.bit_generator.state,
                    torch_rng_state=torch.get_rng_state(),
                )
                last_checkpoint = str(checkpoint_path)
    finally:
        if log_fh is not None:
            log_fh.close()

    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path, verifier, optimizer, total_steps, cfg,
            np_rng_state=sample_rng.bit_generator.state,
            torch_rng_state=torch.get_rng_state(),
        )
        last_checkpoint = str(checkpoint_path)
    return TrainResult(
        verifier=verifier, log=log, steps_run=total_steps - start_step,
        checkpoint_path=last_checkpoint,
    )


# --- gradient verification ---------------------------------------------------


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    named_params: Iterable[tuple[str, torch.nn.Parameter]],
    epsilon: float = 1e-5,
    coords_per_param: int = 4,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences, over a seeded coordinate sample of every parameter tensor.

    Relative error uses max(|fd|, |analytic|, 1e-6) as denominator, so
    coordinates at the finite-difference noise floor are compared absolutely.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    params = list(named_params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    rng = np.random.default_rng(seed)
    max_rel = 0.0
    for (name, p), grad in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = (
            grad.reshape(-1)
            if grad is not None
            else torch.zeros_like(flat)
        )
        n = flat.numel()
        count = min(coords_per_param, n)
        coords = rng.choice(n, size=count, replace=False)
        for c in coords:
            c = int(c)
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + epsilon
                loss_plus = float(loss_fn())
                flat[c] = orig - epsilon
                loss_minus = float(loss_fn())
                flat[c] = orig
            fd = (loss_plus - loss_minus) / (2.0 * epsilon)
            analytic = float(gflat[c])
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-6)
            max_rel = max(max_rel, rel)
    return max_rel


def verifier_gradient_check(
    verifier: Verifier,
    grids: torch.Tensor,
    query_pos: torch.Tensor,
    centers: torch.Tensor,
    targets: torch.Tensor,
    visibility: torch.Tensor,
    epsilon: float = 1e-5,
    coords_per_param: int = 4,
    seed: int = 0,
) -> float:
    """Gradient check of the full verifier loss; requires a float64 model,
    dropout off."""
    if verifier.dtype != torch.float64:
        raise ValueError("gradient verification requires a float64 model")

    def loss_fn() -> torch.Tensor:
        logits = verifier(grids, query_pos, centers, train_mode=False)
        return masked_cross_entropy(logits, targets, visibility)

    return gradient_check(
        loss_fn, list(verifier.named_parameters()), epsilon, coords_per_param, seed,
    )
