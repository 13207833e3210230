"""Localized descriptor extraction around the query and candidate positions.

Pipeline per track: bilinearly sample the query-frame features at the query
position, refine with a stack of deformable-attention layers whose offsets
and weights are predicted from the running reference (layer 1 sees the
projected query sample, so every candidate descriptor is computed relative
to the same query appearance), then fuse each refined feature with a
sinusoidal embedding of its scaled displacement from the query, the raw
displacement, and a query/candidate identity embedding.

Offset and weight predictors are zero-initialized, so an untrained first
pass reduces to plain bilinear sampling with uniform point weights.

Sampling clamps coordinates to the grid; off-frame candidates therefore get
border features, while their geometry stays unclamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .trajectory import CandidateSet, QueryPoint
from .world import FeatureProvider

__all__ = [
    "ModelConfig",
    "LocalDescriptors",
    "FeatureExtractor",
    "bilinear_sample",
    "sinusoidal_embedding",
    "build_descriptors",
]

SINUSOID_DIM = 32  # 16 per axis: 8 frequencies x (sin, cos)
_N_FREQ = SINUSOID_DIM // 4


@dataclass(frozen=True)
class ModelConfig:
    d_raw: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_points: int = 4
    n_deform_layers: int = 3
    n_decoder_layers: int = 3
    d_id: int = 16
    emb_scale_init: float = 16.0
    tau_init: float = 0.1
    temporal_len: int = 24
    ffn_mult: int = 4
    dropout: float = 0.1

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}")
        for name in ("d_raw", "d_model", "n_heads", "n_points", "n_deform_layers",
                     "n_decoder_layers", "d_id", "temporal_len", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.tau_init > 0:
            raise ValueError(f"tau_init must be > 0, got {self.tau_init}")
        if not self.emb_scale_init > 0:
            raise ValueError(f"emb_scale_init must be > 0, got {self.emb_scale_init}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class LocalDescriptors:
    """Temporally aligned descriptors: query (L, D) with identical rows,
    candidates (L, M, D)."""

    query: torch.Tensor
    candidates: torch.Tensor

    def __post_init__(self) -> None:
        if self.query.ndim != 2 or self.candidates.ndim != 3:
            raise ValueError(
                f"expected (L, D) and (L, M, D), got {tuple(self.query.shape)} "
                f"and {tuple(self.candidates.shape)}"
            )
        if self.query.shape[0] != self.candidates.shape[0] or \
                self.query.shape[1] != self.candidates.shape[2]:
            raise ValueError("query and candidate descriptor shapes are inconsistent")


def bilinear_sample(grid: np.ndarray, pos) -> np.ndarray:
    """Bilinear interpolation of an (H, W, C) grid at pixel position (x, y).

    Coordinates are clamped into [0, W-1] x [0, H-1]; integer positions
    return the grid value exactly. Reference implementation for the batched
    torch sampler.
    """
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"grid must be (H, W, C), got shape {grid.shape}")
    h, w = grid.shape[:2]
    x = min(max(float(pos[0]), 0.0), float(w - 1))
    y = min(max(float(pos[1]), 0.0), float(h - 1))
    x0 = min(int(math.floor(x)), max(w - 2, 0))
    y0 = min(int(math.floor(y)), max(h - 2, 0))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    dx = x - x0
    dy = y - y0
    top = (1.0 - dx) * grid[y0, x0] + dx * grid[y0, x1]
    bot = (1.0 - dx) * grid[y1, x0] + dx * grid[y1, x1]
    return (1.0 - dy) * top + dy * bot


def _gather_bilinear(
    flat: torch.Tensor, height: int, width: int, frame: torch.Tensor,
    pos: torch.Tensor,
) -> torch.Tensor:
    """Sample (B, F*H*W, C) flattened grids at per-token positions.

    frame: integer frame indices broadcastable to pos[..., 0]; pos: (..., 2)
    with a leading batch axis. Gradients flow through the interpolation
    weights (positions), not the gathered grid values.
    """
    batch, _, channels = flat.shape
    x = pos[..., 0].clamp(0.0, float(width - 1))
    y = pos[..., 1].clamp(0.0, float(height - 1))
    x0 = x.floor().clamp(0.0, float(max(width - 2, 0)))
    y0 = y.floor().clamp(0.0, float(max(height - 2, 0)))
    dx = (x - x0).unsqueeze(-1)
    dy = (y - y0).unsqueeze(-1)
    x0l = x0.long()
    y0l = y0.long()
    x1l = (x0l + 1).clamp(max=width - 1)
    y1l = (y0l + 1).clamp(max=height - 1)
    base = frame.long() * (height * width)

    def grab(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = (base + yi * width + xi).expand(x.shape)
        out = flat.gather(1, idx.reshape(batch, -1, 1).expand(batch, -1, channels))
        return out.reshape(*idx.shape, channels)

    v00 = grab(y0l, x0l)
    v01 = grab(y0l, x1l)
    v10 = grab(y1l, x0l)
    v11 = grab(y1l, x1l)
    top = (1.0 - dx) * v00 + dx * v01
    bot = (1.0 - dx) * v10 + dx * v11
    return (1.0 - dy) * top + dy * bot


def sinusoidal_embedding(xy: torch.Tensor) -> torch.Tensor:
    """Fixed 2D sinusoidal encoding, 16 dims per axis (frequencies
    10000^(-k/8), k = 0..7, interleaved sin/cos), x block then y block."""
    freqs = torch.pow(
        torch.tensor(10000.0, dtype=xy.dtype, device=xy.device),
        -torch.arange(_N_FREQ, dtype=xy.dtype, device=xy.device) / _N_FREQ,
    )
    angles = xy.unsqueeze(-1) * freqs  # (..., 2, n_freq)
    emb = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., 2, n_freq, 2)
    return emb.reshape(*xy.shape[:-1], SINUSOID_DIM)


class DeformableLayer(nn.Module):
    """One deformable-attention layer: the reference predicts per-head point
    offsets and softmax weights; values are sampled features."""

    def __init__(self, d_model: int, n_heads: int, n_points: int):
        super().__init__()
        self.n_heads = n_heads
        self.n_points = n_points
        self.head_dim = d_model // n_heads
        self.offset_pred = nn.Linear(d_model, n_heads * n_points * 2)
        self.weight_pred = nn.Linear(d_model, n_heads * n_points)
        self.value_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        # Zero offsets and uniform weights make the first pass plain bilinear sampling.
        nn.init.zeros_(self.offset_pred.weight)
        nn.init.zeros_(self.offset_pred.bias)
        nn.init.zeros_(self.weight_pred.weight)
        nn.init.zeros_(self.weight_pred.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def offsets_and_weights(self, ref: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        lead = ref.shape[:-1]
        off = self.offset_pred(ref).reshape(*lead, self.n_heads, self.n_points, 2)
        w = self.weight_pred(ref).reshape(*lead, self.n_heads, self.n_points)
        return off, torch.softmax(w, dim=-1)


class FeatureExtractor(nn.Module):
    """Raw feature grids + coordinates -> descriptors f^q (L, D) and f (L, M, D)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.d_raw, cfg.d_model)
        self.deform_layers = nn.ModuleList(
            DeformableLayer(cfg.d_model, cfg.n_heads, cfg.n_points)
            for _ in range(cfg.n_deform_layers)
        )
        # Row 0 tags the query token, row 1 the candidates.
        self.id_embed = nn.Parameter(torch.empty(2, cfg.d_id))
        nn.init.normal_(self.id_embed, std=0.02)
        self.emb_scale = nn.Parameter(torch.tensor(float(cfg.emb_scale_init)))
        concat_dim = cfg.d_model + SINUSOID_DIM + 2 + cfg.d_id
        self.concat_norm = nn.LayerNorm(concat_dim)
        self.output_proj = nn.Linear(concat_dim, cfg.d_model)

    @property
    def dtype(self) -> torch.dtype:
        return self.input_proj.weight.dtype

    def _check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"non-finite extractor parameter: {name}")

    # --- deformable stack ---------------------------------------------------

    def _deform_fast(
        self, grids: torch.Tensor, centers: torch.Tensor, frames: torch.Tensor,
        ref0: torch.Tensor,
    ) -> torch.Tensor:
        """Run the stack on raw grids, folding input_proj into each value
        projection (linear maps commute with bilinear sampling), so full
        grids are never projected.

        grids (B, L, H, W, d_raw); centers (B, N, 2); frames (B, N) ints;
        ref0 (B, d_model). Returns (B, N, d_model).
        """
        b, l, h, w, d_raw = grids.shape
        n = centers.shape[1]
        nh = self.cfg.n_heads
        hd = self.cfg.d_model // nh
        flat = grids.reshape(b, l * h * w, d_raw)
        ref = ref0.unsqueeze(1).expand(b, n, self.cfg.d_model)
        frame_idx = frames.reshape(b, n, 1, 1)
        for layer in self.deform_layers:
            off, weights = layer.offsets_and_weights(ref)
            pos = centers.reshape(b, n, 1, 1, 2) + off
            samp = _gather_bilinear(flat, h, w, frame_idx, pos)  # (B, N, nh, P, d_raw)
            w_val = (layer.value_proj.weight @ self.input_proj.weight).reshape(nh, hd, d_raw)
            b_val = (layer.value_proj.weight @ self.input_proj.bias
                     + layer.value_proj.bias).reshape(nh, hd)
            vals = torch.einsum("bnhpr,hdr->bnhpd", samp, w_val) + b_val.reshape(1, 1, nh, 1, hd)
            agg = (weights.unsqueeze(-1) * vals).sum(dim=3)  # (B, N, nh, hd)
            ref = layer.out_proj(agg.reshape(b, n, self.cfg.d_model))
        return ref

    def deformable_local_attend(
        self, reference: torch.Tensor, grid: torch.Tensor, centers: torch.Tensor,
    ) -> torch.Tensor:
        """Attend on an already-projected (H, W, d_model) grid.

        reference: (d_model,) projected query sample; centers: (M, 2).
        Returns (M, d_model). Matches the fast raw-grid path up to float
        rounding.
        """
        self._check_finite()
        if not torch.isfinite(grid).all():
            raise FloatingPointError("non-finite feature grid")
        h, w, d = grid.shape
        if d != self.cfg.d_model:
            raise ValueError(f"grid has {d} channels, expected d_model {self.cfg.d_model}")
        m = centers.shape[0]
        nh = self.cfg.n_heads
        hd = d // nh
        flat = grid.reshape(1, h * w, d)
        frames = torch.zeros((1, m, 1, 1), dtype=torch.long, device=grid.device)
        ref = reference.reshape(1, 1, d).expand(1, m, d)
        cent = centers.reshape(1, m, 1, 1, 2)
        head_sel = torch.arange(nh, device=grid.device)
        for layer in self.deform_layers:
            off, weights = layer.offsets_and_weights(ref)
            pos = cent + off
            samp = _gather_bilinear(flat, h, w, frames, pos)  # (1, M, nh, P, d)
            vals = layer.value_proj(samp)
            vals = vals.reshape(1, m, nh, layer.n_points, nh, hd)
            vals = vals[:, :, head_sel, :, head_sel, :]  # (nh, 1, M, P, hd)
            vals = vals.permute(1, 2, 0, 3, 4)
            agg = (weights.unsqueeze(-1) * vals).sum(dim=3)
            ref = layer.out_proj(agg.reshape(1, m, d))
        return ref[0]

    # --- displacement / identity fusion --------------------------------------

    def embed_and_project(
        self, h: torch.Tensor, displacement: torch.Tensor, identity: str,
    ) -> torch.Tensor:
        """Fuse a refined feature with eta(scale * delta), raw delta, and the
        identity embedding; identity is "query" or "candidate"."""
        if identity not in ("query", "candidate"):
            raise ValueError(f"identity must be 'query' or 'candidate', got {identity!r}")
        idx = 0 if identity == "query" else 1
        eta = sinusoidal_embedding(self.emb_scale * displacement)
        id_vec = self.id_embed[idx].expand(*h.shape[:-1], self.cfg.d_id)
        z = torch.cat([h, eta, displacement, id_vec], dim=-1)
        return self.output_proj(self.concat_norm(z))

    # --- full descriptor build ------------------------------------------------

    def descriptors(
        self, grids: torch.Tensor, query_pos: torch.Tensor, centers: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """grids (B, L, H, W, d_raw), query_pos (B, 2), centers (B, L, M, 2)
        -> query descriptors (B, L, D) (rows replicated) and candidate
        descriptors (B, L, M, D)."""
        self._check_finite()
        b, l, h, w, d_raw = grids.shape
        if d_raw != self.cfg.d_raw:
            raise ValueError(f"grids have {d_raw} channels, expected d_raw {self.cfg.d_raw}")
        m = centers.shape[2]
        flat0 = grids[:, 0].reshape(b, h * w, d_raw)
        zero_frames = torch.zeros((b,), dtype=torch.long, device=grids.device)
        q_raw = _gather_bilinear(flat0, h, w, zero_frames, query_pos)  # (B, d_raw)
        ref0 = self.input_proj(q_raw)

        cand_frames = (
            torch.arange(l, device=grids.device)
            .reshape(1, l, 1)
            .expand(b, l, m)
            .reshape(b, l * m)
        )
        frames = torch.cat([zero_frames.reshape(b, 1), cand_frames], dim=1)
        token_centers = torch.cat(
            [query_pos.reshape(b, 1, 2), centers.reshape(b, l * m, 2)], dim=1
        )
        refined = self._deform_fast(grids, token_centers, frames, ref0)
        h_q = refined[:, 0]
        h_c = refined[:, 1:].reshape(b, l, m, self.cfg.d_model)

        f_q = self.embed_and_project(h_q, torch.zeros_like(query_pos), "query")
        f_q = f_q.unsqueeze(1).expand(b, l, self.cfg.d_model)
        delta = centers - query_pos.reshape(b, 1, 1, 2)
        f_c = self.embed_and_project(h_c, delta, "candidate")
        return f_q, f_c


def build_descriptors(
    provider: FeatureProvider,
    query: QueryPoint,
    candidates: CandidateSet,
    extractor: FeatureExtractor,
) -> LocalDescriptors:
    """Single-track descriptor build from a feature provider."""
    if provider.d_raw != extractor.cfg.d_raw:
        raise ValueError(
            f"provider emits {provider.d_raw}-dim features, extractor expects "
            f"{extractor.cfg.d_raw}"
        )
    if candidates.start != query.t0:
        raise ValueError(
            f"candidates start at frame {candidates.start} but the query is at frame {query.t0}"
        )
    t0 = query.t0
    length = candidates.length
    if t0 + length > provider.frames:
        raise ValueError(
            f"provider covers frames [0, {provider.frames}) but the track needs "
            f"[{t0}, {t0 + length})"
        )
    dtype = extractor.dtype
    grids = torch.from_numpy(
        np.stack([provider.features(t0 + i) for i in range(length)])
    ).to(dtype).unsqueeze(0)
    query_pos = torch.from_numpy(np.array(query.pos)).to(dtype).reshape(1, 2)
    centers = torch.from_numpy(np.array(candidates.positions)).to(dtype).unsqueeze(0)
    with torch.no_grad():
        f_q, f_c = extractor.descriptors(grids, query_pos, centers)
    if not torch.isfinite(f_q).all() or not torch.isfinite(f_c).all():
        raise FloatingPointError("non-finite descriptors")
    return LocalDescriptors(query=f_q[0], candidates=f_c[0])
