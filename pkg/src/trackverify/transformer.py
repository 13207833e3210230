"""Candidate transformer: decodes replicated query descriptors against
candidate descriptors and emits per-frame reliability distributions.

Each layer applies, with a residual and post-normalization after every
sub-block:
  (a) restricted cross-attention: the frame-t query token attends only to
      that frame's M candidate tokens, with time as a batch axis;
  (b) temporal self-attention over the L query tokens, no mask, with a
      learnable temporal embedding (base length 24, linearly interpolated)
      added to queries and keys;
  (c) a feed-forward block (hidden 4*D, GELU, dropout 0.1).

The ranking head projects the decoded query and the candidate descriptors
separately, L2-normalizes, and softmaxes the cosine similarities at a
learnable temperature (init 0.1, stored as log tau so tau stays positive).
Scores are produced for every frame, occluded or not.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .features import FeatureExtractor, LocalDescriptors, ModelConfig, build_descriptors
from .trajectory import CandidateSet, QueryPoint, ReliabilityScores
from .world import FeatureProvider

__all__ = ["CandidateTransformer", "Verifier", "verify"]


def _attend(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, n_heads: int,
) -> torch.Tensor:
    """Scaled dot-product attention; q (..., Nq, D), k/v (..., Nk, D)."""
    *lead, nq, d = q.shape
    nk = k.shape[-2]
    hd = d // n_heads
    qh = q.reshape(*lead, nq, n_heads, hd).transpose(-3, -2)
    kh = k.reshape(*lead, nk, n_heads, hd).transpose(-3, -2)
    vh = v.reshape(*lead, nk, n_heads, hd).transpose(-3, -2)
    logits = qh @ kh.transpose(-2, -1) / math.sqrt(hd)
    attn = torch.softmax(logits, dim=-1)
    out = attn @ vh
    return out.transpose(-3, -2).reshape(*lead, nq, d)


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_mult: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.cross_q = nn.Linear(d_model, d_model)
        self.cross_k = nn.Linear(d_model, d_model)
        self.cross_v = nn.Linear(d_model, d_model)
        self.cross_out = nn.Linear(d_model, d_model)
        self.norm_cross = nn.LayerNorm(d_model)
        self.self_q = nn.Linear(d_model, d_model)
        self.self_k = nn.Linear(d_model, d_model)
        self.self_v = nn.Linear(d_model, d_model)
        self.self_out = nn.Linear(d_model, d_model)
        self.norm_self = nn.LayerNorm(d_model)
        self.ffn_in = nn.Linear(d_model, ffn_mult * d_model)
        self.ffn_out = nn.Linear(ffn_mult * d_model, d_model)
        self.dropout = nn.Dropout(dropout)
        self.norm_ffn = nn.LayerNorm(d_model)

    def cross_attention(self, x: torch.Tensor, cand: torch.Tensor) -> torch.Tensor:
        # x (B, L, D) queries; cand (B, L, M, D): frame t attends over its own M.
        q = self.cross_q(x).unsqueeze(2)  # (B, L, 1, D)
        k = self.cross_k(cand)
        v = self.cross_v(cand)
        out = _attend(q, k, v, self.n_heads).squeeze(2)
        return self.cross_out(out)

    def self_attention(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        # Temporal embedding enters queries and keys only.
        q = self.self_q(x + temb)
        k = self.self_k(x + temb)
        v = self.self_v(x)
        return self.self_out(_attend(q, k, v, self.n_heads))

    def ffn(self, x: torch.Tensor) -> torch.Tensor:
        return self.ffn_out(self.dropout(torch.nn.functional.gelu(self.ffn_in(x))))


class CandidateTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.d_model, cfg.n_heads, cfg.ffn_mult, cfg.dropout)
            for _ in range(cfg.n_decoder_layers)
        )
        self.temporal_embed = nn.Parameter(torch.empty(cfg.temporal_len, cfg.d_model))
        nn.init.normal_(self.temporal_embed, std=0.02)
        self.rank_query = nn.Linear(cfg.d_model, cfg.d_model)
        self.rank_candidate = nn.Linear(cfg.d_model, cfg.d_model)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))

    @property
    def tau(self) -> torch.Tensor:
        return torch.exp(self.log_tau)

    def interpolated_temporal_embedding(self, length: int) -> torch.Tensor:
        """Linearly interpolate the base embedding over normalized frame index."""
        base = self.temporal_embed
        n_base = base.shape[0]
        if length == n_base:
            return base
        if length == 1:
            return base[:1]
        t = torch.linspace(0.0, float(n_base - 1), length,
                           dtype=base.dtype, device=base.device)
        lo = t.floor().long().clamp(max=n_base - 2)
        frac = (t - lo.to(base.dtype)).unsqueeze(-1)
        return (1.0 - frac) * base[lo] + frac * base[lo + 1]

    def _run_layers(
        self, x: torch.Tensor, cand: torch.Tensor, train_mode: bool,
        temporal_identity: bool = False,
    ) -> torch.Tensor:
        was_training = self.training
        self.train(train_mode)
        try:
            temb = self.interpolated_temporal_embedding(x.shape[1]).unsqueeze(0)
            for i, layer in enumerate(self.layers):
                x = layer.norm_cross(x + layer.cross_attention(x, cand))
                if not temporal_identity:
                    x = layer.norm_self(x + layer.self_attention(x, temb))
                x = layer.norm_ffn(x + layer.ffn(x))
                if not torch.isfinite(x).all():
                    raise FloatingPointError(f"non-finite activations after decoder layer {i}")
        finally:
            self.train(was_training)
        return x

    def decode_batch(
        self, query_desc: torch.Tensor, cand_desc: torch.Tensor, train_mode: bool,
        temporal_identity: bool = False,
    ) -> torch.Tensor:
        """query_desc (B, L, D), cand_desc (B, L, M, D) -> decoded (B, L, D).

        temporal_identity=True ablates the temporal self-attention sub-block
        (used by locality checks)."""
        return self._run_layers(query_desc, cand_desc, train_mode, temporal_identity)

    def decode(
        self, desc: LocalDescriptors, train_mode: bool = False,
        temporal_identity: bool = False,
    ) -> torch.Tensor:
        """Single-track decode -> (L, D)."""
        return self.decode_batch(
            desc.query.unsqueeze(0), desc.candidates.unsqueeze(0), train_mode,
            temporal_identity,
        )[0]

    def cosine_logits(self, decoded: torch.Tensor, cand_desc: torch.Tensor) -> torch.Tensor:
        """cos(proj_q(decoded), proj_c(cand)) / tau; shapes (..., L, D) and
        (..., L, M, D) -> (..., L, M). Zero-norm projections get cosine 0."""
        zq = self.rank_query(decoded)
        zc = self.rank_candidate(cand_desc)
        zq = zq / zq.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        zc = zc / zc.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        cos = (zq.unsqueeze(-2) * zc).sum(-1)
        return cos / self.tau

    def score(self, decoded: torch.Tensor, cand_desc: torch.Tensor) -> ReliabilityScores:
        """Single-track scores: decoded (L, D), cand_desc (L, M, D)."""
        with torch.no_grad():
            probs = torch.softmax(self.cosine_logits(decoded, cand_desc), dim=-1)
        return ReliabilityScores(scores=probs.detach().cpu().double().numpy())


class Verifier(nn.Module):
    """Complete learnable state: feature extractor + candidate transformer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.extractor = FeatureExtractor(cfg)
        self.transformer = CandidateTransformer(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.extractor.dtype

    def forward(
        self, grids: torch.Tensor, query_pos: torch.Tensor, centers: torch.Tensor,
        train_mode: bool = False,
    ) -> torch.Tensor:
        """Batched logits (B, L, M); softmax over M yields the reliability rows."""
        f_q, f_c = self.extractor.descriptors(grids, query_pos, centers)
        decoded = self.transformer.decode_batch(f_q, f_c, train_mode)
        return self.transformer.cosine_logits(decoded, f_c)


def verify(
    provider: FeatureProvider,
    query: QueryPoint,
    candidates: CandidateSet,
    verifier: Verifier,
) -> ReliabilityScores:
    """Inference-mode reliability scores for one candidate set."""
    desc = build_descriptors(provider, query, candidates, verifier.extractor)
    with torch.no_grad():
        decoded = verifier.transformer.decode(desc, train_mode=False)
    return verifier.transformer.score(decoded, desc.candidates)
