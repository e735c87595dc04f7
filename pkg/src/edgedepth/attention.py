"""Semantic-guided multi-level self-attention: depth/semantic fusion, Q/K/V
position attention with a gamma-gated residual (gamma starts at 0)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ATTENTION_LEVELS = (4, 3, 2)


@dataclass
class AttentionBlock:
    """Per-level parameters: 3x3 fusion conv over the concatenated depth and
    semantic features, then kernel-1 query/key/value convs and the gate."""

    level: int
    fuse_w: object  # (C, C_d + C_s, 3, 3)
    fuse_b: object
    q_w: object = None  # (C, C) kernel-1; None on fusion-only levels
    q_b: object = None
    k_w: object = None
    k_b: object = None
    v_w: object = None
    v_b: object = None
    gamma: object = None  # scalar, initialized to exactly 0


def fuse_features(f_depth, f_sem, block: AttentionBlock) -> Tensor:
    """Channel-concat the two streams and fuse with one 3x3 conv + ELU."""
    f_depth, f_sem = ad.as_tensor(f_depth), ad.as_tensor(f_sem)
    if f_depth.shape[-2:] != f_sem.shape[-2:]:
        raise ShapeError(f"spatial mismatch: {f_depth.shape} vs {f_sem.shape}")
    cat = ad.concat([f_depth, f_sem], axis=-3)
    return ad.elu(ad.conv2d(cat, block.fuse_w, block.fuse_b))


def _kernel1(x_flat, w, b):
    # x_flat: (..., C, L); w: (C_out, C)
    out = ad.matmul(ad.as_tensor(w), x_flat)
    return out + ad.reshape(ad.as_tensor(b), (-1, 1))


def self_attention(f_fused, block: AttentionBlock) -> Tensor:
    """Position attention over all L = H*W locations with residual gating.

    Each output position's weights over key positions sum to 1; with
    gamma = 0 the output equals the fused input exactly.
    """
    f_fused = ad.as_tensor(f_fused)
    c, h, w = f_fused.shape[-3], f_fused.shape[-2], f_fused.shape[-1]
    batch = f_fused.shape[:-3]
    flat = ad.reshape(f_fused, batch + (c, h * w))
    q = _kernel1(flat, block.q_w, block.q_b)
    k = _kernel1(flat, block.k_w, block.k_b)
    v = _kernel1(flat, block.v_w, block.v_b)
    logits = ad.matmul(ad.transpose_last2(q), k)  # (..., L, L)
    attn = ad.softmax(logits)
    weighted = ad.matmul(v, ad.transpose_last2(attn))  # (..., C, L)
    out = ad.as_tensor(block.gamma) * weighted + flat
    return ad.reshape(out, batch + (c, h, w))


def attention_matrix(f_fused, block: AttentionBlock) -> Tensor:
    """The (..., L, L) row-stochastic attention matrix (for inspection)."""
    f_fused = ad.as_tensor(f_fused)
    c = f_fused.shape[-3]
    l = f_fused.shape[-2] * f_fused.shape[-1]
    flat = ad.reshape(f_fused, f_fused.shape[:-3] + (c, l))
    q = _kernel1(flat, block.q_w, block.q_b)
    k = _kernel1(flat, block.k_w, block.k_b)
    return ad.softmax(ad.matmul(ad.transpose_last2(q), k))


def multi_level_attention(depth_pyramid, semantic_pyramid, blocks) -> list:
    """Fuse depth and semantic features at every level; apply attention on
    the levels configured in `blocks` (expected: 4, 3, 2).

    Pyramids are dicts level -> feature tensor. Returns a dict of fused
    (and, where configured, attended) features.
    """
    missing = set(ATTENTION_LEVELS) & set(depth_pyramid) - set(blocks)
    if missing:
        raise ShapeError(f"attention blocks must cover levels {ATTENTION_LEVELS}, "
                         f"missing {sorted(missing)}")
    out = {}
    for level, f_depth in depth_pyramid.items():
        if level not in semantic_pyramid:
            raise ShapeError(f"semantic pyramid missing level {level}")
        blk = blocks.get(level)
        if blk is None:
            raise ShapeError(f"no fusion parameters for level {level}")
        fused = fuse_features(f_depth, semantic_pyramid[level], blk)
        out[level] = self_attention(fused, blk) if level in ATTENTION_LEVELS else fused
    return out
