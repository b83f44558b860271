"""Shared transformer building blocks: inits, norms, rotary rotation, attention.

The attention here is grouped-query and fully bidirectional; rotary angles
are partitioned across up to three position axes (sequence index, row,
column). Both the velocity transformer and the small ViT branches are
assembled from these pieces.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .rng import Rng
from .tensor import Tensor

ROPE_BASE = 10000.0


# ---- parameter initializers ----


def xavier(fan_in: int, fan_out: int, rng: Rng) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    u = rng.uniform((fan_in, fan_out)) * np.float32(2.0 * limit) - np.float32(limit)
    return Tensor(u, requires_grad=True)


def normal_param(shape: tuple[int, ...], std: float, rng: Rng) -> Tensor:
    return Tensor(rng.normal(shape) * np.float32(std), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


# ---- functional layers ----


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    if b is not None:
        y = y + b
    return y


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    ms = T.tmean(x * x, axis=-1, keepdims=True)
    return x / T.sqrt(ms + eps) * weight


def modulate(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


def sinusoidal_embedding(values: np.ndarray, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Sin/cos features of scalar inputs; constant w.r.t. the tape."""
    half = dim // 2
    freqs = np.exp(-math.log(ROPE_BASE) * np.arange(half, dtype=np.float32) / max(half - 1, 1))
    args = np.asarray(values, dtype=np.float32).reshape(-1, 1) * np.float32(scale) * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(np.float32)


# ---- multi-axis rotary embedding ----


def rope_axis_dims(head_dim: int, n_axes: int = 3) -> tuple[int, int]:
    """(per-axis sub-dim, leftover pass-through dims) for a head."""
    sub = head_dim // n_axes
    sub -= sub % 2
    return sub, head_dim - n_axes * sub


def rope_tables(positions: np.ndarray, head_dim: int, n_axes: int = 3) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-axis (cos, sin) tables from integer positions [..., n_axes].

    Tables have shape [..., 1, T, pairs] ready to broadcast over heads when
    positions are [B, T, n_axes], or [T, pairs] for unbatched input.
    """
    sub, _ = rope_axis_dims(head_dim, n_axes)
    pairs = sub // 2
    pos = np.asarray(positions, dtype=np.float32)
    tables = []
    inv_freq = ROPE_BASE ** (-np.arange(pairs, dtype=np.float32) / max(pairs, 1))
    for axis in range(n_axes):
        ang = pos[..., axis : axis + 1] * inv_freq  # [..., T(pairs broadcast)] -> [..., pairs]
        if ang.ndim == 3:  # [B, T, pairs] -> [B, 1, T, pairs] (broadcast over heads)
            ang = ang[:, None, :, :]
        tables.append((np.cos(ang, dtype=np.float32), np.sin(ang, dtype=np.float32)))
    return tables


def rope_rotate(x: Tensor, tables: list[tuple[np.ndarray, np.ndarray]]) -> Tensor:
    """Rotate head channels band-by-band; leftover dims pass through.

    x is [..., T, head_dim]. Band `a` spans channels [a*sub, (a+1)*sub) and
    uses axis `a`'s angles; within a band the first half pairs with the
    second half (half-split rotation).
    """
    head_dim = x.shape[-1]
    n_axes = len(tables)
    sub, leftover = rope_axis_dims(head_dim, n_axes)
    pairs = sub // 2
    parts = []
    for a, (cos, sin) in enumerate(tables):
        lo = a * sub
        x1 = x[..., lo : lo + pairs]
        x2 = x[..., lo + pairs : lo + sub]
        parts.append(T.concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1))
    if leftover:
        parts.append(x[..., n_axes * sub :])
    return T.concat(parts, axis=-1)


# ---- grouped-query attention ----


def attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
    kv_heads: int,
    rope: list[tuple[np.ndarray, np.ndarray]] | None = None,
    key_bias: np.ndarray | None = None,
) -> Tensor:
    """Bidirectional grouped-query attention over [B, T, dim].

    Each group of ``heads // kv_heads`` query heads shares one K/V head.
    ``key_bias`` (e.g. -1e30 on padding keys) is added to the logits before
    softmax; no causal mask is ever applied.
    """
    if x.ndim != 3:
        raise ShapeError(f"fflow.nn: attention expects [B, T, dim], got {x.shape}")
    if heads % kv_heads != 0:
        raise ShapeError("fflow.nn: heads must be a multiple of kv_heads")
    bsz, tokens, dim = x.shape
    head_dim = dim // heads
    group = heads // kv_heads

    q = T.matmul(x, wq).reshape(bsz, tokens, heads, head_dim).transpose((0, 2, 1, 3))
    k = T.matmul(x, wk).reshape(bsz, tokens, kv_heads, head_dim).transpose((0, 2, 1, 3))
    v = T.matmul(x, wv).reshape(bsz, tokens, kv_heads, head_dim).transpose((0, 2, 1, 3))

    if rope is not None:
        q = rope_rotate(q, rope)
        k = rope_rotate(k, rope)

    if group > 1:
        k = T.broadcast_to(
            k.reshape(bsz, kv_heads, 1, tokens, head_dim),
            (bsz, kv_heads, group, tokens, head_dim),
        ).reshape(bsz, heads, tokens, head_dim)
        v = T.broadcast_to(
            v.reshape(bsz, kv_heads, 1, tokens, head_dim),
            (bsz, kv_heads, group, tokens, head_dim),
        ).reshape(bsz, heads, tokens, head_dim)

    logits = T.matmul(q, k.transpose((0, 1, 3, 2))) * np.float32(1.0 / math.sqrt(head_dim))
    if key_bias is not None:
        logits = logits + Tensor(key_bias)  # [B, 1, 1, T] additive mask
    weights = T.softmax(logits, axis=-1)
    out = T.matmul(weights, v)  # [B, H, T, hd]
    out = out.transpose((0, 2, 1, 3)).reshape(bsz, tokens, dim)
    return T.matmul(out, wo)


def key_padding_bias(mask: np.ndarray) -> np.ndarray:
    """[B, T] {0,1} validity mask -> additive [B, 1, 1, T] logit bias."""
    bias = np.where(mask > 0, np.float32(0.0), np.float32(-1e30))
    return bias[:, None, None, :].astype(np.float32)
