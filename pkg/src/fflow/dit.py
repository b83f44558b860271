"""Single-stream velocity transformer over joint text+latent token sequences.

Text tokens and latent-grid tokens are concatenated into one sequence and
share every attention layer. Positions are triples (axis0, row, col): text
tokens sit at (i, 0, 0) and image tokens at (text_len, r, c), and rotary
angles are partitioned across the three axes within each attention head.
The timestep conditions every block through zero-initialized adaptive
scale/shift/gate modulation, so an untrained model is the zero velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import NumericsError, ShapeError
from .rng import Rng
from .tensor import Tensor


@dataclass
class DiTConfig:
    dim: int = 144
    layers: int = 6
    heads: int = 6
    kv_heads: int = 2
    patch: int = 1
    time_embed_dim: int = 144
    rope_axes: int = 3
    z_dim: int = 32
    vocab: int = 4096
    mlp_ratio: float = 4.0
    sin_dim: int = 256

    def __post_init__(self):
        if self.heads % self.kv_heads != 0:
            raise ShapeError("fflow.dit: heads must be a multiple of kv_heads")
        if self.dim % self.heads != 0:
            raise ShapeError("fflow.dit: dim must be a multiple of heads")
        if self.patch != 1:
            raise ShapeError("fflow.dit: latent patch size is fixed to 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def kv_dim(self) -> int:
        return self.head_dim * self.kv_heads

    @property
    def hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)


def paper_config() -> DiTConfig:
    """The full-scale configuration used only for parameter arithmetic."""
    return DiTConfig(dim=2304, layers=26, heads=24, kv_heads=8, z_dim=384,
                     time_embed_dim=2304)


@dataclass
class TokenSequence:
    """One sample's joint sequence: padded text tokens then image tokens."""

    text_len: int  # real (unpadded) caption length, >= 1
    image_rows: int
    image_cols: int
    embeddings: Tensor  # [text_pad + rows*cols, dim]
    positions: np.ndarray  # [text_pad + rows*cols, 3]


# ---- parameters ----


def init_dit(cfg: DiTConfig, rng: Rng, zero_gates: bool = True) -> dict[str, Tensor]:
    """Build the parameter dict. `zero_gates=False` randomizes modulation and
    output head (used by gradient checks, where dead branches hide bugs)."""
    d, td = cfg.dim, cfg.time_embed_dim
    params: dict[str, Tensor] = {
        "text_table": nn.normal_param((cfg.vocab, d), 0.02, rng.split("text")),
        "in_proj.w": nn.xavier(cfg.z_dim, d, rng.split("in")),
        "in_proj.b": nn.zeros_param((d,)),
        "time.w1": nn.xavier(cfg.sin_dim, td, rng.split("time1")),
        "time.b1": nn.zeros_param((td,)),
        "time.w2": nn.xavier(td, td, rng.split("time2")),
        "time.b2": nn.zeros_param((td,)),
        "final.norm.w": nn.ones_param((d,)),
    }

    def mod_param(name: str, out_mult: int, r: Rng):
        if zero_gates:
            params[f"{name}.w"] = nn.zeros_param((td, out_mult * d))
            params[f"{name}.b"] = nn.zeros_param((out_mult * d,))
        else:
            params[f"{name}.w"] = nn.normal_param((td, out_mult * d), 0.05, r)
            params[f"{name}.b"] = nn.normal_param((out_mult * d,), 0.05, r.split("b"))

    for i in range(cfg.layers):
        r = rng.split("layer", i)
        params[f"l{i}.norm1.w"] = nn.ones_param((d,))
        params[f"l{i}.norm2.w"] = nn.ones_param((d,))
        params[f"l{i}.attn.wq"] = nn.xavier(d, d, r.split("wq"))
        params[f"l{i}.attn.wk"] = nn.xavier(d, cfg.kv_dim, r.split("wk"))
        params[f"l{i}.attn.wv"] = nn.xavier(d, cfg.kv_dim, r.split("wv"))
        params[f"l{i}.attn.wo"] = nn.xavier(d, d, r.split("wo"))
        params[f"l{i}.mlp.w1"] = nn.xavier(d, cfg.hidden, r.split("w1"))
        params[f"l{i}.mlp.w2"] = nn.xavier(cfg.hidden, d, r.split("w2"))
        mod_param(f"l{i}.mod", 6, r.split("mod"))
    mod_param("final.mod", 2, rng.split("fmod"))
    if zero_gates:
        params["head.w"] = nn.zeros_param((d, cfg.z_dim))
        params["head.b"] = nn.zeros_param((cfg.z_dim,))
    else:
        params["head.w"] = nn.normal_param((d, cfg.z_dim), 0.05, rng.split("head"))
        params["head.b"] = nn.normal_param((cfg.z_dim,), 0.05, rng.split("headb"))
    return params


def param_count(cfg: DiTConfig) -> int:
    """Symbolic parameter count; mirrors init_dit without instantiating."""
    d, td, z = cfg.dim, cfg.time_embed_dim, cfg.z_dim
    total = cfg.vocab * d  # text embedding table
    total += z * d + d  # in_proj
    total += cfg.sin_dim * td + td + td * td + td  # time MLP
    per_layer = (
        d * d + d * cfg.kv_dim + d * cfg.kv_dim + d * d  # attention projections
        + d * cfg.hidden + cfg.hidden * d  # mlp
        + td * 6 * d + 6 * d  # adaptive modulation
        + 2 * d  # the two pre-norm gains
    )
    total += cfg.layers * per_layer
    total += d  # final norm
    total += td * 2 * d + 2 * d  # final modulation
    total += d * z + z  # output head
    return total


# ---- public rotary / attention ops ----


def mrope_rotate(q_or_k: Tensor, positions: np.ndarray) -> Tensor:
    """Rotate head channels by per-axis rotary angles.

    `q_or_k` is [..., tokens, head_dim]; `positions` is [tokens, 3] integer
    coordinates. Channels are split into three contiguous sub-bands (one per
    axis, sub-dim = head_dim/3 rounded down to even); leftover channels pass
    through unrotated. Norm-preserving by construction.
    """
    positions = np.asarray(positions)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ShapeError("fflow.dit: positions must be [tokens, 3]")
    tables = nn.rope_tables(positions, q_or_k.shape[-1])
    return nn.rope_rotate(q_or_k, tables)


def gqa_attention(
    x: Tensor,
    positions: np.ndarray,
    cfg: DiTConfig,
    weights: dict[str, Tensor],
) -> Tensor:
    """Grouped-query attention over a single [tokens, dim] sequence.

    `weights` holds wq [dim, dim], wk/wv [dim, kv_dim], wo [dim, dim]. Every
    group of heads/kv_heads query heads shares one K/V head; attention is
    fully bidirectional.
    """
    if x.ndim != 2 or x.shape[1] != cfg.dim:
        raise ShapeError(f"fflow.dit: expected [tokens, {cfg.dim}], got {x.shape}")
    rope = nn.rope_tables(np.asarray(positions), cfg.head_dim) if positions is not None else None
    out = nn.attention(
        x.reshape(1, x.shape[0], cfg.dim),
        weights["wq"], weights["wk"], weights["wv"], weights["wo"],
        cfg.heads, cfg.kv_heads, rope=rope,
    )
    return out.reshape(x.shape)


# ---- forward ----


def _positions_and_mask(
    bsz: int, pad_len: int, text_lens: np.ndarray, rows: int, cols: int
) -> tuple[np.ndarray, np.ndarray]:
    n_img = rows * cols
    total = pad_len + n_img
    pos = np.zeros((bsz, total, 3), dtype=np.float32)
    mask = np.zeros((bsz, total), dtype=np.float32)
    ar = np.arange(pad_len, dtype=np.float32)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    for b in range(bsz):
        pos[b, :pad_len, 0] = ar
        pos[b, pad_len:, 0] = float(text_lens[b])
        pos[b, pad_len:, 1] = rr.ravel()
        pos[b, pad_len:, 2] = cc.ravel()
        mask[b, : text_lens[b]] = 1.0
        mask[b, pad_len:] = 1.0
    return pos, mask


def forward_batch(
    params: dict[str, Tensor],
    cfg: DiTConfig,
    latents: Tensor | np.ndarray,
    token_ids: np.ndarray,
    text_lens: np.ndarray,
    t: np.ndarray,
) -> Tensor:
    """Velocity prediction for a batch sharing one latent-grid resolution.

    latents: [B, rows, cols, z]; token_ids: [B, pad_len] (0 = null/pad);
    text_lens: [B] real caption lengths (>= 1); t: [B] in [0, 1].
    Returns [B, rows, cols, z]; text-token outputs are discarded.
    """
    if not isinstance(latents, Tensor):
        latents = Tensor(latents)
    if latents.ndim != 4:
        raise ShapeError(f"fflow.dit: latents must be [B, rows, cols, z], got {latents.shape}")
    bsz, rows, cols, z = latents.shape
    if z != cfg.z_dim:
        raise ShapeError(f"fflow.dit: latent dim {z} != trained z dim {cfg.z_dim}")
    t = np.asarray(t, dtype=np.float32).reshape(-1)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise NumericsError(f"fflow.dit: timestep outside [0, 1]: {t}")
    token_ids = np.asarray(token_ids, dtype=np.int64)
    text_lens = np.asarray(text_lens, dtype=np.int64)
    pad_len = token_ids.shape[1]
    n_img = rows * cols

    pos, mask = _positions_and_mask(bsz, pad_len, text_lens, rows, cols)
    key_bias = nn.key_padding_bias(mask)
    rope = nn.rope_tables(pos, cfg.head_dim, cfg.rope_axes)

    txt = T.gather_rows(params["text_table"], token_ids)  # [B, pad, dim]
    img = nn.linear(latents.reshape(bsz, n_img, z), params["in_proj.w"], params["in_proj.b"])
    x = T.concat([txt, img], axis=1)

    sin = Tensor(nn.sinusoidal_embedding(t, cfg.sin_dim))
    tv = nn.linear(sin, params["time.w1"], params["time.b1"])
    tv = nn.linear(T.silu(tv), params["time.w2"], params["time.b2"])
    tact = T.silu(tv)  # [B, td]

    d = cfg.dim
    for i in range(cfg.layers):
        mod = nn.linear(tact, params[f"l{i}.mod.w"], params[f"l{i}.mod.b"])
        mod = mod.reshape(bsz, 1, 6 * d)
        s1, h1, g1 = mod[:, :, 0:d], mod[:, :, d : 2 * d], mod[:, :, 2 * d : 3 * d]
        s2, h2, g2 = mod[:, :, 3 * d : 4 * d], mod[:, :, 4 * d : 5 * d], mod[:, :, 5 * d : 6 * d]
        h = nn.modulate(nn.rms_norm(x, params[f"l{i}.norm1.w"]), s1, h1)
        x = x + g1 * nn.attention(
            h, params[f"l{i}.attn.wq"], params[f"l{i}.attn.wk"], params[f"l{i}.attn.wv"],
            params[f"l{i}.attn.wo"], cfg.heads, cfg.kv_heads, rope=rope, key_bias=key_bias,
        )
        h = nn.modulate(nn.rms_norm(x, params[f"l{i}.norm2.w"]), s2, h2)
        x = x + g2 * T.matmul(T.silu(T.matmul(h, params[f"l{i}.mlp.w1"])), params[f"l{i}.mlp.w2"])

    fmod = nn.linear(tact, params["final.mod.w"], params["final.mod.b"]).reshape(bsz, 1, 2 * d)
    x = nn.modulate(nn.rms_norm(x, params["final.norm.w"]), fmod[:, :, :d], fmod[:, :, d:])
    out = nn.linear(x[:, pad_len:, :], params["head.w"], params["head.b"])
    if not np.all(np.isfinite(out.data)):
        raise NumericsError("fflow.dit: non-finite velocity output")
    return out.reshape(bsz, rows, cols, z)


def dit_forward(
    latent: Tensor | np.ndarray,
    token_ids: np.ndarray | list[int],
    t: float,
    cfg: DiTConfig,
    params: dict[str, Tensor],
) -> Tensor:
    """Single-sample velocity: latent [rows, cols, z], caption token ids, t in [0,1].

    An empty caption is the unconditional branch and becomes one null token.
    """
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        ids = np.zeros(1, dtype=np.int64)
    if not isinstance(latent, Tensor):
        latent = Tensor(latent)
    rows, cols, z = latent.shape
    out = forward_batch(
        params, cfg,
        latent.reshape(1, rows, cols, z),
        ids.reshape(1, -1),
        np.array([ids.size]),
        np.array([t], dtype=np.float32),
    )
    return out.reshape(rows, cols, z)
