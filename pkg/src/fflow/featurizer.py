"""Frozen patch featurizers: images -> (H/patch, W/patch, d_f) token grids.

Two interchangeable kinds sit behind one facade. The deterministic kind
projects each patch onto a truncated orthonormal 2-D DCT basis and needs
no weights at all, which makes it the default for anything that wants
variance-free tests. The learned kind is a tiny two-block transformer
pretrained with masked-patch reconstruction and then frozen. Diffusion
training never updates either; that freeze is enforced, not assumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct

from . import nn
from . import tensor as T
from .errors import DataError, FrozenWeightsError, NumericsError, ShapeError
from .rng import Rng
from .tensor import Tensor


@dataclass
class FeaturizerConfig:
    patch: int = 16
    d_f: int = 32
    kind: str = "deterministic"  # or "learned"
    layer_index: int = -1  # which trunk block feeds the feature head (-1 = final)
    dim: int = 64
    heads: int = 4
    blocks: int = 2

    def __post_init__(self):
        if self.kind not in ("deterministic", "learned"):
            raise ShapeError(f"fflow.featurizer: unknown kind {self.kind!r}")
        if self.kind == "deterministic" and self.d_f > 3 * self.patch * self.patch:
            raise ShapeError(
                f"fflow.featurizer: d_f={self.d_f} exceeds 3*patch^2={3 * self.patch ** 2}"
            )


@dataclass
class LatentGrid:
    """Feature-token grid; the state space the velocity field lives in."""

    rows: int
    cols: int
    d: int
    data: Tensor

    def __post_init__(self):
        if self.data.shape != (self.rows, self.cols, self.d):
            raise ShapeError(
                f"fflow.featurizer: grid data shape {self.data.shape} != "
                f"({self.rows}, {self.cols}, {self.d})"
            )

    @classmethod
    def from_tensor(cls, data: Tensor) -> "LatentGrid":
        r, c, d = data.shape
        return cls(r, c, d, data)


def _check_divisible(img: np.ndarray, patch: int) -> tuple[int, int]:
    h, w = img.shape[0], img.shape[1]
    if h % patch != 0:
        raise ShapeError(f"fflow.featurizer: height {h} not divisible by patch {patch}")
    if w % patch != 0:
        raise ShapeError(f"fflow.featurizer: width {w} not divisible by patch {patch}")
    return h // patch, w // patch


def _extract_patches(img: np.ndarray, patch: int) -> np.ndarray:
    """[H, W, 3] -> [rows, cols, patch*patch*3], row-major within a patch."""
    rows, cols = _check_divisible(img, patch)
    x = img.reshape(rows, patch, cols, patch, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x).reshape(rows, cols, patch * patch * 3)


def dct_projection(patch: int, d_f: int) -> np.ndarray:
    """Orthonormal projection [d_f, patch*patch*3] of truncated DCT rows.

    Basis rows are one 2-D DCT-II function on one color channel, ordered by
    total frequency u+v (channel varying fastest), so rows 0..2 are the DC
    terms of R, G, B.
    """
    basis1d = dct(np.eye(patch), axis=0, norm="ortho").astype(np.float64)  # [k, n]
    order = sorted(
        ((u, v, c) for u in range(patch) for v in range(patch) for c in range(3)),
        key=lambda t: (t[0] + t[1], t[0], t[1], t[2]),
    )[:d_f]
    rows = np.zeros((d_f, patch, patch, 3), dtype=np.float64)
    for i, (u, v, c) in enumerate(order):
        rows[i, :, :, c] = np.outer(basis1d[u], basis1d[v])
    return rows.reshape(d_f, patch * patch * 3).astype(np.float32)


def featurize_deterministic(img: np.ndarray, cfg: FeaturizerConfig) -> LatentGrid:
    """Project every patch onto the fixed DCT basis. Bit-deterministic."""
    patches = _extract_patches(np.asarray(img, dtype=np.float32), cfg.patch)
    proj = dct_projection(cfg.patch, cfg.d_f)
    feats = patches @ proj.T
    return LatentGrid.from_tensor(Tensor(feats))


# ---- learned featurizer ----


@dataclass
class FeaturizerWeights:
    params: dict[str, Tensor]
    cfg: FeaturizerConfig
    frozen: bool = False
    initial_ssl_loss: float | None = None
    final_ssl_loss: float | None = None


def init_learned(cfg: FeaturizerConfig, rng: Rng) -> FeaturizerWeights:
    pdim = cfg.patch * cfg.patch * 3
    d = cfg.dim
    params: dict[str, Tensor] = {
        "patch_proj.w": nn.xavier(pdim, d, rng.split("patch_proj")),
        "patch_proj.b": nn.zeros_param((d,)),
        "mask_token": nn.normal_param((d,), 0.02, rng.split("mask")),
        "feat_head.w": nn.xavier(d, cfg.d_f, rng.split("feat_head")),
        "recon_head.w": nn.xavier(d, pdim, rng.split("recon_head")),
        "feat_norm.w": nn.ones_param((d,)),
    }
    for i in range(cfg.blocks):
        r = rng.split("block", i)
        params[f"b{i}.norm1.w"] = nn.ones_param((d,))
        params[f"b{i}.norm2.w"] = nn.ones_param((d,))
        params[f"b{i}.attn.wq"] = nn.xavier(d, d, r.split("wq"))
        params[f"b{i}.attn.wk"] = nn.xavier(d, d, r.split("wk"))
        params[f"b{i}.attn.wv"] = nn.xavier(d, d, r.split("wv"))
        params[f"b{i}.attn.wo"] = nn.xavier(d, d, r.split("wo"))
        params[f"b{i}.mlp.w1"] = nn.xavier(d, 2 * d, r.split("w1"))
        params[f"b{i}.mlp.w2"] = nn.xavier(2 * d, d, r.split("w2"))
    return FeaturizerWeights(params, cfg, frozen=False)


def _grid_pos_embedding(rows: int, cols: int, dim: int) -> np.ndarray:
    """Additive 2-D sinusoidal position features, [rows*cols, dim]."""
    half = dim // 2
    r_emb = nn.sinusoidal_embedding(np.arange(rows, dtype=np.float32), half, scale=1.0)
    c_emb = nn.sinusoidal_embedding(np.arange(cols, dtype=np.float32), dim - half, scale=1.0)
    out = np.concatenate(
        [
            np.repeat(r_emb, cols, axis=0),
            np.tile(c_emb, (rows, 1)),
        ],
        axis=-1,
    )
    return out.astype(np.float32)


def _trunk(tokens: Tensor, w: FeaturizerWeights, upto: int | None = None) -> Tensor:
    cfg = w.cfg
    p = w.params
    x = tokens
    n_blocks = cfg.blocks if upto is None else upto
    for i in range(n_blocks):
        h = nn.rms_norm(x, p[f"b{i}.norm1.w"])
        x = x + nn.attention(
            h, p[f"b{i}.attn.wq"], p[f"b{i}.attn.wk"], p[f"b{i}.attn.wv"],
            p[f"b{i}.attn.wo"], cfg.heads, cfg.heads,
        )
        h = nn.rms_norm(x, p[f"b{i}.norm2.w"])
        x = x + T.matmul(T.silu(T.matmul(h, p[f"b{i}.mlp.w1"])), p[f"b{i}.mlp.w2"])
    return x


def featurize_learned(
    img: np.ndarray,
    weights: FeaturizerWeights,
    cfg: FeaturizerConfig | None = None,
    pos_scale: float = 1.0,
) -> LatentGrid:
    """Run the frozen transformer featurizer. Raises if weights are not frozen."""
    if not weights.frozen:
        raise FrozenWeightsError(
            "fflow.featurizer: featurize_learned requires frozen weights "
            "(run pretrain_ssl or mark them frozen explicitly)"
        )
    cfg = cfg or weights.cfg
    patches = _extract_patches(np.asarray(img, dtype=np.float32), cfg.patch)
    rows, cols, pdim = patches.shape
    with T.no_grad():
        tokens = T.matmul(Tensor(patches.reshape(1, rows * cols, pdim)),
                          weights.params["patch_proj.w"]) + weights.params["patch_proj.b"]
        if pos_scale != 0.0:
            pos = _grid_pos_embedding(rows, cols, cfg.dim) * np.float32(pos_scale)
            tokens = tokens + Tensor(pos[None])
        upto = cfg.blocks if cfg.layer_index == -1 else cfg.layer_index + 1
        x = _trunk(tokens, weights, upto=upto)
        x = nn.rms_norm(x, weights.params["feat_norm.w"])
        feats = T.matmul(x, weights.params["feat_head.w"])
    return LatentGrid.from_tensor(feats.reshape(rows, cols, cfg.d_f))


def pretrain_ssl(
    corpus: list[np.ndarray],
    cfg: FeaturizerConfig,
    steps: int,
    rng: Rng,
    batch: int = 8,
    mask_ratio: float = 0.5,
    lr: float = 1e-3,
) -> FeaturizerWeights:
    """Masked-patch reconstruction pretraining; returns frozen weights."""
    from .optim import Adam  # local import to avoid a cycle at module load

    if len(corpus) == 0:
        raise DataError("fflow.featurizer: pretrain_ssl needs a nonempty corpus")
    weights = init_learned(cfg, rng.split("init"))
    if steps == 0:
        weights.frozen = True
        return weights

    opt = Adam(weights.params, lr=lr, betas=(0.9, 0.999))
    first_loss = None
    for step in range(steps):
        srng = rng.split("step", step)
        idxs = srng.randint(0, len(corpus), (batch,))
        loss_terms = []
        for j, idx in enumerate(idxs):
            patches = _extract_patches(corpus[int(idx)], cfg.patch)
            rows, cols, pdim = patches.shape
            n = rows * cols
            flat = Tensor(patches.reshape(1, n, pdim))
            tokens = T.matmul(flat, weights.params["patch_proj.w"]) + weights.params["patch_proj.b"]
            pos = Tensor(_grid_pos_embedding(rows, cols, cfg.dim)[None])
            keep = srng.split("mask", j).uniform((n,)) >= mask_ratio
            if keep.all():  # always mask at least one patch
                keep[0] = False
            keep_f = Tensor(keep.astype(np.float32).reshape(1, n, 1))
            mask_tok = weights.params["mask_token"].reshape(1, 1, cfg.dim)
            mixed = tokens * keep_f + T.broadcast_to(mask_tok, (1, n, cfg.dim)) * (1.0 - keep_f)
            x = _trunk(mixed + pos, weights)
            recon = T.matmul(x, weights.params["recon_head.w"])
            miss = 1.0 - keep_f
            denom = float(max((~keep).sum() * pdim, 1))
            loss_terms.append(((recon - flat) * (recon - flat) * miss).sum() / denom)
        loss = loss_terms[0]
        for t in loss_terms[1:]:
            loss = loss + t
        loss = loss / float(len(loss_terms))
        value = loss.item()
        if not np.isfinite(value):
            raise NumericsError(f"fflow.featurizer: SSL loss diverged (NaN) at step {step}")
        if first_loss is None:
            first_loss = value
        opt.zero_grad()
        loss.backward()
        opt.step()
    weights.frozen = True
    weights.final_ssl_loss = value
    weights.initial_ssl_loss = first_loss
    return weights


class Featurizer:
    """Frozen callable facade over either featurizer kind."""

    def __init__(self, cfg: FeaturizerConfig, weights: FeaturizerWeights | None = None):
        self.cfg = cfg
        self.weights = weights
        if cfg.kind == "learned" and weights is None:
            raise FrozenWeightsError("fflow.featurizer: learned kind requires weights")
        if cfg.kind == "deterministic":
            self._proj = dct_projection(cfg.patch, cfg.d_f)

    def __call__(self, img: np.ndarray) -> LatentGrid:
        if self.cfg.kind == "deterministic":
            patches = _extract_patches(np.asarray(img, dtype=np.float32), self.cfg.patch)
            return LatentGrid.from_tensor(Tensor(patches @ self._proj.T))
        return featurize_learned(img, self.weights, self.cfg)

    def grid_shape(self, h: int, w: int) -> tuple[int, int]:
        return h // self.cfg.patch, w // self.cfg.patch
