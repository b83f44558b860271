"""Pixel <-> latent autoencoding on top of the frozen featurizer.

Mode P uses the frozen features as-is; mode R concatenates extra channels
from a small trainable ViT branch so reconstruction can recover detail the
frozen features drop. Both share one convolutional decoder that undoes the
16x patch downsampling with four nearest-neighbor 2x upsampling stages.

Reconstruction trains with plain L1. The residual branch additionally pays
a batch moment-matching penalty (mean -> 0, variance -> 1 per channel),
a closed-form surrogate for keeping its channels distributionally tame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ftns, nn
from . import tensor as T
from .errors import DataError, ShapeError
from .featurizer import Featurizer, FeaturizerConfig, FeaturizerWeights, LatentGrid, _extract_patches
from .rng import Rng
from .tensor import Tensor


@dataclass
class ResidualEncoderConfig:
    extra_channels: int = 8
    blocks: int = 2
    dim: int = 48
    heads: int = 4
    rope: bool = True

    def __post_init__(self):
        if self.extra_channels < 1:
            raise ShapeError("fflow.autoencoder: R mode needs extra_channels >= 1")


@dataclass
class DecoderConfig:
    channels: tuple[int, ...] = (64, 32, 32, 16, 16)
    out_channels: int = 3
    z_channels: int = 32
    patch: int = 16

    def __post_init__(self):
        stages = len(self.channels) - 1
        if 2**stages != self.patch:
            raise ShapeError(
                f"fflow.autoencoder: {stages} upsampling stages give x{2 ** stages}, "
                f"but the featurizer downsamples x{self.patch}"
            )


@dataclass
class LatentStats:
    mean: np.ndarray  # [d]
    std: np.ndarray  # [d]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if np.any(self.std <= 1e-6):
            bad = np.nonzero(self.std <= 1e-6)[0].tolist()
            raise DataError(f"fflow.autoencoder: zero-variance latent channels {bad}")


# ---- residual ViT branch ----


def init_residual(cfg: ResidualEncoderConfig, patch: int, rng: Rng) -> dict[str, Tensor]:
    pdim = patch * patch * 3
    d = cfg.dim
    params: dict[str, Tensor] = {
        "patch_proj.w": nn.xavier(pdim, d, rng.split("proj")),
        "patch_proj.b": nn.zeros_param((d,)),
        "head.w": nn.xavier(d, cfg.extra_channels, rng.split("head")),
        "head_norm.w": nn.ones_param((d,)),
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
    return params


def residual_forward(
    imgs: np.ndarray, params: dict[str, Tensor], cfg: ResidualEncoderConfig, patch: int
) -> Tensor:
    """[B, H, W, 3] -> [B, rows, cols, extra_channels], differentiable."""
    if imgs.ndim != 4:
        raise ShapeError("fflow.autoencoder: residual_forward expects [B, H, W, 3]")
    bsz = imgs.shape[0]
    grids = [_extract_patches(imgs[i], patch) for i in range(bsz)]
    rows, cols, pdim = grids[0].shape
    x = T.matmul(Tensor(np.stack(grids).reshape(bsz, rows * cols, pdim)),
                 params["patch_proj.w"]) + params["patch_proj.b"]
    rope = None
    if cfg.rope:
        rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        pos = np.stack([np.zeros(rows * cols), rr.ravel(), cc.ravel()], axis=-1)
        rope = nn.rope_tables(pos, cfg.dim // cfg.heads)
    for i in range(cfg.blocks):
        h = nn.rms_norm(x, params[f"b{i}.norm1.w"])
        x = x + nn.attention(
            h, params[f"b{i}.attn.wq"], params[f"b{i}.attn.wk"], params[f"b{i}.attn.wv"],
            params[f"b{i}.attn.wo"], cfg.heads, cfg.heads, rope=rope,
        )
        h = nn.rms_norm(x, params[f"b{i}.norm2.w"])
        x = x + T.matmul(T.silu(T.matmul(h, params[f"b{i}.mlp.w1"])), params[f"b{i}.mlp.w2"])
    x = nn.rms_norm(x, params["head_norm.w"])
    out = T.matmul(x, params["head.w"])
    return out.reshape(bsz, rows, cols, cfg.extra_channels)


# ---- convolutional decoder ----


def init_decoder(cfg: DecoderConfig, rng: Rng) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def conv_param(name: str, cin: int, cout: int, r: Rng):
        std = float(np.sqrt(2.0 / (9 * cin)))
        params[f"{name}.w"] = nn.normal_param((3, 3, cin, cout), std, r)
        params[f"{name}.b"] = nn.zeros_param((cout,))

    conv_param("conv_in", cfg.z_channels, cfg.channels[0], rng.split("in"))
    for i in range(1, len(cfg.channels)):
        # two convs per stage: the first follows the 2x upsample, the second
        # refines at that scale (truncated-frequency latents need the extra
        # nonlinearity to re-sharpen edges)
        conv_param(f"up{i}a", cfg.channels[i - 1], cfg.channels[i], rng.split("upa", i))
        conv_param(f"up{i}b", cfg.channels[i], cfg.channels[i], rng.split("upb", i))
    conv_param("conv_out", cfg.channels[-1], cfg.out_channels, rng.split("out"))
    return params


def decoder_forward(latents: Tensor, params: dict[str, Tensor], cfg: DecoderConfig) -> Tensor:
    """[B, rows, cols, z] -> [B, rows*16, cols*16, 3] in (0, 1), differentiable."""
    if latents.shape[-1] != cfg.z_channels:
        raise ShapeError(
            f"fflow.autoencoder: latent has {latents.shape[-1]} channels, "
            f"decoder expects {cfg.z_channels}"
        )
    x = T.silu(T.conv2d(latents, params["conv_in.w"], params["conv_in.b"]))
    for i in range(1, len(cfg.channels)):
        x = T.upsample2x(x)
        x = T.silu(T.conv2d(x, params[f"up{i}a.w"], params[f"up{i}a.b"]))
        x = T.silu(T.conv2d(x, params[f"up{i}b.w"], params[f"up{i}b.b"]))
    x = T.conv2d(x, params["conv_out.w"], params["conv_out.b"])
    return T.sigmoid(x)


# ---- the autoencoder facade ----


class Autoencoder:
    def __init__(
        self,
        featurizer: Featurizer,
        decoder_cfg: DecoderConfig,
        decoder_params: dict[str, Tensor],
        residual_cfg: ResidualEncoderConfig | None = None,
        residual_params: dict[str, Tensor] | None = None,
        stats: LatentStats | None = None,
    ):
        self.featurizer = featurizer
        self.decoder_cfg = decoder_cfg
        self.decoder_params = decoder_params
        self.residual_cfg = residual_cfg
        self.residual_params = residual_params
        self.stats = stats

    @classmethod
    def build(
        cls,
        rng: Rng,
        mode: str = "P",
        feat_cfg: FeaturizerConfig | None = None,
        residual_cfg: ResidualEncoderConfig | None = None,
        feat_weights: FeaturizerWeights | None = None,
    ) -> "Autoencoder":
        feat_cfg = feat_cfg or FeaturizerConfig()
        featurizer = Featurizer(feat_cfg, feat_weights)
        extra = 0
        residual_params = None
        if mode == "R":
            residual_cfg = residual_cfg or ResidualEncoderConfig()
            residual_params = init_residual(residual_cfg, feat_cfg.patch, rng.split("residual"))
            extra = residual_cfg.extra_channels
        elif mode != "P":
            raise ShapeError(f"fflow.autoencoder: unknown mode {mode!r}")
        dec_cfg = DecoderConfig(z_channels=feat_cfg.d_f + extra, patch=feat_cfg.patch)
        dec_params = init_decoder(dec_cfg, rng.split("decoder"))
        return cls(featurizer, dec_cfg, dec_params, residual_cfg if mode == "R" else None,
                   residual_params)

    @property
    def mode(self) -> str:
        return "R" if self.residual_params is not None else "P"

    @property
    def latent_dim(self) -> int:
        extra = self.residual_cfg.extra_channels if self.residual_params else 0
        return self.featurizer.cfg.d_f + extra

    def trainable_params(self) -> dict[str, Tensor]:
        out = {f"decoder.{k}": v for k, v in self.decoder_params.items()}
        if self.residual_params is not None:
            out.update({f"residual.{k}": v for k, v in self.residual_params.items()})
        return out

    def encode(self, img: np.ndarray, mode: str | None = None) -> LatentGrid:
        return encode(img, mode or self.mode, self)

    def decode(self, latent: LatentGrid | Tensor | np.ndarray) -> np.ndarray:
        return decode(latent, self)


def encode(img: np.ndarray, mode: str, ae: Autoencoder) -> LatentGrid:
    """Image -> latent grid. P: frozen features; R: features ++ residual channels."""
    grid = ae.featurizer(img)
    if mode == "P":
        return grid
    if mode != "R":
        raise ShapeError(f"fflow.autoencoder: unknown mode {mode!r}")
    if ae.residual_params is None:
        raise ShapeError("fflow.autoencoder: mode R requested but no residual weights loaded")
    resid = residual_forward(
        np.asarray(img, dtype=np.float32)[None], ae.residual_params, ae.residual_cfg,
        ae.featurizer.cfg.patch,
    )
    joined = T.concat([grid.data, resid.reshape(grid.rows, grid.cols, -1)], axis=-1)
    return LatentGrid.from_tensor(joined)


def decode(latent: LatentGrid | Tensor | np.ndarray, ae: Autoencoder) -> np.ndarray:
    """Latent grid -> [rows*16, cols*16, 3] image in [0, 1]."""
    data = latent.data if isinstance(latent, LatentGrid) else latent
    if not isinstance(data, Tensor):
        data = Tensor(data)
    with T.no_grad():
        img = decoder_forward(data.reshape((1,) + data.shape), ae.decoder_params, ae.decoder_cfg)
    out = img.data[0]
    if not np.all(np.isfinite(out)):
        raise DataError("fflow.autoencoder: decoder produced non-finite pixels")
    return out


def ae_loss(
    imgs: np.ndarray,
    mode: str,
    ae: Autoencoder,
    lambda_dm: float = 0.05,
) -> Tensor:
    """L1 reconstruction + lambda_dm * residual moment-matching penalty.

    `imgs` is a [B, H, W, 3] batch at one resolution. In P mode only the
    decoder trains and the penalty term is absent.
    """
    imgs = np.asarray(imgs, dtype=np.float32)
    if imgs.ndim != 4 or imgs.shape[0] == 0:
        raise DataError("fflow.autoencoder: ae_loss needs a nonempty [B, H, W, 3] batch")
    bsz = imgs.shape[0]
    with T.no_grad():
        frozen = T.stack([ae.featurizer(imgs[i]).data for i in range(bsz)], axis=0)
    frozen = frozen.detach()
    if mode == "R":
        if ae.residual_params is None:
            raise ShapeError("fflow.autoencoder: mode R without residual weights")
        resid = residual_forward(imgs, ae.residual_params, ae.residual_cfg, ae.featurizer.cfg.patch)
        latent = T.concat([frozen, resid], axis=-1)
    else:
        latent = frozen
    recon = decoder_forward(latent, ae.decoder_params, ae.decoder_cfg)
    loss = T.absolute(recon - Tensor(imgs)).mean()
    if mode == "R" and lambda_dm != 0.0:
        mean_c = resid.mean(axis=(0, 1, 2))
        var_c = ((resid - mean_c.reshape(1, 1, 1, -1)) ** 2).mean(axis=(0, 1, 2))
        penalty = (mean_c * mean_c + (var_c - 1.0) ** 2).sum()
        loss = loss + np.float32(lambda_dm) * penalty
    return loss


# ---- latent normalization ----


def fit_latent_stats(corpus: list[np.ndarray], encoder) -> LatentStats:
    """Per-channel mean/std of encoder outputs over the corpus."""
    if len(corpus) == 0:
        raise DataError("fflow.autoencoder: fit_latent_stats needs a nonempty corpus")
    tokens = []
    for img in corpus:
        grid = encoder(img)
        tokens.append(grid.data.data.reshape(-1, grid.d).astype(np.float64))
    allt = np.concatenate(tokens, axis=0)
    mean = allt.mean(axis=0)
    std = allt.std(axis=0)
    return LatentStats(mean.astype(np.float32), std.astype(np.float32))


def normalize(latent: LatentGrid, stats: LatentStats) -> LatentGrid:
    data = (latent.data - Tensor(stats.mean)) / Tensor(stats.std)
    return LatentGrid.from_tensor(data)


def denormalize(latent: LatentGrid, stats: LatentStats) -> LatentGrid:
    data = latent.data * Tensor(stats.std) + Tensor(stats.mean)
    return LatentGrid.from_tensor(data)


# ---- checkpointing (featurizer/, residual/, decoder/, stats/) ----


def save_autoencoder(root: str | Path, ae: Autoencoder) -> None:
    root = Path(root)
    fz = ae.featurizer
    meta = [
        f"featurizer.kind = {fz.cfg.kind}",
        f"featurizer.patch = {fz.cfg.patch}",
        f"featurizer.d_f = {fz.cfg.d_f}",
        f"featurizer.dim = {fz.cfg.dim}",
        f"featurizer.heads = {fz.cfg.heads}",
        f"featurizer.blocks = {fz.cfg.blocks}",
        f"featurizer.layer_index = {fz.cfg.layer_index}",
        f"mode = {ae.mode}",
        f"decoder.channels = {','.join(str(c) for c in ae.decoder_cfg.channels)}",
        f"decoder.z_channels = {ae.decoder_cfg.z_channels}",
    ]
    ftns.save_group(root / "featurizer", fz.weights.params if fz.weights else {})
    ftns.save_group(root / "decoder", ae.decoder_params)
    if ae.residual_params is not None:
        rc = ae.residual_cfg
        meta += [
            f"residual.extra_channels = {rc.extra_channels}",
            f"residual.blocks = {rc.blocks}",
            f"residual.dim = {rc.dim}",
            f"residual.heads = {rc.heads}",
            f"residual.rope = {int(rc.rope)}",
        ]
        ftns.save_group(root / "residual", ae.residual_params)
    if ae.stats is not None:
        ftns.save_group(root / "stats", {"mean": Tensor(ae.stats.mean), "std": Tensor(ae.stats.std)})
    (root / "ae_meta.txt").write_text("\n".join(meta) + "\n")


def load_autoencoder(root: str | Path, trainable: bool = False) -> Autoencoder:
    root = Path(root)
    meta: dict[str, str] = {}
    for line in (root / "ae_meta.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    fcfg = FeaturizerConfig(
        patch=int(meta["featurizer.patch"]),
        d_f=int(meta["featurizer.d_f"]),
        kind=meta["featurizer.kind"],
        layer_index=int(meta["featurizer.layer_index"]),
        dim=int(meta["featurizer.dim"]),
        heads=int(meta["featurizer.heads"]),
        blocks=int(meta["featurizer.blocks"]),
    )
    weights = None
    if fcfg.kind == "learned":
        params = ftns.load_group(root / "featurizer")
        weights = FeaturizerWeights(params, fcfg, frozen=True)
    featurizer = Featurizer(fcfg, weights)
    channels = tuple(int(c) for c in meta["decoder.channels"].split(","))
    dec_cfg = DecoderConfig(channels=channels, z_channels=int(meta["decoder.z_channels"]),
                            patch=fcfg.patch)
    dec_params = ftns.load_group(root / "decoder", requires_grad=trainable)
    residual_cfg = None
    residual_params = None
    if meta.get("mode") == "R":
        residual_cfg = ResidualEncoderConfig(
            extra_channels=int(meta["residual.extra_channels"]),
            blocks=int(meta["residual.blocks"]),
            dim=int(meta["residual.dim"]),
            heads=int(meta["residual.heads"]),
            rope=bool(int(meta["residual.rope"])),
        )
        residual_params = ftns.load_group(root / "residual", requires_grad=trainable)
    stats = None
    if (root / "stats" / "manifest.txt").exists():
        g = ftns.load_group(root / "stats")
        stats = LatentStats(g["mean"].data, g["std"].data)
    return Autoencoder(featurizer, dec_cfg, dec_params, residual_cfg, residual_params, stats)
