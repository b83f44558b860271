"""Staged progressive training, checkpointing, and sampling drivers.

A run is a pure function of (seed, schedule, dataset): batch composition,
timesteps, noise, and caption draws all come from streams keyed on
(seed, stage name, step), never from sequential state. That is what makes
mid-stage resume bit-exact and repeated runs byte-identical.

Autoencoder stages use Adam(0.5, 0.9); velocity-model stages use
AdamW(0.9, 0.95) with gradient clipping at global norm 1. The autoencoder
is never touched by the velocity stages; a weight hash asserts it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ftns
from .autoencoder import Autoencoder, LatentStats, ae_loss, fit_latent_stats, load_autoencoder, normalize, save_autoencoder
from .data import ShapesDataset
from .dit import DiTConfig, init_dit
from .errors import ConfigError, DataError, NumericsError, ShapeError
from .featurizer import LatentGrid
from .flow import DiTVelocity, LossConfig, SampleConfig, euler_sample_batch, fm_loss
from .optim import Adam, adamw
from .rng import Rng
from .tensor import Tensor
from .textcond import SamplingPolicy, sample_caption


@dataclass
class StageConfig:
    name: str
    kind: str  # "ae" | "dit"
    anchor_resolution: int
    resolutions: tuple[tuple[int, int], ...]
    steps: int
    batch: int
    lr: float
    betas: tuple[float, float]
    max_text_len: int = 256
    dataset_id: str = "C"
    caption_ratios: tuple[float, float, float] = (0.10, 0.35, 0.55)
    lang_ratio: float = 0.8
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ae", "dit"):
            raise ConfigError(f"fflow.pipeline: unknown stage kind {self.kind!r}")
        if self.steps < 1:
            raise ConfigError(f"fflow.pipeline: stage {self.name}: steps must be >= 1")
        if self.batch < 1:
            raise ConfigError(f"fflow.pipeline: stage {self.name}: batch must be >= 1")
        for h, w in self.resolutions:
            if h % 16 or w % 16:
                raise ConfigError(
                    f"fflow.pipeline: stage {self.name}: bucket {h}x{w} not divisible by 16"
                )

    def policy(self) -> SamplingPolicy:
        return SamplingPolicy(tuple(self.caption_ratios), self.lang_ratio)


class TrainState:
    """Mutable training state shared across stages."""

    def __init__(
        self,
        seed: int,
        dataset: ShapesDataset,
        ae: Autoencoder,
        dit_cfg: DiTConfig | None = None,
        dit_params: dict[str, Tensor] | None = None,
        loss_cfg: LossConfig | None = None,
        lambda_dm: float = 0.05,
    ):
        self.seed = seed
        self.dataset = dataset
        self.ae = ae
        self.dit_cfg = dit_cfg
        self.dit_params = dit_params
        self.loss_cfg = loss_cfg or LossConfig()
        self.lambda_dm = lambda_dm
        self._latents: dict[tuple[int, int, int], np.ndarray] = {}

    def init_dit(self, cfg: DiTConfig) -> None:
        self.dit_cfg = cfg
        self.dit_params = init_dit(cfg, Rng(self.seed).split("dit_init"))

    def latent(self, idx: int, res: tuple[int, int]) -> np.ndarray:
        """Normalized latent of image idx at resolution res (cached)."""
        if self.ae.stats is None:
            raise DataError("fflow.pipeline: latent stats missing; run fit-stats first")
        key = (idx, res[0], res[1])
        if key not in self._latents:
            grid = self.ae.encode(self.dataset.image(idx, res), mode="P")
            self._latents[key] = normalize(grid, self.ae.stats).data.data
        return self._latents[key]

    def ae_weight_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.ae.trainable_params()):
            h.update(self.ae.trainable_params()[name].data.tobytes())
        return h.hexdigest()


def _make_optimizer(stage: StageConfig, state: TrainState) -> Adam:
    if stage.kind == "ae":
        return Adam(state.ae.trainable_params(), lr=stage.lr, betas=stage.betas)
    if state.dit_params is None:
        raise ConfigError("fflow.pipeline: velocity model not initialized")
    return adamw(state.dit_params, lr=stage.lr, betas=stage.betas)


def _ae_step_loss(stage: StageConfig, state: TrainState, step: int) -> Tensor:
    bucket = stage.resolutions[step % len(stage.resolutions)]
    rng = Rng(state.seed).split("batch", stage.name, step)
    idxs = rng.randint(0, len(state.dataset), (stage.batch,))
    imgs = np.stack([state.dataset.image(int(i), bucket) for i in idxs])
    return ae_loss(imgs, state.ae.mode, state.ae, lambda_dm=state.lambda_dm)


def _dit_step_loss(stage: StageConfig, state: TrainState, step: int) -> Tensor:
    bucket = stage.resolutions[step % len(stage.resolutions)]
    rng = Rng(state.seed).split("batch", stage.name, step)
    idxs = rng.randint(0, len(state.dataset), (stage.batch,))
    x0 = np.stack([state.latent(int(i), bucket) for i in idxs])
    policy = stage.policy()
    texts = []
    for j, i in enumerate(idxs):
        crng = Rng(state.seed).split("cap", stage.name, step, j)
        _, _, text = sample_caption(state.dataset.caption_record(int(i)), policy, crng)
        texts.append(text)
    model = DiTVelocity(state.dit_params, state.dit_cfg, max_text_len=stage.max_text_len)
    return fm_loss(model, {"x0": x0, "text": texts},
                   Rng(state.seed).split("fm", stage.name, step), state.loss_cfg)


def run_stage(
    stage: StageConfig,
    state: TrainState,
    csv_path: str | Path | None = None,
    optimizer: Adam | None = None,
    start_step: int = 0,
    stop_after: int | None = None,
) -> Adam:
    """Execute optimizer steps [start_step, stop_after or stage.steps).

    Appends one ``step,loss`` CSV row per optimizer step. Returns the
    optimizer so callers can checkpoint or continue.
    """
    opt = optimizer or _make_optimizer(stage, state)
    end = stage.steps if stop_after is None else min(stop_after, stage.steps)
    rows = []
    for step in range(start_step, end):
        try:
            loss = _ae_step_loss(stage, state, step) if stage.kind == "ae" else \
                _dit_step_loss(stage, state, step)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericsError("non-finite loss")
            opt.zero_grad()
            loss.backward()
            opt.clip_global_norm(stage.grad_clip)
            opt.step()
        except NumericsError as e:
            raise NumericsError(
                f"fflow.pipeline: stage {stage.name} aborted at step {step}: {e}"
            ) from e
        rows.append(f"{step},{value:.8e}")
    if csv_path is not None:
        path = Path(csv_path)
        new_file = not path.exists() or start_step == 0
        header = "step,loss\n" if new_file else ""
        mode = "w" if new_file else "a"
        with open(path, mode) as f:
            f.write(header)
            if rows:
                f.write("\n".join(rows) + "\n")
    return opt


def train_autoencoder(schedule: list[StageConfig], state: TrainState, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stage in schedule:
        if stage.kind != "ae":
            raise ConfigError("fflow.pipeline: train_autoencoder got a non-ae stage")
        run_stage(stage, state, out / f"losses_{stage.name}.csv")


def train_t2i(schedule: list[StageConfig], state: TrainState, out_dir: str | Path) -> None:
    """Run the staged velocity-model schedule; autoencoder weights stay frozen."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ae_hash = state.ae_weight_hash()
    for stage in schedule:
        if stage.kind != "dit":
            raise ConfigError("fflow.pipeline: train_t2i got a non-dit stage")
        run_stage(stage, state, out / f"losses_{stage.name}.csv")
    if state.ae_weight_hash() != ae_hash:
        raise NumericsError("fflow.pipeline: autoencoder weights changed during t2i training")


# ---- checkpointing ----


@dataclass
class Checkpoint:
    root: Path
    stage: str
    next_step: int
    seed: int
    kind: str
    opt_t: int


def save_checkpoint(
    root: str | Path,
    state: TrainState,
    stage: StageConfig,
    next_step: int,
    optimizer: Adam | None = None,
) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_autoencoder(root, state.ae)
    meta = [
        f"seed = {state.seed}",
        f"rng_seed = {state.seed}",  # all streams are derived from (seed, labels)
        f"stage = {stage.name}",
        f"kind = {stage.kind}",
        f"next_step = {next_step}",
        f"opt_t = {optimizer.t if optimizer else 0}",
        f"lambda_dm = {state.lambda_dm}",
        f"loss.p_drop = {state.loss_cfg.p_drop}",
        f"loss.lambda_t = {state.loss_cfg.lambda_t}",
        f"loss.squared = {int(state.loss_cfg.squared)}",
    ]
    if state.dit_params is not None:
        c = state.dit_cfg
        meta += [
            f"dit.dim = {c.dim}", f"dit.layers = {c.layers}", f"dit.heads = {c.heads}",
            f"dit.kv_heads = {c.kv_heads}", f"dit.z_dim = {c.z_dim}",
            f"dit.time_embed_dim = {c.time_embed_dim}", f"dit.vocab = {c.vocab}",
            f"dit.sin_dim = {c.sin_dim}",
        ]
        ftns.save_group(root / "dit", state.dit_params)
    if optimizer is not None:
        ftns.save_group(root / "optim", optimizer.state_arrays())
    (root / "meta.txt").write_text("\n".join(meta) + "\n")


def load_checkpoint(root: str | Path, dataset: ShapesDataset) -> tuple[TrainState, Checkpoint]:
    root = Path(root)
    meta: dict[str, str] = {}
    for line in (root / "meta.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    kind = meta.get("kind", "ae")
    ae = load_autoencoder(root, trainable=(kind == "ae"))
    state = TrainState(
        seed=int(meta["seed"]),
        dataset=dataset,
        ae=ae,
        loss_cfg=LossConfig(
            lambda_t=meta.get("loss.lambda_t", "const"),
            p_drop=float(meta.get("loss.p_drop", 0.1)),
            squared=bool(int(meta.get("loss.squared", 1))),
        ),
        lambda_dm=float(meta.get("lambda_dm", 0.05)),
    )
    if (root / "dit" / "manifest.txt").exists():
        cfg = DiTConfig(
            dim=int(meta["dit.dim"]), layers=int(meta["dit.layers"]),
            heads=int(meta["dit.heads"]), kv_heads=int(meta["dit.kv_heads"]),
            z_dim=int(meta["dit.z_dim"]), time_embed_dim=int(meta["dit.time_embed_dim"]),
            vocab=int(meta["dit.vocab"]), sin_dim=int(meta["dit.sin_dim"]),
        )
        state.dit_cfg = cfg
        state.dit_params = ftns.load_group(root / "dit", requires_grad=True)
    ckpt = Checkpoint(
        root=root, stage=meta.get("stage", ""), next_step=int(meta.get("next_step", 0)),
        seed=int(meta["seed"]), kind=kind, opt_t=int(meta.get("opt_t", 0)),
    )
    return state, ckpt


def restore_optimizer(root: str | Path, stage: StageConfig, state: TrainState, ckpt: Checkpoint) -> Adam:
    opt = _make_optimizer(stage, state)
    arrays = {k: v.data for k, v in ftns.load_group(Path(root) / "optim").items()}
    opt.load_state_arrays(arrays, ckpt.opt_t)
    return opt


# ---- sampling driver ----


def sample_images(
    state: TrainState,
    prompts: list[str | None],
    sample_cfg: SampleConfig,
    rng: Rng,
    resolution: tuple[int, int] = (32, 32),
    max_text_len: int = 256,
) -> list[np.ndarray]:
    """Sample latents for each prompt, denormalize, decode to images."""
    if state.dit_params is None:
        raise ConfigError("fflow.pipeline: no velocity model in state")
    if state.ae.stats is None:
        raise DataError("fflow.pipeline: latent stats missing; run fit-stats first")
    patch = state.ae.featurizer.cfg.patch
    h, w = resolution
    if h % patch or w % patch:
        raise ShapeError(f"fflow.pipeline: resolution {h}x{w} not divisible by {patch}")
    shape = (h // patch, w // patch, state.dit_cfg.z_dim)
    model = DiTVelocity(state.dit_params, state.dit_cfg, max_text_len=max_text_len)
    grids = euler_sample_batch(model, prompts, shape, sample_cfg, rng)
    stats = state.ae.stats
    images = []
    for g in grids:
        denorm = LatentGrid.from_tensor(g.data * Tensor(stats.std) + Tensor(stats.mean))
        images.append(state.ae.decode(denorm))
    return images
