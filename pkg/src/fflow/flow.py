"""Flow matching: the linear interpolant, training objective, and Euler sampler.

The interpolant is x_t = (1-t) x0 + t eps with eps standard normal, so t=1
is pure noise and t=0 is data. The network regresses the velocity target
eps - x0; sampling integrates the probability-flow ODE from t=1 down to
t=0 with plain Euler steps, optionally blending conditional and
unconditional predictions (classifier-free guidance).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .dit import DiTConfig, forward_batch
from .errors import ConfigError, DataError, NumericsError, ShapeError
from .featurizer import LatentGrid
from .rng import Rng
from .tensor import Tensor
from .textcond import tokenize

_LAMBDA_REGISTRY: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "const": lambda t: np.ones_like(t),
}


@dataclass
class LossConfig:
    lambda_t: str = "const"
    t_sampler: str = "uniform"
    p_drop: float = 0.1  # caption -> null probability for CFG training
    squared: bool = True  # squared L2 (default) vs plain L2 per-sample norm

    def __post_init__(self):
        if self.lambda_t not in _LAMBDA_REGISTRY:
            raise ConfigError(f"fflow.flow: unknown lambda_t {self.lambda_t!r}")
        if self.t_sampler != "uniform":
            raise ConfigError(f"fflow.flow: unknown t_sampler {self.t_sampler!r}")

    def weight(self, t: np.ndarray) -> np.ndarray:
        w = _LAMBDA_REGISTRY[self.lambda_t](t).astype(np.float32)
        if np.any(w <= 0):
            raise ConfigError("fflow.flow: lambda_t must be positive on (0, 1)")
        return w


@dataclass
class SampleConfig:
    steps: int = 50
    cfg_scale: float = 4.0
    null_caption: str = ""

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("fflow.flow: steps must be >= 1")
        if self.cfg_scale < 0:
            raise ConfigError("fflow.flow: cfg_scale must be >= 0")


def interpolate(x0, eps, t: float):
    """x_t = (1-t) x0 + t eps; exact at both endpoints (bit-level)."""
    x0d = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float32)
    epd = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float32)
    if x0d.shape != epd.shape:
        raise ShapeError(f"fflow.flow: interpolate shape mismatch {x0d.shape} vs {epd.shape}")
    if not 0.0 <= t <= 1.0:
        raise NumericsError(f"fflow.flow: t={t} outside [0, 1]")
    if t == 0.0:
        out = x0d.copy()
    elif t == 1.0:
        out = epd.copy()
    else:
        tf = np.float32(t)
        out = (np.float32(1.0) - tf) * x0d + tf * epd
    return Tensor(out) if isinstance(x0, Tensor) else out


def cfg_combine(v_cond, v_uncond, scale: float):
    """v_uncond + scale * (v_cond - v_uncond). scale 0 -> uncond, 1 -> cond."""
    sc = v_cond.shape if hasattr(v_cond, "shape") else np.shape(v_cond)
    su = v_uncond.shape if hasattr(v_uncond, "shape") else np.shape(v_uncond)
    if sc != su:
        raise ShapeError(f"fflow.flow: cfg_combine shape mismatch {sc} vs {su}")
    return v_uncond + np.float32(scale) * (v_cond - v_uncond)


def fm_loss(
    model: Callable,
    batch: dict,
    rng: Rng,
    cfg: LossConfig | None = None,
) -> Tensor:
    """Flow-matching loss over a batch.

    batch = {"x0": [B, rows, cols, d] normalized latents, "text": list[str]}.
    Per sample: fresh t ~ U[0,1] and eps ~ N(0,I); the caption drops to the
    null branch with probability p_drop. The model is called as
    ``model(x_t, t, texts)`` with texts[i] None for dropped captions, and
    must return a velocity tensor of x0's shape. Loss is the batch mean of
    ``lambda(t) * ||v - (eps - x0)||^2`` (sum over latent elements).
    """
    cfg = cfg or LossConfig()
    x0 = np.asarray(batch["x0"], dtype=np.float32)
    texts: Sequence[str | None] = batch.get("text") or [None] * x0.shape[0]
    if x0.ndim != 4 or x0.shape[0] == 0:
        raise DataError("fflow.flow: fm_loss needs a nonempty [B, rows, cols, d] batch")
    bsz = x0.shape[0]
    if len(texts) != bsz:
        raise DataError("fflow.flow: text list length != batch size")

    t = rng.uniform((bsz,)).astype(np.float32)
    eps = rng.normal(x0.shape)
    drop = rng.uniform((bsz,)) < cfg.p_drop
    texts = [None if drop[i] else texts[i] for i in range(bsz)]

    tb = t.reshape(bsz, 1, 1, 1)
    x_t = (np.float32(1.0) - tb) * x0 + tb * eps
    target = eps - x0

    v = model(Tensor(x_t), t, texts)
    if not isinstance(v, Tensor):
        v = Tensor(v)
    if v.shape != x0.shape:
        raise ShapeError(f"fflow.flow: model returned {v.shape}, expected {x0.shape}")

    diff = v - Tensor(target)
    per_sample = (diff * diff).sum(axis=(1, 2, 3))
    if not cfg.squared:
        per_sample = T.sqrt(per_sample + 1e-12)
    vals = per_sample.data
    if not np.all(np.isfinite(vals)):
        bad = int(np.nonzero(~np.isfinite(vals))[0][0])
        raise NumericsError(f"fflow.flow: NaN loss at sample index {bad}")
    return (per_sample * Tensor(cfg.weight(t))).mean()


def euler_sample(
    model: Callable,
    text_cond: str | None,
    shape: tuple[int, int, int],
    sample_cfg: SampleConfig,
    rng: Rng,
) -> LatentGrid:
    """Integrate the probability-flow ODE from noise (t=1) to data (t=0).

    Uniform grid, x <- x - dt * v_hat with
    v_hat = v_uncond + cfg_scale * (v_cond - v_uncond).
    The result is still normalized; callers denormalize and decode.
    """
    steps = sample_cfg.steps
    rows, cols, d = shape
    x = rng.normal((1, rows, cols, d))
    dt = np.float32(1.0 / steps)
    with T.no_grad():
        for k in range(steps):
            tk = np.float32(1.0 - k / steps)
            tvec = np.array([tk], dtype=np.float32)
            v_u = model(Tensor(x), tvec, [None])
            v_u = v_u.data if isinstance(v_u, Tensor) else np.asarray(v_u)
            if sample_cfg.cfg_scale == 0.0 or text_cond is None:
                v_hat = v_u
            else:
                v_c = model(Tensor(x), tvec, [text_cond])
                v_c = v_c.data if isinstance(v_c, Tensor) else np.asarray(v_c)
                v_hat = cfg_combine(v_c, v_u, sample_cfg.cfg_scale)
            x = x - dt * v_hat
            if not np.all(np.isfinite(x)):
                raise NumericsError(f"fflow.flow: NaN during integration at step {k}")
    return LatentGrid.from_tensor(Tensor(x[0]))


def euler_sample_batch(
    model: Callable,
    text_conds: Sequence[str | None],
    shape: tuple[int, int, int],
    sample_cfg: SampleConfig,
    rng: Rng,
) -> list[LatentGrid]:
    """Batched sampler: per-sample noise comes from rng.split(i), so each
    trajectory is independent of the batch composition."""
    steps = sample_cfg.steps
    rows, cols, d = shape
    bsz = len(text_conds)
    x = np.stack([rng.split("init", i).normal((rows, cols, d)) for i in range(bsz)])
    dt = np.float32(1.0 / steps)
    with T.no_grad():
        for k in range(steps):
            tk = np.float32(1.0 - k / steps)
            tvec = np.full(bsz, tk, dtype=np.float32)
            v_u = model(Tensor(x), tvec, [None] * bsz)
            v_u = v_u.data if isinstance(v_u, Tensor) else np.asarray(v_u)
            if sample_cfg.cfg_scale == 0.0:
                v_hat = v_u
            else:
                v_c = model(Tensor(x), tvec, list(text_conds))
                v_c = v_c.data if isinstance(v_c, Tensor) else np.asarray(v_c)
                v_hat = cfg_combine(v_c, v_u, sample_cfg.cfg_scale)
            x = x - dt * v_hat
            if not np.all(np.isfinite(x)):
                raise NumericsError(f"fflow.flow: NaN during integration at step {k}")
    return [LatentGrid.from_tensor(Tensor(x[i])) for i in range(bsz)]


class DiTVelocity:
    """Adapter exposing a DiT parameter set through the model protocol."""

    def __init__(self, params: dict[str, Tensor], cfg: DiTConfig, max_text_len: int = 256):
        self.params = params
        self.cfg = cfg
        self.max_text_len = max_text_len

    def __call__(self, x_t: Tensor, t: np.ndarray, texts: Sequence[str | None]) -> Tensor:
        ids = [tokenize(s or "", self.max_text_len) for s in texts]
        lens = np.array([len(i) for i in ids], dtype=np.int64)
        pad = int(lens.max())
        mat = np.zeros((len(ids), pad), dtype=np.int64)
        for i, seq in enumerate(ids):
            mat[i, : len(seq)] = seq
        return forward_batch(self.params, self.cfg, x_t, mat, lens, t)
