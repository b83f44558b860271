"""Adam-family optimizers over named parameter dicts.

Parameters are traversed in sorted-name order everywhere so that update
arithmetic, and therefore checkpoints, are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decoupled: bool = False,
    ):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.decoupled = decoupled
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clip_global_norm(self, max_norm: float) -> float:
        sq = 0.0
        for name in sorted(self.params):
            g = self.params[name].grad
            if g is not None:
                sq += float(np.sum(g.astype(np.float64) ** 2))
        norm = float(np.sqrt(sq))
        if norm > max_norm and norm > 0.0:
            scale = np.float32(max_norm / norm)
            for name in sorted(self.params):
                g = self.params[name].grad
                if g is not None:
                    self.params[name].grad = g * scale
        return norm

    def step(self) -> None:
        self.t += 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        bias1 = np.float32(1.0 - self.beta1**self.t)
        bias2 = np.float32(1.0 - self.beta2**self.t)
        lr = np.float32(self.lr)
        eps = np.float32(self.eps)
        wd = np.float32(self.weight_decay)
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            if self.weight_decay and not self.decoupled:
                g = g + wd * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (np.float32(1.0) - b1) * g
            v *= b2
            v += (np.float32(1.0) - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + eps)
            if self.weight_decay and self.decoupled:
                update = update + wd * p.data
            p.data = p.data - lr * update

    # ---- checkpointing ----

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in sorted(self.params):
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for name in self.params:
            self.m[name] = np.array(arrays[f"m.{name}"], dtype=np.float32)
            self.v[name] = np.array(arrays[f"v.{name}"], dtype=np.float32)
        self.t = int(t)


def adamw(params: dict[str, Tensor], lr: float, betas: tuple[float, float], weight_decay: float = 0.0) -> Adam:
    return Adam(params, lr=lr, betas=betas, weight_decay=weight_decay, decoupled=True)
