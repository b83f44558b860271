"""Finite-difference verification suites for the CLI and the test suite.

Inputs are kept away from kinks (relu/abs at 0) and singularities
(log/sqrt/div near 0) so central differences measure the smooth branch.
The transformer check uses a randomly initialized model: zero-initialized
gates would zero out entire branches and hide wiring bugs behind 0 = 0.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .dit import DiTConfig, forward_batch, init_dit
from .gradcheck import finite_diff_check
from .rng import Rng
from .tensor import Tensor


def op_checks(seed: int = 0, h: float = 1e-3) -> dict[str, float]:
    """Max relative FD error for every differentiable primitive."""
    rng = Rng(seed)

    def n(*shape):
        return rng.normal(shape)

    def away(*shape, margin=0.4):
        x = rng.normal(shape)
        return x + np.sign(x) * np.float32(margin)

    def pos(*shape, floor=0.5):
        return np.abs(rng.normal(shape)) + np.float32(floor)

    # Every multiplier the lambdas close over is drawn once, here: a fresh
    # draw inside f would make f non-deterministic and the check meaningless.
    c_a = Tensor(n(4, 5))
    c_b = Tensor(away(4, 5))
    c_m = Tensor(n(3, 4))
    c_v4 = Tensor(n(4))
    c_v5 = Tensor(n(5))
    c_45 = Tensor(n(4, 5))
    c_54 = Tensor(n(5, 4))
    c_35 = Tensor(n(3, 5))
    c_23 = Tensor(n(2, 3))
    c_85 = Tensor(n(8, 5))
    c_245 = Tensor(n(2, 4, 5))
    c_345 = Tensor(n(3, 4, 5))
    c_43 = Tensor(n(4, 3))
    cb_243 = Tensor(n(2, 4, 3))
    cb_233 = Tensor(n(2, 3, 3))
    c_conv = Tensor(n(2, 4, 4, 3))
    w_conv = Tensor(n(3, 3, 2, 3) * 0.3)
    x_conv = Tensor(n(2, 4, 4, 2))
    c_up = Tensor(n(1, 4, 4, 2))
    table_ids = np.array([0, 2, 2, 5])

    cases = {
        "add": (lambda x: ((x + c_a) * c_b).mean(), Tensor(n(4, 5))),
        "sub": (lambda x: ((x - c_a) * c_b).mean(), Tensor(n(4, 5))),
        "mul": (lambda x: (x * c_a).mean(), Tensor(n(4, 5))),
        "div": (lambda x: (x / c_b).mean(), Tensor(n(4, 5))),
        "neg": (lambda x: (-x * c_a).mean(), Tensor(n(4, 5))),
        "pow": (lambda x: (x**3.0).mean(), Tensor(away(4, 5))),
        "exp": (lambda x: (T.exp(x) * c_a).mean(), Tensor(n(4, 5) * 0.5)),
        "log": (lambda x: (T.log(x) * c_a).mean(), Tensor(pos(4, 5))),
        "sin": (lambda x: (T.sin(x) * c_a).mean(), Tensor(n(4, 5))),
        "cos": (lambda x: (T.cos(x) * c_a).mean(), Tensor(n(4, 5))),
        "sqrt": (lambda x: (T.sqrt(x) * c_a).mean(), Tensor(pos(4, 5))),
        "tanh": (lambda x: (T.tanh(x) * c_a).mean(), Tensor(n(4, 5))),
        "sigmoid": (lambda x: (T.sigmoid(x) * c_a).mean(), Tensor(n(4, 5))),
        "relu": (lambda x: (T.relu(x) * c_a).mean(), Tensor(away(4, 5))),
        "silu": (lambda x: (T.silu(x) * c_a).mean(), Tensor(n(4, 5))),
        "abs": (lambda x: (T.absolute(x) * c_a).mean(), Tensor(away(4, 5))),
        "matmul": (lambda x: (T.matmul(x, c_a) * c_35).mean(), Tensor(n(3, 4))),
        "matmul_batched": (
            lambda x: (T.matmul(x, cb_243) * cb_233).mean(),
            Tensor(n(2, 3, 4)),
        ),
        "softmax": (lambda x: (T.softmax(x, -1) * c_m).sum(), Tensor(n(3, 4))),
        "sum": (lambda x: (x.sum(axis=1) * c_v4).mean(), Tensor(n(4, 5))),
        "mean": (lambda x: (x.mean(axis=0) * c_v5).sum(), Tensor(n(4, 5))),
        "reshape": (lambda x: (x.reshape(5, 4) * c_54).mean(), Tensor(n(4, 5))),
        "transpose": (lambda x: (x.transpose((1, 0)) * c_54).mean(), Tensor(n(4, 5))),
        "getitem": (lambda x: (x[1:3, ::2] * c_23).mean(), Tensor(n(4, 5))),
        "concat": (lambda x: (T.concat([x, c_a], axis=0) * c_85).mean(), Tensor(n(4, 5))),
        "stack": (lambda x: (T.stack([x, c_a], axis=0) * c_245).mean(), Tensor(n(4, 5))),
        "broadcast_to": (
            lambda x: (T.broadcast_to(x, (3, 4, 5)) * c_345).mean(),
            Tensor(n(1, 4, 5)),
        ),
        "gather_rows": (
            lambda x: (T.gather_rows(x, table_ids) * c_43).mean(),
            Tensor(n(6, 3)),
        ),
        "conv2d": (
            lambda x: (T.conv2d(x, w_conv) * c_conv).mean(),
            Tensor(n(2, 4, 4, 2) * 0.5),
        ),
        "conv2d_weight": (
            lambda w: (T.conv2d(x_conv, w) * c_conv).mean(),
            Tensor(n(3, 3, 2, 3) * 0.3),
        ),
        "upsample2x": (lambda x: (T.upsample2x(x) * c_up).sum(), Tensor(n(1, 2, 2, 2))),
    }
    return {name: finite_diff_check(f, x, h=h) for name, (f, x) in cases.items()}


def dit_grad_check(seed: int = 0, h: float = 2e-4) -> dict[str, float]:
    """FD check of a 1-layer dim-16 velocity model w.r.t. input and weights.

    The default step is smaller than the elementwise-op default: the
    composed network has enough curvature that h=1e-3 leaves visible
    O(h^2) truncation in the difference quotients themselves.
    """
    rng = Rng(seed)
    cfg = DiTConfig(dim=16, layers=1, heads=2, kv_heads=1, z_dim=4,
                    time_embed_dim=16, vocab=16, sin_dim=8)
    params = init_dit(cfg, rng.split("init"), zero_gates=False)
    latent = rng.normal((1, 2, 2, 4))
    ids = np.array([[3, 7]])
    lens = np.array([2])
    t = np.array([0.37], dtype=np.float32)
    weight = Tensor(rng.normal((1, 2, 2, 4)))

    def run(lat, ps):
        return (forward_batch(ps, cfg, lat, ids, lens, t) * weight).mean()

    results = {"dit.input": finite_diff_check(lambda x: run(x, params), Tensor(latent), h=h)}
    for name in sorted(params):
        def f(p, name=name):
            ps = dict(params)
            ps[name] = p
            return run(Tensor(latent), ps)

        results[f"dit.{name}"] = finite_diff_check(f, params[name].detach(), h=h)
    return results
