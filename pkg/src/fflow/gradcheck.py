"""Finite-difference gradient verification.

The numeric side is central differences, computed independently of the
tape, so it can serve as the oracle for every differentiable op. `f` must
be deterministic: if it draws randomness, fix the stream before calling.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, float64_mode, no_grad


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-3,
) -> float:
    """Max relative error between tape gradients and central differences.

    Returns ``max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)`` over
    the elements of ``x``. The analytic side is the float32 tape; the
    difference quotients are evaluated in float64 so the oracle's own
    rounding noise stays far below the tolerance being enforced.
    """
    if h <= 0:
        raise ValueError("fflow.gradcheck: h must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    loss = f(probe)
    loss.backward()
    analytic = probe.grad.reshape(-1).astype(np.float64)

    flat = x.data.astype(np.float64).reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad(), float64_mode():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            f_plus = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[i] = flat[i] - h
            f_minus = f(Tensor(bumped.reshape(x.shape))).item()
            numeric[i] = (f_plus - f_minus) / (2.0 * h)

    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max())
