"""Dense float32 tensors with tape-based reverse-mode autodiff.

The tape is built eagerly during the forward pass: each op that touches a
grad-requiring tensor records its parents and a backward closure. Calling
`backward` on a scalar walks the tape once in reverse topological order,
accumulates gradients into `.grad`, and frees the graph. Inference code
wraps itself in `no_grad()` to skip tape construction entirely.

All data is float32 and row-major. Reductions run in numpy's fixed order,
so repeated runs on the same machine are bit-identical.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericsError, ShapeError

_grad_enabled = True
_active_dtype = np.float32


class no_grad:
    """Context manager that disables tape construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class float64_mode:
    """Evaluate forward passes in float64.

    Training and inference are float32 by contract; this exists so the
    finite-difference oracle can difference a low-noise evaluation of the
    same function.
    """

    def __enter__(self):
        global _active_dtype
        self._prev = _active_dtype
        _active_dtype = np.float64
        return self

    def __exit__(self, *exc):
        global _active_dtype
        _active_dtype = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=_active_dtype)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = ""

    # ---- basic introspection ----

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op!r})"

    def numpy(self) -> np.ndarray:
        """Copy of the underlying buffer."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("fflow.tensor: item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def check_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"fflow.tensor: non-finite values in {context}")
        return self

    def zero_grad(self) -> None:
        self.grad = None

    # ---- operator sugar ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    # ---- backward ----

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss; frees the graph afterwards."""
        if self.data.shape != ():
            raise NumericsError(
                f"fflow.tensor: backward requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise NumericsError("fflow.tensor: loss does not require grad")

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float32)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericsError(
                        f"fflow.tensor: NaN/Inf gradient in backward of op '{node._op}'"
                    )
                pg = pg.astype(np.float32, copy=False)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
            node._parents = ()
            node._backward = None
            node._op = ""


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; returns reverse topological order (root first).
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- binary arithmetic ----


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), "add", bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), "sub", bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), "mul", bwd)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(out, (a, b), "div", bwd)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    if isinstance(p, Tensor):
        raise ShapeError("fflow.tensor: power supports scalar exponents only")
    p = float(p)
    out = a.data**np.float32(p)

    def bwd(g):
        return (g * np.float32(p) * a.data ** np.float32(p - 1.0),)

    return _node(out, (a,), "pow", bwd)


# ---- unary elementwise ----


def _unary(a, op: str, fwd, dfun) -> Tensor:
    a = _wrap(a)
    out = fwd(a.data)

    def bwd(g):
        return (g * dfun(a.data, out),)

    return _node(out, (a,), op, bwd)


def exp(a) -> Tensor:
    return _unary(a, "exp", np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _unary(a, "log", np.log, lambda x, y: 1.0 / x)


def sin(a) -> Tensor:
    return _unary(a, "sin", np.sin, lambda x, y: np.cos(x))


def cos(a) -> Tensor:
    return _unary(a, "cos", np.cos, lambda x, y: -np.sin(x))


def sqrt(a) -> Tensor:
    return _unary(a, "sqrt", np.sqrt, lambda x, y: np.float32(0.5) / y)


def tanh(a) -> Tensor:
    return _unary(a, "tanh", np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a) -> Tensor:
    def fwd(x):
        return np.float32(1.0) / (np.float32(1.0) + np.exp(-x))

    return _unary(a, "sigmoid", fwd, lambda x, y: y * (1.0 - y))


def relu(a) -> Tensor:
    return _unary(a, "relu", lambda x: np.maximum(x, np.float32(0.0)), lambda x, y: (x > 0).astype(np.float32))


def silu(a) -> Tensor:
    def fwd(x):
        return x / (np.float32(1.0) + np.exp(-x))

    def dfun(x, y):
        s = np.float32(1.0) / (np.float32(1.0) + np.exp(-x))
        return s * (1.0 + x * (1.0 - s))

    return _unary(a, "silu", fwd, dfun)


def absolute(a) -> Tensor:
    return _unary(a, "abs", np.abs, lambda x, y: np.sign(x))


# ---- shape manipulation ----


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    old = a.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _node(out, (a,), "reshape", bwd)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return _node(out, (a,), "transpose", bwd)


def getitem(a, key) -> Tensor:
    a = _wrap(a)
    out = a.data[key]
    shape = a.shape

    def bwd(g):
        ga = np.zeros(shape, dtype=np.float32)
        np.add.at(ga, key, g)
        return (ga,)

    return _node(np.ascontiguousarray(out), (a,), "getitem", bwd)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def bwd(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _node(out, tuple(ts), "concat", bwd)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(ts)))

    return _node(out, tuple(ts), "stack", bwd)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    out = np.broadcast_to(a.data, shape).copy()
    old = a.shape

    def bwd(g):
        return (_unbroadcast(g, old),)

    return _node(out, (a,), "broadcast_to", bwd)


# ---- reductions ----


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), "sum", bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    n = a.data.size if axis is None else np.prod(
        [shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    inv = np.float32(1.0 / n)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g * inv, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return _node(out, (a,), "mean", bwd)


# ---- linear algebra ----


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("fflow.tensor: matmul operands must have ndim >= 2")
    out = np.matmul(a.data, b.data)
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if need_b:
            if b.ndim == 2 and a.ndim > 2:
                # batched activations against a shared weight: fold the batch
                # into one GEMM instead of materializing per-batch gradients
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), "matmul", bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (single fused tape node)."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), "softmax", bwd)


def gather_rows(table, ids: np.ndarray) -> Tensor:
    """Select rows `table[ids]`; gradient scatter-adds into the table."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]
    shape = table.shape

    def bwd(g):
        gt = np.zeros(shape, dtype=np.float32)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(np.ascontiguousarray(out), (table,), "gather_rows", bwd)


# ---- convolution / resampling primitives (channels-last) ----


def conv2d(x, w, b=None) -> Tensor:
    """Same-padded, stride-1 2-D convolution.

    x: [B, H, W, Cin]; w: [kh, kw, Cin, Cout]; b: [Cout] or None.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("fflow.tensor: conv2d expects x [B,H,W,Cin], w [kh,kw,Cin,Cout]")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(
            f"fflow.tensor: conv2d channel mismatch (x has {x.shape[3]}, w expects {w.shape[2]})"
        )
    kh, kw, cin, cout = w.shape
    ph, pw = kh // 2, kw // 2
    bsz, h, wd, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # windows: [B, H, W, Cin, kh, kw] -> [B*H*W, kh*kw*Cin]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    col = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * h * wd, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = col @ wmat
    if b is not None:
        b = _wrap(b)
        out = out + b.data
    out = out.reshape(bsz, h, wd, cout)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gflat = g.reshape(bsz * h * wd, cout)
        gw = (col.T @ gflat).reshape(kh, kw, cin, cout)
        gcol = (gflat @ wmat.T).reshape(bsz, h, wd, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + h, j : j + wd, :] += gcol[:, :, :, i, j, :]
        gx = gxp[:, ph : ph + h, pw : pw + wd, :]
        if b is None:
            return gx, gw
        return gx, gw, gflat.sum(axis=0)

    return _node(out, parents, "conv2d", bwd)


def upsample2x(x) -> Tensor:
    """Nearest-neighbor 2x upsampling of [B, H, W, C]."""
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError("fflow.tensor: upsample2x expects [B,H,W,C]")
    bsz, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bwd(g):
        return (g.reshape(bsz, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _node(out, (x,), "upsample2x", bwd)


def gaussian(shape: Sequence[int], rng) -> Tensor:
    """I.i.d. standard-normal tensor drawn from `rng`."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("fflow.tensor: gaussian requires a nonempty shape")
    if any(s <= 0 for s in shape):
        raise ShapeError(f"fflow.tensor: gaussian shape must be positive, got {shape}")
    return Tensor(rng.normal(shape))
