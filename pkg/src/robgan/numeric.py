"""Tensors with reverse-mode gradients over numpy buffers.

Every primitive computes its output eagerly and records a closure on the
output tensor; ``backward`` replays the closures in reverse topological
order. The traversal order and the accumulation order of gradient sums are
fixed by graph construction order, so gradients are bitwise reproducible
for identical forward passes.

Two numeric modes exist: 32-bit for training, 64-bit for gradient checks
(finite differences are unreliable in float32). The mode is selected by the
``ROBGAN_PRECISION`` environment variable at import time or by
``set_precision`` afterwards.

Tensors taking part in a live graph must never be mutated in place;
optimizers rebind ``tensor.data`` to a fresh array instead.
"""
from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, NumericError, ShapeError, ValidationError

_PRECISION_BITS = 64 if os.environ.get("ROBGAN_PRECISION", "32") == "64" else 32


def set_precision(bits: int) -> None:
    """Select the numeric mode for newly created leaf tensors (32 or 64)."""
    global _PRECISION_BITS
    if bits not in (32, 64):
        raise ValidationError(f"precision must be 32 or 64, got {bits}")
    _PRECISION_BITS = bits


def precision_bits() -> int:
    return _PRECISION_BITS


def default_dtype() -> np.dtype:
    return np.dtype(np.float64 if _PRECISION_BITS == 64 else np.float32)


@contextmanager
def precision(bits: int):
    """Temporarily switch the numeric mode (used by gradient-check suites)."""
    old = _PRECISION_BITS
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(old)


class Tensor:
    """N-dimensional array of real scalars with an attached gradient slot.

    Leaf construction casts to the current default dtype. ``grad`` is filled
    by ``backward`` on every leaf with ``requires_grad`` set; other leaves
    are left untouched.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], None] | None = None
        self._backward_done = False

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor with dims {self.dims}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A graph-free view of the same values (no copy, no gradient)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
        t._backward_done = False
        return t

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"


def _op(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Internal node constructor; keeps the computed dtype as-is and drops
    the graph entirely when no parent needs gradients."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._parents = parents
        t._vjp = vjp
    else:
        t._parents = ()
        t._vjp = None
    t._backward_done = False
    return t


def check_finite(values: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values in {context}")


@contextmanager
def frozen(params: Iterable[Tensor]):
    """Clear ``requires_grad`` on ``params`` for the duration of the block.

    Forward passes run inside the block build no graph through the frozen
    tensors, so backward leaves their ``grad`` untouched.
    """
    ps = list(params)
    old = [p.requires_grad for p in ps]
    for p in ps:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(ps, old):
            p.requires_grad = flag


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The loss must be scalar and the graph must not have been consumed by an
    earlier backward; both misuses raise ``GraphError``. Non-finite leaf
    gradients raise ``NumericError``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got dims {loss.dims}")
    if loss._backward_done:
        raise GraphError("backward already ran for this loss; rebuild the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor with requires_grad set")

    # Post-order DFS; parents are visited in construction order, which fixes
    # the gradient accumulation order.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)

    for node in reversed(topo):
        if node._parents and node._vjp is None:
            raise GraphError("graph node already consumed by a previous backward")
        if node._vjp is not None:
            node._vjp(node.grad)
            node._vjp = None
    loss._backward_done = True

    for node in topo:
        if node.is_leaf() and node.requires_grad:
            check_finite(node.grad, "gradient of leaf tensor after backward")


# ---------------------------------------------------------------------------
# forward primitives


def _require(cond: bool, op: str, message: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {message}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.data.ndim == 2 and b.data.ndim == 2, "matmul",
             f"expects 2-d operands, got dims {a.dims} and {b.dims}")
    _require(a.shape[1] == b.shape[0], "matmul",
             f"inner dims differ: {a.dims} x {b.dims}")
    out = a.data @ b.data

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _op(out, (a, b), vjp)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW images with OIHW kernels, zero padding."""
    _require(x.data.ndim == 4 and w.data.ndim == 4, "conv2d",
             f"expects 4-d image and kernel, got dims {x.dims} and {w.dims}")
    _require(stride >= 1, "conv2d", f"stride must be >= 1, got {stride}")
    _require(pad >= 0, "conv2d", f"pad must be >= 0, got {pad}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    _require(ci == c, "conv2d", f"kernel expects {ci} channels, image has {c}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    _require(hp >= kh and wp >= kw, "conv2d",
             f"kernel {list(w.shape[2:])} larger than padded image {[hp, wp]}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(co, -1)
    out = np.ascontiguousarray(
        (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2))

    def vjp(g: np.ndarray) -> None:
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        if w.requires_grad:
            w.grad += (gmat.T @ cols).reshape(w.shape)
        if x.requires_grad:
            gwin = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + (ho - 1) * stride + 1:stride,
                        j:j + (wo - 1) * stride + 1:stride] += gwin[:, :, :, :, i, j]
            x.grad += gxp[:, :, pad:pad + h, pad:pad + wd]

    return _op(out, (x, w), vjp)


def upsample2x_nearest(x: Tensor) -> Tensor:
    _require(x.data.ndim == 4, "upsample2x_nearest",
             f"expects 4-d input, got dims {x.dims}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))

    return _op(out, (x,), vjp)


def mean_pool2d(x: Tensor, window: int) -> Tensor:
    _require(x.data.ndim == 4, "mean_pool2d", f"expects 4-d input, got dims {x.dims}")
    n, c, h, w = x.shape
    _require(window >= 1 and h % window == 0 and w % window == 0, "mean_pool2d",
             f"window {window} must divide spatial dims {[h, w]}")
    out = x.data.reshape(n, c, h // window, window, w // window, window).mean(axis=(3, 5))

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            scaled = g / (window * window)
            x.grad += scaled.repeat(window, axis=2).repeat(window, axis=3)

    return _op(out, (x,), vjp)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a rank-1 bias along the channel/feature axis of a 2-d or 4-d tensor."""
    _require(b.data.ndim == 1, "add_bias", f"bias must be rank 1, got dims {b.dims}")
    if x.data.ndim == 2:
        _require(b.size == x.shape[1], "add_bias",
                 f"bias dims {b.dims} vs features {x.dims}")
        out = x.data + b.data[None, :]
        axes = (0,)
    elif x.data.ndim == 4:
        _require(b.size == x.shape[1], "add_bias",
                 f"bias dims {b.dims} vs channels {x.dims}")
        out = x.data + b.data[None, :, None, None]
        axes = (0, 2, 3)
    else:
        raise ShapeError(f"add_bias: expects 2-d or 4-d input, got dims {x.dims}")

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g
        if b.requires_grad:
            b.grad += g.sum(axis=axes)

    return _op(out, (x, b), vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * (x.data > 0)

    return _op(out, (x,), vjp)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(x.data > 0, x.data, x.data * slope)

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * np.where(x.data > 0, 1.0, slope)

    return _op(out, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * (1.0 - out * out)

    return _op(out, (x,), vjp)


def _sigmoid(values: np.ndarray) -> np.ndarray:
    out = np.empty_like(values)
    pos = values >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-values[pos]))
    ez = np.exp(values[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * out * (1.0 - out)

    return _op(out, (x,), vjp)


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    dims = tuple(int(d) for d in dims)
    _require(all(d > 0 for d in dims), "reshape", f"dims must be positive, got {list(dims)}")
    _require(int(np.prod(dims)) == x.size, "reshape",
             f"cannot reshape dims {x.dims} into {list(dims)}")
    out = x.data.reshape(dims)

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g.reshape(x.shape)

    return _op(out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    _require(len(tensors) >= 1, "concat", "needs at least one input")
    first = tensors[0]
    for t in tensors[1:]:
        _require(t.data.ndim == first.data.ndim, "concat",
                 f"rank mismatch: {first.dims} vs {t.dims}")
        for ax in range(first.data.ndim):
            if ax != axis:
                _require(t.shape[ax] == first.shape[ax], "concat",
                         f"non-concat dims differ on axis {ax}: {first.dims} vs {t.dims}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g: np.ndarray) -> None:
        index: list = [slice(None)] * g.ndim
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index[axis] = slice(start, stop)
                t.grad += g[tuple(index)]

    return _op(out, tuple(tensors), vjp)


def _same_dims(op: str, a: Tensor, b: Tensor) -> None:
    _require(a.shape == b.shape, op, f"dims differ: {a.dims} vs {b.dims}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dims("add", a, b)
    out = a.data + b.data

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _op(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dims("sub", a, b)
    out = a.data - b.data

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad -= g

    return _op(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dims("mul", a, b)
    out = a.data * b.data

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * b.data
        if b.requires_grad:
            b.grad += g * a.data

    return _op(out, (a, b), vjp)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * factor

    return _op(out, (x,), vjp)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g

    return _op(out, (x,), vjp)


def tmean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean())

    def vjp(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g / x.size

    return _op(out, (x,), vjp)


# ---------------------------------------------------------------------------
# loss primitives (fused for numeric stability at large logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax of an (N, K) array; rows sum to 1 within 1e-12."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_labels(targets, count: int, num_classes: int, op: str) -> np.ndarray:
    t = np.asarray(targets)
    if not np.issubdtype(t.dtype, np.integer):
        raise ValidationError(f"{op}: targets must be integer class indices")
    if t.shape != (count,):
        raise ShapeError(f"{op}: targets dims {list(t.shape)} vs batch {count}")
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        raise ValidationError(
            f"{op}: label out of range [0, {num_classes}): found {int(t.min())}..{int(t.max())}")
    return t.astype(np.int64)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of logits (N, K) against integer class indices."""
    _require(logits.data.ndim == 2, "softmax_cross_entropy",
             f"logits must be 2-d, got dims {logits.dims}")
    n, k = logits.shape
    labels = _as_labels(targets, n, k, "softmax_cross_entropy")
    d = logits.data
    m = d.max(axis=1, keepdims=True)
    z = d - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    per_sample = lse - d[np.arange(n), labels]
    out = np.asarray(per_sample.mean())
    check_finite(out, "softmax_cross_entropy output")

    def vjp(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            logits.grad += (g / n) * p

    return _op(out, (logits,), vjp)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of logits against {0, 1} targets."""
    t = np.asarray(targets)
    if t.shape != logits.shape:
        raise ShapeError(
            f"bce_with_logits: targets dims {list(t.shape)} vs logits {logits.dims}")
    if t.size and not np.all((t == 0) | (t == 1)):
        raise ValidationError("bce_with_logits: targets must be 0 or 1")
    y = t.astype(logits.data.dtype)
    d = logits.data
    per = np.maximum(d, 0) - d * y + np.log1p(np.exp(-np.abs(d)))
    out = np.asarray(per.mean())
    check_finite(out, "bce_with_logits output")

    def vjp(g: np.ndarray) -> None:
        if logits.requires_grad:
            logits.grad += (g / d.size) * (_sigmoid(d) - y)

    return _op(out, (logits,), vjp)


# Dispatch tables for the generic entry points; parameterized ops take their
# extra arguments as keywords.
PRIMITIVES = {
    "matmul": matmul,
    "conv2d": conv2d,
    "upsample2x_nearest": upsample2x_nearest,
    "add_bias": add_bias,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "reshape": reshape,
    "mean_pool2d": mean_pool2d,
    "concat": concat,
}

LOSS_PRIMITIVES = {
    "softmax_cross_entropy": softmax_cross_entropy,
    "bce_with_logits": bce_with_logits,
}


def forward_primitive(op: str, *inputs, **params) -> Tensor:
    if op not in PRIMITIVES:
        raise ValidationError(f"unknown primitive '{op}'")
    return PRIMITIVES[op](*inputs, **params)


def loss_primitive(kind: str, logits: Tensor, targets) -> Tensor:
    if kind not in LOSS_PRIMITIVES:
        raise ValidationError(f"unknown loss primitive '{kind}'")
    return LOSS_PRIMITIVES[kind](logits, targets)
