"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations needed by the VQ autoencoder are provided: valid
convolutions and their transposes, max-pooling with argmax, fixed-position
unpooling, dense layers, ReLU and the losses. There is no general
broadcasting; elementwise ops require equal shapes (or a Python scalar).

Values are float32 unless :func:`precision` switches the default dtype to
float64 (used by the gradient-check tests).
"""

from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ConfigurationError(ValueError):
    """Incompatible shapes or layer geometry."""


class InputError(ValueError):
    """Bad data handed to an otherwise valid operation."""


class UsageError(RuntimeError):
    """API misuse, e.g. calling backward on a non-scalar."""


_DTYPE = np.float32
DEBUG = os.environ.get("EFI_DEBUG", "") not in ("", "0")


def default_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype: str | type) -> Iterator[None]:
    """Temporarily change the dtype new nodes are created with."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


class Node:
    """A value in the differentiation graph.

    ``grad`` is materialized lazily by :func:`backward` and accumulates
    across calls until :func:`zero_grad` clears it.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "_backward", "op")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: tuple["Node", ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(value)
        if not parents:
            arr = arr.astype(_DTYPE, copy=True)
        if DEBUG and not np.all(np.isfinite(arr)):
            raise InputError(f"non-finite value produced by {op}")
        self.value: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_node(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def parameter(value) -> Node:
    return Node(value, requires_grad=True, op="param")


def _make(value, parents, backward_fn, op) -> Node:
    requires = any(p.requires_grad for p in parents)
    return Node(
        value,
        requires_grad=requires,
        parents=tuple(parents) if requires else (),
        backward_fn=backward_fn if requires else None,
        op=op,
    )


# ---------------------------------------------------------------------------
# graph traversal


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node needing it."""
    if loss.value.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise


def _check_same(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise InputError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same(a, b, "add")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Node:
    a = as_node(a)
    if not isinstance(b, Node):
        s = a.value.dtype.type(b)
        return _make(a.value * s, (a,), lambda g: (g * s,), "scale")
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def relu(x: Node) -> Node:
    mask = x.value > 0
    # np.maximum keeps NaN visible so divergence is caught downstream
    return _make(np.maximum(x.value, 0).astype(x.value.dtype, copy=False), (x,),
                 lambda g: (g * mask,), "relu")


def affine(x: Node, scale, shift) -> Node:
    """x * scale + shift with constant arrays broadcast against x."""
    scale = np.asarray(scale, dtype=x.value.dtype)
    shift = np.asarray(shift, dtype=x.value.dtype)
    out = x.value * scale + shift
    if out.shape != x.shape:
        raise ConfigurationError(f"affine constants broadcast {x.shape} to {out.shape}")
    return _make(out, (x,), lambda g: (g * scale,), "affine")


def stop_gradient(x: Node) -> Node:
    """Identity forward, zero derivative backward."""
    return Node(x.value, requires_grad=False, parents=(x,), op="stop_gradient")


def straight_through(x: Node, target) -> Node:
    """Forward ``target`` exactly; pass the incoming gradient to ``x`` unchanged.

    Equivalent to ``x + stop_gradient(target - x)`` without the float
    round-off of the add/sub pair.
    """
    t = np.asarray(target.value if isinstance(target, Node) else target, dtype=x.value.dtype)
    if t.shape != x.shape:
        raise InputError(f"straight_through: shape mismatch {x.shape} vs {t.shape}")
    return _make(t, (x,), lambda g: (g,), "straight_through")


def total(x: Node) -> Node:
    shape = x.shape
    return _make(np.asarray(x.value.sum(), dtype=x.value.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(g.dtype),), "sum")


def reshape(x: Node, shape: Sequence[int]) -> Node:
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Node, axes: Sequence[int]) -> Node:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.value.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def gather_rows(table: Node, indices) -> Node:
    """``table.value[indices]``; gradient scatters back onto the selected rows."""
    idx = np.asarray(indices, dtype=np.int64)
    rows = table.shape[0]

    def back(g):
        out = np.zeros_like(table.value)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise InputError("gather_rows: index out of range")
    return _make(table.value[idx], (table,), back, "gather_rows")


# ---------------------------------------------------------------------------
# dense / conv


def dense(x: Node, weight: Node, bias: Node) -> Node:
    """``weight @ x + bias`` for x of shape (N,) or (B, N)."""
    if weight.value.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ConfigurationError(
            f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xv, wv = x.value, weight.value
    single = xv.ndim == 1

    def back(g):
        g2 = g[None] if single else g
        x2 = xv[None] if single else xv
        gx = g2 @ wv
        return (gx[0] if single else gx, g2.T @ x2, g2.sum(axis=0))

    return _make(xv @ wv.T + bias.value, (x, weight, bias), back, "dense")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def conv_output_size(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


def _windows(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """(B,C,H,W) -> strided view (B,C,Ho,Wo,kh,kw)."""
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def _col2im(cols: np.ndarray, out_hw: tuple[int, int], sh: int, sw: int) -> np.ndarray:
    """Scatter-add (B,Ho,Wo,C,kh,kw) patches into a (B,C,H,W) canvas."""
    b, ho, wo, c, kh, kw = cols.shape
    out = np.zeros((b, c) + out_hw, dtype=cols.dtype)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # B,C,kh,kw,Ho,Wo
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += cols[:, :, i, j]
    return out


def _batched(x: Node) -> tuple[Node, bool]:
    if x.value.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.value.ndim != 4:
        raise InputError(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")
    return x, False


def conv2d(x: Node, kernel: Node, stride=1) -> Node:
    """Valid cross-correlation. kernel: (C_out, C_in, kH, kW)."""
    x, single = _batched(x)
    sh, sw = _pair(stride)
    co, ci, kh, kw = kernel.shape
    b, c, h, w = x.shape
    if c != ci:
        raise ConfigurationError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if h < kh or w < kw:
        raise ConfigurationError(f"conv2d: kernel {(kh, kw)} larger than input {(h, w)}")
    xv, kv = x.value, kernel.value
    win = _windows(xv, kh, kw, sh, sw)
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, kv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def back(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, kv, axes=([1], [0]))  # B,Ho,Wo,C,kh,kw
        gx = np.zeros_like(xv)
        gx[:, :, : sh * (ho - 1) + kh, : sw * (wo - 1) + kw] = _col2im(
            cols, (sh * (ho - 1) + kh, sw * (wo - 1) + kw), sh, sw)
        return gx, gk

    y = _make(np.ascontiguousarray(out), (x, kernel), back, "conv2d")
    return reshape(y, y.shape[1:]) if single else y


def conv_transpose2d(x: Node, kernel: Node, stride=1) -> Node:
    """Adjoint of :func:`conv2d`. kernel: (C_in, C_out, kH, kW)."""
    x, single = _batched(x)
    sh, sw = _pair(stride)
    ci, co, kh, kw = kernel.shape
    b, c, h, w = x.shape
    if c != ci:
        raise ConfigurationError(f"conv_transpose2d: input has {c} channels, kernel expects {ci}")
    xv, kv = x.value, kernel.value
    out_hw = ((h - 1) * sh + kh, (w - 1) * sw + kw)
    cols = np.tensordot(xv.transpose(0, 2, 3, 1), kv, axes=([3], [0]))  # B,H,W,Co,kh,kw
    out = _col2im(cols, out_hw, sh, sw)

    def back(g):
        win = _windows(g, kh, kw, sh, sw)  # B,Co,H,W,kh,kw
        gx = np.tensordot(win, kv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gk = np.tensordot(xv, win, axes=([0, 2, 3], [0, 2, 3]))
        return np.ascontiguousarray(gx), gk

    y = _make(out, (x, kernel), back, "conv_transpose2d")
    return reshape(y, y.shape[1:]) if single else y


def add_channel_bias(x: Node, bias: Node) -> Node:
    """Add a per-channel bias to a (B,C,H,W) node."""
    if x.value.ndim != 4 or bias.shape != (x.shape[1],):
        raise ConfigurationError(f"bias {bias.shape} does not fit input {x.shape}")
    return _make(x.value + bias.value[None, :, None, None], (x, bias),
                 lambda g: (g, g.sum(axis=(0, 2, 3))), "channel_bias")


# ---------------------------------------------------------------------------
# pooling


@dataclass(frozen=True)
class ArgmaxMap:
    """Winning position of each pooling window, as flat indices into H*W."""

    indices: np.ndarray  # (B, C, Ho, Wo) int64
    input_hw: tuple[int, int] = field(default=(0, 0))


def maxpool2d_with_argmax(x: Node, window=(1, 2), stride=(1, 2)) -> tuple[Node, ArgmaxMap]:
    x, single = _batched(x)
    wh, ww = _pair(window)
    sh, sw = _pair(stride)
    b, c, h, w = x.shape
    if wh > h or ww > w:
        raise ConfigurationError(f"pool window {(wh, ww)} larger than input {(h, w)}")
    xv = x.value
    win = _windows(xv, wh, ww, sh, sw)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, ho, wo, wh * ww)
    local = flat.argmax(axis=-1)  # first max wins: lowest linear index
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * sh + local // ww
    cols = np.arange(wo)[None, :] * sw + local % ww
    lin = rows * w + cols

    def back(g):
        gx = np.zeros((b, c, h * w), dtype=g.dtype)
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (np.broadcast_to(bi, lin.shape), np.broadcast_to(ci, lin.shape), lin), g)
        return (gx.reshape(b, c, h, w),)

    y = _make(np.ascontiguousarray(out), (x,), back, "maxpool")
    amap = ArgmaxMap(lin[0] if single else lin, (h, w))
    return (reshape(y, y.shape[1:]) if single else y), amap


def max_unpool2d_fixed(x: Node, window=(1, 2), stride=(1, 2)) -> Node:
    """Place each value at the top-left cell of its window; zeros elsewhere."""
    x, single = _batched(x)
    wh, ww = _pair(window)
    sh, sw = _pair(stride)
    b, c, h, w = x.shape
    oh, ow = (h - 1) * sh + wh, (w - 1) * sw + ww
    out = np.zeros((b, c, oh, ow), dtype=x.value.dtype)
    out[:, :, : sh * (h - 1) + 1:sh, : sw * (w - 1) + 1:sw] = x.value
    y = _make(out, (x,), lambda g: (np.ascontiguousarray(g[:, :, : sh * (h - 1) + 1:sh, : sw * (w - 1) + 1:sw]),),
              "unpool")
    return reshape(y, y.shape[1:]) if single else y


# ---------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_crossentropy(logits: Node, labels) -> Node:
    """Mean of -log softmax(logits)[label] over the batch."""
    lv = logits.value
    single = lv.ndim == 1
    l2 = lv[None] if single else lv
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    t = l2.shape[1]
    if y.shape != (l2.shape[0],):
        raise InputError(f"expected {l2.shape[0]} labels, got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= t):
        raise InputError(f"label out of range for {t} classes")
    z = l2 - l2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(y))
    loss = (logsum - z[rows, y]).mean()
    n = len(y)

    def back(g):
        p = softmax(l2)
        p[rows, y] -= 1
        gl = (g * p / n).astype(lv.dtype)
        return (gl[0] if single else gl,)

    return _make(np.asarray(loss, dtype=lv.dtype), (logits,), back, "xent")


def mse_norm(x, x_hat, reduction: str = "sum") -> Node:
    """Squared L2 norm of the difference.

    ``reduction="sum"`` sums over elements and averages over the batch (a 1-D
    input is one sample, otherwise axis 0 is the batch axis).
    ``reduction="mean"`` averages over every element.
    ``reduction="vector"`` sums over the last axis and averages over the rest.
    """
    x, x_hat = as_node(x), as_node(x_hat)
    _check_same(x, x_hat, "mse_norm")
    if reduction == "sum":
        n = 1 if x.value.ndim <= 1 else x.shape[0]
    elif reduction == "mean":
        n = x.value.size
    elif reduction == "vector":
        n = x.value.size // x.shape[-1]
    else:
        raise UsageError(f"unknown reduction {reduction!r}")
    d = x_hat.value - x.value
    loss = np.asarray(np.sum(d * d) / n, dtype=d.dtype)
    scale = d.dtype.type(2.0 / n)
    return _make(loss, (x, x_hat), lambda g: (-g * scale * d, g * scale * d), "mse_norm")


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InputError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")


def sgd_momentum_step(params: Sequence[Node], grads: Sequence[np.ndarray | None],
                      state: OptimizerState) -> None:
    """v <- mu*v + g ; p <- p - lr*v. Parameters without a gradient are skipped."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise InputError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        v = state.velocity.get(i)
        v = g.astype(p.value.dtype) if v is None else state.momentum * v + g
        state.velocity[i] = v
        p.value = (p.value - p.value.dtype.type(state.learning_rate) * v).astype(p.value.dtype)


class SGD:
    """Momentum SGD over a fixed parameter list."""

    def __init__(self, params: Sequence[Node], lr: float = 0.01, momentum: float = 0.9,
                 clip_norm: float | None = None):
        if clip_norm is not None and clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")
        self.params = list(params)
        self.state = OptimizerState(lr, momentum)
        self.clip_norm = clip_norm

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.learning_rate = value

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                                 for g in grads if g is not None))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = [None if g is None else (g * scale).astype(g.dtype) for g in grads]
        sgd_momentum_step(self.params, grads, self.state)
