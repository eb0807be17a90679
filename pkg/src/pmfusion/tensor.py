"""Minimal dense float64 tensors with reverse-mode differentiation.

Every differentiable op records a :class:`Node` on its output when any input
requires a gradient. :func:`backward` collects the nodes reachable from a
scalar loss into a :class:`Tape` (topologically ordered), replays it in
reverse once and then consumes it.

Only the ops the fusion network and its losses need are provided. Binary ops
require identical shapes; there is no broadcasting.
"""
from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


class Node:
    __slots__ = ("name", "parents", "backward_fn", "out")

    def __init__(self, name, parents, backward_fn, out):
        self.name = name
        self.parents = parents
        self.backward_fn = backward_fn
        self.out = out


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape):
    return Tensor(np.zeros(shape))


def ones(shape):
    return Tensor(np.ones(shape))


def _result(name, data, parents, backward_fn):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._node = Node(name, parents, backward_fn, out)
    return out


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise(op, a, b):
    """Dispatch ``op`` in {"add", "mul"}."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def affine(x, scale, shift=0.0):
    """``scale * x + shift`` for python scalars ``scale`` and ``shift``."""
    scale = float(scale)
    return _result("affine", x.data * scale + float(shift), (x,), lambda g: (g * scale,))


def sigmoid(x):
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x):
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def log_clamped(x, eps):
    """``log(clip(x, eps, 1))``; zero gradient where the clamp is active."""
    d = x.data
    inside = (d >= eps) & (d <= 1.0)
    c = np.clip(d, eps, 1.0)
    return _result("log_clamped", np.log(c), (x,), lambda g: (np.where(inside, g / c, 0.0),))


def clamp(x, lo, hi):
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _result("clamp", np.clip(d, lo, hi), (x,), lambda g: (g * inside,))


def pow_const(x, p):
    """``x ** p`` for a constant exponent ``p >= 0`` and ``x >= 0``."""
    d = x.data
    p = float(p)
    if np.any(d < 0):
        raise ValueError("pow_const expects non-negative base")
    y = d ** p
    if p == 0.0:
        return _result("pow_const", y, (x,), lambda g: (np.zeros_like(g),))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            dy = p * np.where(d > 0, d ** (p - 1.0), 0.0 if p > 1.0 else np.inf)
        return (g * dy,)

    return _result("pow_const", y, (x,), bw)


# --------------------------------------------------------------------------
# reductions / indexing


def sum_all(x):
    shape = x.shape
    return _result("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x):
    n = x.size
    shape = x.shape
    return _result("mean", np.array(x.data.sum() / n), (x,),
                   lambda g: (np.full(shape, float(g) / n),))


def sum_channel(x):
    """Sum ``[B,S,H,W]`` over the channel axis to ``[B,H,W]``."""
    if x.data.ndim != 4:
        raise ShapeError("sum_channel expects a 4-D tensor")
    S = x.shape[1]
    return _result("sum_channel", x.data.sum(axis=1), (x,),
                   lambda g: (np.repeat(g[:, None], S, axis=1),))


def take(x, flat_index):
    """Gather ``x.ravel()[flat_index]`` into a 1-D tensor."""
    idx = np.asarray(flat_index, dtype=np.int64)
    shape = x.shape
    n = x.size

    def bw(g):
        gx = np.bincount(idx, weights=g, minlength=n)
        return (gx.reshape(shape),)

    return _result("take", x.data.reshape(-1)[idx], (x,), bw)


def reshape(x, shape):
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def dot(a, b):
    """Inner product of two equally shaped tensors."""
    return sum_all(mul(a, b))


# --------------------------------------------------------------------------
# channel ops


def concat_channel(a, b):
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channel expects 4-D tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channel: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result("concat_channel", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channel(x, start, stop):
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return _result("slice_channel", x.data[:, start:stop].copy(), (x,), bw)


def softmax_channel(logits):
    d = logits.data
    if d.ndim != 4:
        raise ShapeError("softmax_channel expects [B,S,H,W]")
    if d.shape[1] < 2:
        raise ShapeError("softmax_channel needs at least two classes")
    if not np.all(np.isfinite(d)):
        raise NonFiniteError("softmax_channel received non-finite logits")
    e = np.exp(d - d.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result("softmax_channel", y, (logits,), bw)


# --------------------------------------------------------------------------
# convolution and resampling


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """2-D cross-correlation of ``x[B,Cin,H,W]`` with ``weight[Cout,Cin,kH,kW]``."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Ci}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({Co},)")
    Ho = kernels.out_size(H, kh, stride, padding, dilation)
    Wo = kernels.out_size(W, kw, stride, padding, dilation)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {Ho}x{Wo}")

    cols = kernels.im2col(x.data, kh, kw, stride, padding, dilation)
    wmat = weight.data.reshape(Co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = (g2.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(g2 @ wmat, (B, C, H, W), kh, kw, stride, padding, dilation)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, parents, bw)


def maxpool2(x):
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    out, idx = kernels.maxpool2(x.data)
    n = x.size

    def bw(g):
        gx = np.bincount(idx.reshape(-1), weights=g.reshape(-1), minlength=n)
        return (gx.reshape(B, C, H, W),)

    return _result("maxpool2", out, (x,), bw)


def upsample2(x):
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _result("upsample_nearest2", out, (x,), bw)


def pool_resize(x, mode):
    if mode == "maxpool2":
        return maxpool2(x)
    if mode == "upsample_nearest2":
        return upsample2(x)
    raise ValueError(f"unknown resize mode {mode!r}")


def detach(x):
    """Same values, cut from the graph."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.grad = None
    out._node = None
    return out


# --------------------------------------------------------------------------
# tape


class Tape:
    """Nodes reachable from a loss, producers before consumers."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss):
        order = []
        seen = set()
        stack = [(loss._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node.parents):
                if p._node is not None and id(p._node) not in seen:
                    stack.append((p._node, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def replay(self, seed_grad):
        grads = {id(self.nodes[-1].out): seed_grad}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for p, gp in zip(node.parents, node.backward_fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
                if p._node is None:
                    leaves[key] = p
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    def consume(self):
        for node in self.nodes:
            node.out._node = None
        self.nodes = []


def backward(loss):
    """Populate ``.grad`` on every leaf tensor that requires a gradient.

    Gradients accumulate into existing ``.grad`` buffers. The recorded graph is
    released afterwards; a second call on the same loss raises
    :class:`GraphError`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._node is None:
        raise GraphError("loss is not attached to a recorded graph")
    tape = Tape.from_loss(loss)
    tape.replay(np.ones(loss.shape))
    tape.consume()
    return tape
