"""Tape-based reverse-mode differentiation over numpy arrays.

Operators accept plain arrays or :class:`Node` objects. When no input is a
node the operator just computes its value and returns an array, so the same
model code runs untraced for inference and traced for gradients.

A :class:`Graph` owns its nodes in creation order, which is a topological
order: a node can only consume nodes that already exist.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("graph", "index", "kind", "value", "inputs", "vjp", "name")

    def __init__(self, graph, kind, value, inputs=(), vjp=None, name=None):
        self.graph = graph
        self.index = len(graph.nodes)
        self.kind = kind
        self.value = value
        self.inputs = tuple(inputs)
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node(#{self.index} {self.kind}{label} shape={self.value.shape})"


class Graph:
    """Expression graph confined to one thread from first leaf to backward."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Node] = []

    def leaf(self, value, name=None) -> Node:
        arr = np.array(value, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"leaf {name!r} has non-finite values")
        node = Node(self, "leaf", arr, name=name)
        self.nodes.append(node)
        self.leaves.append(node)
        return node

    def backward(self, root) -> dict[Node, np.ndarray]:
        """Gradients of a scalar ``root`` for every leaf of this graph."""
        grads = {leaf: np.zeros_like(leaf.value) for leaf in self.leaves}
        if not isinstance(root, Node):
            # root never touched a leaf: it is constant
            if np.asarray(root).size != 1:
                raise ShapeError(f"backward: root must be scalar, got shape {np.shape(root)}")
            return grads
        if root.graph is not self:
            raise ValueError("backward: root belongs to another graph")
        if root.value.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")

        pending: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.index + 1]):
            g = pending.pop(node.index, None)
            if g is None:
                continue
            if node.vjp is None:
                grads[node] = grads[node] + g
                continue
            needs = [isinstance(x, Node) for x in node.inputs]
            for x, gx in zip(node.inputs, node.vjp(g, needs)):
                if gx is None or not isinstance(x, Node):
                    continue
                prev = pending.get(x.index)
                pending[x.index] = gx if prev is None else prev + gx
        return grads


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _trace(kind: str, inputs: Sequence, out: np.ndarray, vjp: Callable):
    graph = None
    for x in inputs:
        if isinstance(x, Node):
            if graph is None:
                graph = x.graph
            elif x.graph is not graph:
                raise ValueError(f"{kind}: inputs come from different graphs")
    if graph is None:
        return out
    node = Node(graph, kind, out, inputs, vjp)
    graph.nodes.append(node)
    return node


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    av, bv = value(a), value(b)
    _same_shape("add", av, bv)
    return _trace("add", (a, b), av + bv, lambda g, needs: (g, g))


def scale(a, c: float):
    av = value(a)
    c = float(c)
    return _trace("scale", (a,), av * c, lambda g, needs: (g * c,))


def relu(a):
    av = value(a)
    mask = av > 0
    return _trace("relu", (a,), np.where(mask, av, 0.0), lambda g, needs: (g * mask,))


def sigmoid(a):
    av = value(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _trace("sigmoid", (a,), out, lambda g, needs: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {av.shape} vs {bv.shape}")

    def vjp(g, needs):
        return (g @ bv.T if needs[0] else None, av.T @ g if needs[1] else None)

    return _trace("matmul", (a, b), av @ bv, vjp)


def scale_columns(m, p):
    """``m @ diag(p)`` for a matrix ``m`` and vector ``p``."""
    mv, pv = value(m), value(p)
    if mv.ndim != 2 or pv.shape != (mv.shape[1],):
        raise ShapeError(f"scale_columns: shape mismatch {mv.shape} vs {pv.shape}")

    def vjp(g, needs):
        return (g * pv if needs[0] else None, (g * mv).sum(axis=0) if needs[1] else None)

    return _trace("scale_columns", (m, p), mv * pv, vjp)


def reshape(a, shape):
    av = value(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != av.size:
        raise ShapeError(f"reshape: cannot view {av.shape} as {shape}")
    return _trace("reshape", (a,), av.reshape(shape), lambda g, needs: (g.reshape(av.shape),))


# ---------------------------------------------------------------- convolution

def conv2d(x, w, b=None, stride: int = 1, pad: int = 0):
    """Cross-correlation of ``x`` (B, C, H, W) with ``w`` (O, C, kh, kw), zero padding.

    Both passes loop over kernel taps; each tap is one channel contraction.
    """
    xv, wv = value(x), value(w)
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {xv.shape} vs {wv.shape}")
    bv = None if b is None else value(b)
    if bv is not None and bv.shape != (wv.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bv.shape} vs kernel {wv.shape}")
    n, c, h, wd = xv.shape
    o, _, kh, kw = wv.shape
    s, p = int(stride), int(pad)
    ho, wo = (h + 2 * p - kh) // s + 1, (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {wv.shape} larger than padded input {xv.shape}")

    xc = np.ascontiguousarray(xv.transpose(1, 0, 2, 3))
    if p:
        xc = np.pad(xc, ((0, 0), (0, 0), (p, p), (p, p)))

    def window(ky, kx):
        return (slice(None), slice(None),
                slice(ky, ky + s * (ho - 1) + 1, s), slice(kx, kx + s * (wo - 1) + 1, s))

    out = np.zeros((o, n, ho, wo))
    for ky in range(kh):
        for kx in range(kw):
            out += np.tensordot(wv[:, :, ky, kx], xc[window(ky, kx)], axes=1)
    out = out.transpose(1, 0, 2, 3)
    if bv is not None:
        out = out + bv[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g, needs):
        go = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gx = gw = gb = None
        if needs[0]:
            gxc = np.zeros_like(xc)
            for ky in range(kh):
                for kx in range(kw):
                    gxc[window(ky, kx)] += np.tensordot(wv[:, :, ky, kx].T, go, axes=1)
            if p:
                gxc = gxc[:, :, p:-p, p:-p]
            gx = np.ascontiguousarray(gxc.transpose(1, 0, 2, 3))
        if needs[1]:
            gw = np.empty_like(wv)
            for ky in range(kh):
                for kx in range(kw):
                    gw[:, :, ky, kx] = np.tensordot(go, xc[window(ky, kx)], axes=([1, 2, 3], [1, 2, 3]))
        if b is not None and needs[2]:
            gb = go.sum(axis=(1, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _trace("conv2d", inputs, out, vjp)


# ---------------------------------------------------------------- resampling

def upsample2(a):
    av = value(a)
    if av.ndim < 2:
        raise ShapeError(f"upsample2: need spatial dims, got {av.shape}")
    out = np.repeat(np.repeat(av, 2, axis=-2), 2, axis=-1)

    def vjp(g, needs):
        lead, (h, w) = av.shape[:-2], av.shape[-2:]
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return _trace("upsample2", (a,), out, vjp)


def avgpool2(a):
    av = value(a)
    if av.ndim < 2 or av.shape[-1] % 2 or av.shape[-2] % 2:
        raise ShapeError(f"avgpool2: need even spatial dims, got {av.shape}")
    lead, (h, w) = av.shape[:-2], av.shape[-2:]
    out = av.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def vjp(g, needs):
        return (0.25 * np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1),)

    return _trace("avgpool2", (a,), out, vjp)


def depth_to_space(a, r: int):
    """(B, C*r*r, H, W) -> (B, C, H*r, W*r); channel ``c*r*r + i*r + j`` fills offset (i, j)."""
    av = value(a)
    if av.ndim != 4 or av.shape[1] % (r * r):
        raise ShapeError(f"depth_to_space: {av.shape} channels not divisible by {r * r}")
    n, cr, h, w = av.shape
    c = cr // (r * r)
    out = av.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def vjp(g, needs):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(av.shape),)

    return _trace("depth_to_space", (a,), np.ascontiguousarray(out), vjp)


# ---------------------------------------------------------------- channels (axis -3)

def concat_channels(parts):
    vals = [value(x) for x in parts]
    ref = vals[0]
    for v in vals[1:]:
        if v.ndim != ref.ndim or v.shape[:-3] != ref.shape[:-3] or v.shape[-2:] != ref.shape[-2:]:
            raise ShapeError(f"concat_channels: shape mismatch {ref.shape} vs {v.shape}")
    sizes = np.cumsum([v.shape[-3] for v in vals])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, sizes, axis=-3))

    return _trace("concat_channels", tuple(parts), np.concatenate(vals, axis=-3), vjp)


def channel_zero(a, i: int):
    av = value(a)
    if av.ndim < 3 or not 0 <= i < av.shape[-3]:
        raise ShapeError(f"channel_zero: channel {i} out of range for {av.shape}")
    out = av.copy()
    out[..., i, :, :] = 0.0

    def vjp(g, needs):
        gx = g.copy()
        gx[..., i, :, :] = 0.0
        return (gx,)

    return _trace("channel_zero", (a,), out, vjp)


def channel_gather(a, channels):
    av = value(a)
    idx = np.asarray(list(channels), dtype=np.int64)
    if av.ndim < 3 or idx.size == 0 or idx.min() < 0 or idx.max() >= av.shape[-3]:
        raise ShapeError(f"channel_gather: channels {idx.tolist()} invalid for {av.shape}")

    def vjp(g, needs):
        gx = np.zeros_like(av)
        np.add.at(gx, (Ellipsis, idx, slice(None), slice(None)), g)
        return (gx,)

    return _trace("channel_gather", (a,), av[..., idx, :, :], vjp)


# ---------------------------------------------------------------- losses (scalar)

def mse(a, b):
    av, bv = value(a), value(b)
    _same_shape("mse", av, bv)
    diff = av - bv
    n = diff.size

    def vjp(g, needs):
        ga = (2.0 / n) * diff * g
        return (ga if needs[0] else None, -ga if needs[1] else None)

    return _trace("mse", (a, b), np.asarray(np.mean(diff * diff)), vjp)


def wsse(a, b, weights):
    """``sum(weights * (a - b)**2)`` with constant ``weights`` broadcastable to ``a``."""
    av, bv = value(a), value(b)
    _same_shape("wsse", av, bv)
    wv = np.broadcast_to(np.asarray(weights, dtype=np.float64), av.shape)
    diff = av - bv

    def vjp(g, needs):
        ga = 2.0 * wv * diff * g
        return (ga if needs[0] else None, -ga if needs[1] else None)

    return _trace("wsse", (a, b), np.asarray(np.sum(wv * diff * diff)), vjp)


def bce_logits(z, target):
    """Mean binary cross-entropy of logits ``z`` against constant 0/1 ``target``."""
    zv, tv = value(z), value(target)
    _same_shape("bce_logits", zv, tv)
    loss = np.maximum(zv, 0.0) - zv * tv + np.log1p(np.exp(-np.abs(zv)))
    n = zv.size

    def vjp(g, needs):
        prob = 0.5 * (1.0 + np.tanh(0.5 * zv))
        return ((prob - tv) * (g / n), None)

    return _trace("bce_logits", (z, target), np.asarray(np.mean(loss)), vjp)


OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "add": add,
    "scale": scale,
    "concat_channels": concat_channels,
    "upsample2": upsample2,
    "avgpool2": avgpool2,
    "mse": mse,
    "channel_zero": channel_zero,
    "channel_gather": channel_gather,
    "scale_columns": scale_columns,
    "reshape": reshape,
    "depth_to_space": depth_to_space,
    "wsse": wsse,
    "bce_logits": bce_logits,
}


def apply_op(kind: str, *inputs, **attrs):
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operator kind {kind!r}") from None
    if kind == "concat_channels":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
