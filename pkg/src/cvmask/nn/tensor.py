"""Reverse-mode differentiation over numpy arrays.

Every differentiable operation is a function in this module that records its
parents and a closure computing parent gradients. Only the operations defined
here can appear in a graph, so anything else is detached by construction and
``grad`` refuses to differentiate with respect to values it cannot reach.
"""
from __future__ import annotations

import math

import numpy as np

DTYPE = np.float64


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, op="leaf", requires_grad=False, name=None):
        arr = np.asarray(data, dtype=DTYPE)
        # a sum is non-finite iff some entry is (or the sum overflows, also a failure)
        if not np.isfinite(arr.sum()):
            raise NonFiniteError(f"non-finite values produced by {op!r}" + (f" ({name})" if name else ""))
        self.data = arr
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def const(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _node(data, parents, backward_fn, op):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, parents, backward_fn, op)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    return _node(out, (a,), lambda g: (g * c,), "scale")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du
        return (g * d,)

    return _node(out, (x,), bw, "gelu")


# shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = x.data.transpose(axes)
    return _node(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def gather(table: Tensor, idx) -> Tensor:
    """Rows of ``table`` selected by integer array ``idx`` (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return _node(out, (table,), bw, "gather")


# reductions / products -----------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())
    return _node(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / n,)

    return _node(out, (x,), bw, "mean")


def matmul(a, b) -> Tensor:
    a, b = const(a), const(b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if a.data.ndim >= 2 and b.data.ndim == 2:
            # weight matrix shared across leading dims: reduce via one 2-D product
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _node(out, (a, b), bw, "matmul")


def softmax(x: Tensor, axis=-1, mask=None) -> Tensor:
    """Numerically stable softmax; entries where ``mask`` is False get exactly zero weight."""
    if mask is not None:
        z = np.where(mask, x.data, -np.inf)
    else:
        z = x.data.copy()
    m = np.max(z, axis=axis, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    z -= m
    out = np.exp(z, out=z)
    s = out.sum(axis=axis, keepdims=True)
    s[s == 0] = 1.0
    out /= s

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps=1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = 1.0 if gain is None else gain.data
    out = xhat * gd
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g * gd
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    parents = [x] + [p for p in (gain, bias) if p is not None]
    return _node(out, parents, bw, "layer_norm")


# losses --------------------------------------------------------------------

def mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=DTYPE).reshape(pred.shape)
    diff = pred.data - t
    n = diff.size
    out = np.asarray((diff**2).sum() / n)
    return _node(out, (pred,), lambda g: (g * 2.0 * diff / n,), "mse")


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean logistic loss."""
    y = np.asarray(labels, dtype=DTYPE).reshape(logits.shape)
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    ez = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return _node(np.asarray(loss.sum() / n), (logits,), lambda g: (g * (p - y) / n,), "bce")


# driver --------------------------------------------------------------------

def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, wrt, allow_unused=False) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Accumulation follows a fixed topological order, so results are
    bitwise reproducible. Raises GraphError for tensors outside the graph
    unless ``allow_unused`` (then their gradient is zero).
    """
    if loss.data.size != 1:
        raise GraphError("loss must be a scalar")
    order = _topo(loss) if loss.requires_grad else []
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = np.asarray(gp, dtype=DTYPE)
    out = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            if not allow_unused:
                raise GraphError(f"tensor {t.name or t.op!r} is not part of the recorded graph")
            g = np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {t.name or t.op!r}")
        out.append(g)
    return out


def backward(loss: Tensor, params: dict[str, Tensor], allow_unused=False) -> dict[str, np.ndarray]:
    names = list(params)
    gs = grad(loss, [params[n] for n in names], allow_unused=allow_unused)
    return dict(zip(names, gs))
