"""Minimal reverse-mode automatic differentiation over numpy arrays.

Ops accept either plain ndarrays or Nodes. With no Node among the
inputs they degrade to straight numpy, so the same model code serves
both inference (cheap) and training (taped). Gradients accumulate in
the dtype of the forward values; cast parameters to float64 before
building the graph when higher precision is needed (finite-difference
checks do exactly that).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


class Node:
    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype


def val(x):
    return x.value if isinstance(x, Node) else np.asarray(x)


def _is_node(*xs):
    return any(isinstance(x, Node) for x in xs)


def _accum(node, g):
    if node.grad is None:
        node.grad = g.astype(node.value.dtype, copy=True) if g.dtype != node.value.dtype else g.copy()
    else:
        node.grad += g


def backward(root: Node, seed=None):
    """Accumulate gradients of `root` into every reachable Node's .grad."""
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Node) and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed)
    for node in reversed(topo):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in node.vjp(node.grad):
            if isinstance(parent, Node):
                _accum(parent, g)


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    av, bv = val(a), val(b)
    out = av + bv
    if not _is_node(a, b):
        return out
    return Node(out, (a, b), lambda g: [(a, _unbroadcast(g, av.shape)), (b, _unbroadcast(g, bv.shape))])


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv
    if not _is_node(a, b):
        return out
    return Node(out, (a, b), lambda g: [(a, _unbroadcast(g * bv, av.shape)),
                                        (b, _unbroadcast(g * av, bv.shape))])


def scale(a, s: float):
    av = val(a)
    out = av * s
    if not _is_node(a):
        return out
    return Node(out, (a,), lambda g: [(a, g * s)])


def matmul(a, b):
    av, bv = val(a), val(b)
    out = av @ bv
    if not _is_node(a, b):
        return out

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.outer(g, bv).reshape(av.shape)
        gb = np.swapaxes(av, -1, -2) @ g if av.ndim > 1 else np.outer(av, g)
        return [(a, _unbroadcast(ga, av.shape)), (b, _unbroadcast(gb, bv.shape))]

    return Node(out, (a, b), vjp)


def gelu(a):
    av = val(a)
    out = T.gelu(av)
    if not _is_node(a):
        return out
    return Node(out, (a,), lambda g: [(a, g * T.gelu_grad(av))])


def layer_norm(a, gamma, beta, eps: float = 1e-6):
    av, gv, bv = val(a), val(gamma), val(beta)
    mu = av.mean(axis=-1, keepdims=True)
    xc = av - mu
    var = np.square(xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv
    if not _is_node(a, gamma, beta):
        return out

    def vjp(g):
        d = av.shape[-1]
        gg = g * gv
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(av.ndim - 1))
        return [(a, gx.astype(av.dtype)),
                (gamma, (g * xhat).sum(axis=red)),
                (beta, g.sum(axis=red))]

    return Node(out, (a, gamma, beta), vjp)


def softmax(a, axis: int = -1):
    av = val(a)
    out = T.softmax(av, axis=axis)
    if not _is_node(a):
        return out

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [(a, out * (g - dot))]

    return Node(out, (a,), vjp)


def log_softmax(a, axis: int = -1):
    av = val(a)
    z = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    if not _is_node(a):
        return out
    sm = np.exp(out)

    def vjp(g):
        return [(a, g - sm * g.sum(axis=axis, keepdims=True))]

    return Node(out, (a,), vjp)


def reshape(a, shape):
    av = val(a)
    out = av.reshape(shape)
    if not _is_node(a):
        return out
    return Node(out, (a,), lambda g: [(a, g.reshape(av.shape))])


def transpose(a, axes):
    av = val(a)
    out = av.transpose(axes)
    if not _is_node(a):
        return out
    inv = np.argsort(axes)
    return Node(out, (a,), lambda g: [(a, g.transpose(inv))])


def concat(parts, axis: int = 0):
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not _is_node(*parts):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slc = [slice(None)] * g.ndim
        grads = []
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            slc[axis] = slice(start, stop)
            grads.append((p, g[tuple(slc)]))
        return grads

    return Node(out, tuple(parts), vjp)


def getitem(a, key):
    """Basic (slice/int) indexing with gradient scatter."""
    av = val(a)
    out = av[key]
    if not _is_node(a):
        return out

    def vjp(g):
        ga = np.zeros_like(av)
        ga[key] = g
        return [(a, ga)]

    return Node(out, (a,), vjp)


def take_rows(a, idx):
    """Select rows of a 2-D array by (possibly repeating) integer index."""
    av = val(a)
    idx = np.asarray(idx)
    out = av[idx]
    if not _is_node(a):
        return out

    def vjp(g):
        ga = np.zeros_like(av)
        np.add.at(ga, idx, g)
        return [(a, ga)]

    return Node(out, (a,), vjp)


def scatter_rows(rows, idx, n_rows: int):
    """Inverse of take_rows for disjoint indices: result[idx] = rows, zeros elsewhere."""
    rv = val(rows)
    idx = np.asarray(idx)
    out = np.zeros((n_rows,) + rv.shape[1:], dtype=rv.dtype)
    out[idx] = rv
    if not _is_node(rows):
        return out
    return Node(out, (rows,), lambda g: [(rows, g[idx])])


def take_cols(a, idx):
    """Select columns of a 2-D array by unique integer index."""
    av = val(a)
    idx = np.asarray(idx)
    out = av[:, idx]
    if not _is_node(a):
        return out

    def vjp(g):
        ga = np.zeros_like(av)
        ga[:, idx] = g
        return [(a, ga)]

    return Node(out, (a,), vjp)


def take_elems(a, idx):
    """Select elements of a 1-D array by unique integer index."""
    av = val(a)
    idx = np.asarray(idx)
    out = av[idx]
    if not _is_node(a):
        return out

    def vjp(g):
        ga = np.zeros_like(av)
        ga[idx] = g
        return [(a, ga)]

    return Node(out, (a,), vjp)


def tile_rows(a, n: int):
    """Broadcast a (1, ..., d) parameter to n leading rows."""
    av = val(a)
    out = np.broadcast_to(av, (n,) + av.shape[1:]).copy()
    if not _is_node(a):
        return out
    return Node(out, (a,), lambda g: [(a, g.sum(axis=0, keepdims=True))])


def mean(a, axis=None):
    av = val(a)
    out = av.mean(axis=axis)
    if not _is_node(a):
        return out
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is None:
            return [(a, np.full_like(av, g / n))]
        ge = np.expand_dims(g, axis) / n
        return [(a, np.broadcast_to(ge, av.shape).astype(av.dtype))]

    return Node(out, (a,), vjp)


def sum_(a, axis=None):
    av = val(a)
    out = av.sum(axis=axis)
    if not _is_node(a):
        return out

    def vjp(g):
        if axis is None:
            return [(a, np.full_like(av, g))]
        ge = np.expand_dims(g, axis)
        return [(a, np.broadcast_to(ge, av.shape).astype(av.dtype))]

    return Node(out, (a,), vjp)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels."""
    labels = np.asarray(labels)
    lp = log_softmax(logits, axis=-1)
    lpv = val(lp)
    n = lpv.shape[0]
    picked = lpv[np.arange(n), labels]
    out = -picked.mean()
    if not _is_node(lp):
        return out

    def vjp(g):
        glp = np.zeros_like(lpv)
        glp[np.arange(n), labels] = -g / n
        return [(lp, glp)]

    return Node(out, (lp,), vjp)


def kl_to_teacher(student_logits, teacher_logits, temperature: float):
    """Temperature-scaled KL(teacher || student), mean over batch, times T^2."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    pt = T.softmax(t / temperature, axis=-1)
    log_pt = np.log(np.clip(pt, 1e-30, None))
    ls = log_softmax(scale(student_logits, 1.0 / temperature), axis=-1)
    lsv = val(ls)
    n = lsv.shape[0]
    out = float((pt * (log_pt - lsv)).sum() / n * temperature**2)
    if not _is_node(ls):
        return out

    def vjp(g):
        return [(ls, (-g * temperature**2 / n) * pt.astype(lsv.dtype))]

    return Node(np.asarray(out), (ls,), vjp)
