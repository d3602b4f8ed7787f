"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like constants), computes the
forward value with numpy and records an exact local gradient rule on the
owning graph.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .graph import NonFiniteError, ShapeError, Tensor, _graph_of, as_tensor


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    g = _graph_of(*inputs)
    if g is None:
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(op, None)
        return Tensor(out)
    return g.record(op, out, inputs, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log", None if a.graph is None else len(a.graph.shapes))
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _emit("clamp", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# structural ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _emit("matmul", ad @ bd, (a, b), back)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        if a.ndim != 2:
            raise ShapeError("transpose", a.shape, detail="default transpose needs a matrix")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", (), detail="nothing to concatenate")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` by an integer index list (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError("take", a.shape, (idx.size,), detail="index out of range")
    src = a.shape

    def back(g):
        out = np.zeros(src)
        np.add.at(out, (slice(None),) * (axis % len(src)) + (idx,), g)
        return (out,)

    return _emit("take", np.take(a.data, idx, axis=axis), (a,), back)


def gather_rows(a, index) -> Tensor:
    return take(a, index, axis=0)


def gather_max(a, neighbors) -> Tensor:
    """``out[i, c] = max_j a[neighbors[i, j], c]`` for a 2-D ``a``."""
    a = as_tensor(a)
    nb = np.asarray(neighbors, dtype=np.intp)
    if a.ndim != 2 or nb.ndim != 2 or nb.shape[1] == 0:
        raise ShapeError("gather_max", a.shape, nb.shape)
    if nb.size and (nb.min() < 0 or nb.max() >= a.shape[0]):
        raise ShapeError("gather_max", a.shape, nb.shape, detail="index out of range")
    vals = a.data[nb]  # m x k x C
    arg = np.argmax(vals, axis=1)  # m x C, first maximum wins
    rows = np.take_along_axis(nb, arg, axis=1)
    out = np.take_along_axis(vals, arg[:, None, :], axis=1)[:, 0, :]
    n, c = a.shape

    def back(g):
        flat = (rows * c + np.arange(c)[None, :]).ravel()
        return (np.bincount(flat, weights=g.ravel(), minlength=n * c).reshape(n, c),)

    return _emit("gather_max", out, (a,), back)


# reductions ----------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    src = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _emit("sum", np.asarray(out, dtype=np.float64), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise ShapeError("mean", a.shape, detail="mean over zero elements")
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# normalisation and attention building blocks -------------------------------

def softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Softmax of ``a / temperature`` along ``axis``."""
    a = as_tensor(a)
    if temperature <= 0:
        raise ValueError("softmax temperature must be positive")
    inv_t = 1.0 / temperature
    z = a.data * inv_t
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) * inv_t,)

    return _emit("softmax", out, (a,), back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    red = tuple(range(x.ndim - 1))

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit("layer_norm", xhat * gd + beta.data, (x, gamma, beta), back)


def linear(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` over the last axis."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError("linear", w.shape, b.shape, detail="bias")
        out = out + b.data
    x2 = xd.reshape(-1, xd.shape[-1])

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", out, inputs, back)


def cosine_similarity_matrix(a, b, eps: float = 1e-8) -> Tensor:
    """Pairwise cosine similarity of the rows of ``a`` (n x d) and ``b`` (m x d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_similarity_matrix", a.shape, b.shape)
    ad, bd = a.data, b.data
    ra = np.sqrt((ad * ad).sum(axis=1, keepdims=True))
    rb = np.sqrt((bd * bd).sum(axis=1, keepdims=True))
    an, bn = ad / (ra + eps), bd / (rb + eps)

    def _norm_back(dn, x, r):
        # d(x / (|x| + eps)) = dn / (|x|+eps) - x (x.dn) / (|x| (|x|+eps)^2)
        safe = np.where(r > 0, r, 1.0)
        coef = np.where(r > 0, (x * dn).sum(axis=1, keepdims=True) / (safe * (r + eps) ** 2), 0.0)
        return dn / (r + eps) - x * coef

    def back(g):
        return _norm_back(g @ bn, ad, ra), _norm_back(g.T @ an, bd, rb)

    return _emit("cosine_similarity_matrix", an @ bn.T, (a, b), back)


# losses ----------------------------------------------------------------------

def smooth_l1(d, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber with slope 1) of a difference tensor."""
    d = as_tensor(d)
    x = d.data
    ax = np.abs(x)
    quad = ax < beta
    out = np.where(quad, 0.5 * x * x / beta, ax - 0.5 * beta)
    return _emit("smooth_l1", out, (d,), lambda g: (g * np.where(quad, x / beta, np.sign(x)),))


def squared_error(a, b) -> Tensor:
    """Elementwise ``(a - b)**2``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("squared_error", a.shape, b.shape)
    diff = a.data - b.data
    return _emit("squared_error", diff * diff, (a, b), lambda g: (2 * g * diff, -2 * g * diff))


def nll(probs, targets) -> Tensor:
    """Mean over rows of ``-log probs[i, targets[i]]`` (cross-entropy of a
    row-stochastic matrix against index targets)."""
    probs = as_tensor(probs)
    t = np.asarray(targets, dtype=np.intp)
    if probs.ndim != 2 or t.shape != (probs.shape[0],):
        raise ShapeError("nll", probs.shape, t.shape)
    rows = np.arange(t.size)
    picked = probs.data[rows, t]
    if np.any(picked <= 0):
        raise NonFiniteError("nll", None)
    n = t.size

    def back(g):
        out = np.zeros(probs.shape)
        out[rows, t] = -g / (picked * n)
        return (out,)

    return _emit("nll", np.asarray(-np.log(picked).mean()), (probs,), back)


def cross_entropy(logits, targets) -> Tensor:
    """Softmax cross-entropy from raw logits against index targets, row mean."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, t.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(t.size)
    loss = (lse - z[rows, t]).mean()
    p = np.exp(z - lse[:, None])

    def back(g):
        out = p.copy()
        out[rows, t] -= 1.0
        return (out * (g / t.size),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), back)


def binary_cross_entropy(p, targets, eps: float = 1e-7) -> Tensor:
    """Mean BCE of probabilities clamped to ``[eps, 1 - eps]``."""
    p = as_tensor(p)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError("binary_cross_entropy", p.shape, y.shape)
    if p.data.size == 0:
        raise ShapeError("binary_cross_entropy", p.shape, detail="empty input")
    pc = np.clip(p.data, eps, 1 - eps)
    inside = (p.data >= eps) & (p.data <= 1 - eps)
    n = p.data.size
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean()

    def back(g):
        return (g * inside * (-(y / pc) + (1 - y) / (1 - pc)) / n,)

    return _emit("binary_cross_entropy", np.asarray(loss), (p,), back)
