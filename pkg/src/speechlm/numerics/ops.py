"""Differentiable kernels.

Every public function takes :class:`Tensor` operands (plus plain numpy index
arrays where noted), computes the forward value with numpy and registers a
backward closure on the active tape.  Broadcasting follows numpy; gradients
are summed back to each operand's shape.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, record

KERNELS = (
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "add",
    "sub",
    "mul",
    "scale",
    "embedding",
    "cosine_similarity",
    "logsumexp",
    "cross_entropy",
    "dropout",
    "concat",
)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(kernel: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kernel, a.shape, b.shape) from None


# -- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    return record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    return record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    k = math.sqrt(2.0 / math.pi)
    u = x.data
    u2 = u * u
    inner = k * (u + 0.044715 * (u2 * u))
    t = np.tanh(inner)
    out = 0.5 * u * (1.0 + t)

    def backward(g):
        dinner = k * (1.0 + 3 * 0.044715 * u2)
        return (g * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner),)

    return record("gelu", out, (x,), backward)


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", out, (a, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(out), (x,), backward)


# -- normalisation and probabilities --------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-shifted)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax", p, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", out, (x,), backward)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = np.squeeze(out_k, axis=axis)

    def backward(g):
        w = np.exp(x.data - out_k)
        return (np.expand_dims(g, axis) * w,)

    return record("logsumexp", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", out, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted sum of ``-log softmax(logits)[target]`` over rows.

    ``logits`` has shape (..., C); ``targets`` the leading shape.  A zero
    weight removes a row entirely (its target is never read).
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    if weights is None:
        weights = np.ones(targets.shape, dtype=logits.dtype)
    weights = np.asarray(weights, dtype=logits.dtype)
    if weights.shape != targets.shape:
        raise ShapeError("cross_entropy", targets.shape, weights.shape, detail="weights")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    live = weights != 0
    safe_t = np.where(live, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -np.sum(np.where(live, picked * weights, 0.0))

    def backward(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        grad = (grad - onehot) * weights[..., None]
        return (g * grad,)

    return record("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# -- gathers, selection, structure ----------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding", table.shape, ids.shape, detail="ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return record("embedding", table.data[ids], (table,), backward)


def cosine_similarity(rows: Tensor, table: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine between each row of ``rows`` (..., d) and each row of ``table`` (K, d).

    Norms are floored at ``eps`` so zero vectors give similarity 0.
    """
    if table.ndim != 2 or rows.shape[-1] != table.shape[-1]:
        raise ShapeError("cosine_similarity", rows.shape, table.shape)
    a, e = rows.data, table.data
    na = np.maximum(np.sqrt((a * a).sum(axis=-1, keepdims=True)), eps)
    ne = np.maximum(np.sqrt((e * e).sum(axis=-1, keepdims=True)), eps)
    ah = a / na
    eh = e / ne
    out = ah @ eh.T

    def backward(g):
        # d/da of (a/|a|).eh = (eh - ah (ah.eh)) / |a|   (when |a| > eps)
        ga_hat = g @ eh
        ge_hat = np.tensordot(g, ah, axes=(tuple(range(g.ndim - 1)), tuple(range(ah.ndim - 1))))
        a_live = na > eps
        e_live = ne > eps
        ga = np.where(a_live, (ga_hat - ah * (ga_hat * ah).sum(-1, keepdims=True)), ga_hat) / na
        ge = np.where(e_live, (ge_hat - eh * (ge_hat * eh).sum(-1, keepdims=True)), ge_hat) / ne
        return ga, ge

    return record("cosine_similarity", out, (rows, table), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (the time axis for sequence tensors)."""
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in xs)) from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", out, tuple(xs), backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return record("slice", x.data[index].copy(), (x,), backward)


def take_rows(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (e.g. strided frames)."""
    index = np.asarray(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * axis + (index,), g)
        return (gx,)

    return record("take_rows", np.take(x.data, index, axis=axis), (x,), backward)


def replace_rows(x: Tensor, where: np.ndarray, src: Tensor) -> Tensor:
    """Return ``x`` with positions selected by boolean ``where`` taken from ``src``.

    ``where`` has the shape of ``x`` without its last axis; ``src`` broadcasts
    against ``x``.  Unselected rows are copied bit-for-bit.
    """
    where = np.asarray(where, dtype=bool)
    if where.shape != x.shape[:-1]:
        raise ShapeError("replace_rows", x.shape, where.shape)
    _broadcast_shape("replace_rows", x, src)
    src_full = np.broadcast_to(src.data, x.shape)
    out = x.data.copy()
    out[where] = src_full[where]

    def backward(g):
        gx = g.copy()
        gx[where] = 0.0
        gs = np.zeros_like(g)
        gs[where] = g[where]
        return gx, _unbroadcast(gs, src.shape)

    return record("replace_rows", out, (x, src), backward)


def constant(value, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))
