"""Pre-norm Transformer blocks with bucketed relative-position attention bias.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names so
checkpoints and optimizers can address them uniformly.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .numerics import Tensor, ops

Params = dict[str, Tensor]

NEG_INF = -1e9


def dense_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def add_param(params: Params, name: str, value: np.ndarray) -> None:
    if name in params:
        raise KeyError(f"duplicate parameter {name}")
    params[name] = Tensor(value, requires_grad=True, name=name)


def init_linear(params: Params, name: str, fan_in: int, fan_out: int, rng, dtype, bias: bool = True):
    add_param(params, f"{name}.w", dense_init(rng, fan_in, fan_out, dtype))
    if bias:
        add_param(params, f"{name}.b", np.zeros(fan_out, dtype=dtype))


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    y = ops.matmul(x, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return y if b is None else ops.add(y, b)


def init_layer_norm(params: Params, name: str, d: int, dtype) -> None:
    add_param(params, f"{name}.g", np.ones(d, dtype=dtype))
    add_param(params, f"{name}.b", np.zeros(d, dtype=dtype))


def layer_norm(params: Params, name: str, x: Tensor) -> Tensor:
    return ops.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def init_block(
    params: Params, name: str, d: int, ffn: int, n_buckets: int, max_distance: int, heads: int, rng, dtype
) -> None:
    init_layer_norm(params, f"{name}.ln1", d, dtype)
    for proj in ("q", "k", "v", "o"):
        # a key bias only shifts every score in a query row equally, which softmax ignores
        init_linear(params, f"{name}.attn.{proj}", d, d, rng, dtype, bias=proj != "k")
    init_layer_norm(params, f"{name}.ln2", d, dtype)
    init_linear(params, f"{name}.ffn.1", d, ffn, rng, dtype)
    init_linear(params, f"{name}.ffn.2", ffn, d, rng, dtype)
    add_param(params, f"{name}.rel_bias", distance_prior(n_buckets, heads, max_distance).astype(dtype))


def relative_buckets(length: int, n_buckets: int, max_distance: int) -> np.ndarray:
    """Bidirectional log-spaced bucket index for every (query, key) offset.

    Half the buckets go to each sign of ``key - query``; within a half, small
    offsets get one bucket each and larger ones share log-spaced buckets up
    to ``max_distance``.
    """
    pos = np.arange(length)
    rel = pos[None, :] - pos[:, None]
    half = n_buckets // 2
    out = np.where(rel > 0, half, 0)
    n = np.abs(rel)
    exact = half // 2
    big = exact + (
        np.log(np.maximum(n, 1) / exact) / math.log(max_distance / exact) * (half - exact)
    ).astype(np.int64)
    big = np.minimum(big, half - 1)
    return (out + np.where(n < exact, n, big)).astype(np.int64)


def distance_prior(n_buckets: int, heads: int, max_distance: int) -> np.ndarray:
    """Initial (n_buckets, heads) bias: ``-slope_h * distance`` with geometric slopes.

    Relative bias is the only positional signal, and Adam moves each entry by
    about one learning rate per step, so a zero start leaves attention global
    for thousands of steps. Each bucket takes the smallest distance it holds.
    """
    rel = relative_buckets(2 * max_distance + 1, n_buckets, max_distance)[max_distance]
    dist = np.full(n_buckets, float(max_distance))
    for offset in range(-max_distance, max_distance + 1):
        b = rel[offset + max_distance]
        dist[b] = min(dist[b], abs(offset))
    slopes = 2.0 ** (-np.arange(1, heads + 1) * 4.0 / heads)
    return -dist[:, None] * slopes[None, :]


def attention_bias(params: Params, name: str, buckets: np.ndarray) -> Tensor:
    table = params[f"{name}.rel_bias"]
    return ops.transpose(ops.embedding(table, buckets), (2, 0, 1))


def block(
    params: Params,
    name: str,
    x: Tensor,
    buckets: np.ndarray,
    key_pad: np.ndarray | None,
    heads: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One pre-norm block on ``x`` of shape (B, M, d)."""
    b, m, d = x.shape
    dh = d // heads
    h = layer_norm(params, f"{name}.ln1", x)

    def split(t: Tensor) -> Tensor:
        return ops.transpose(ops.reshape(t, (b, m, heads, dh)), (0, 2, 1, 3))

    q = split(linear(params, f"{name}.attn.q", h))
    k = split(linear(params, f"{name}.attn.k", h))
    v = split(linear(params, f"{name}.attn.v", h))
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = ops.add(scores, attention_bias(params, name, buckets))
    if key_pad is not None:
        scores = ops.add(scores, Tensor(key_pad.astype(x.dtype)))
    attn = ops.softmax(scores)
    ctx = ops.matmul(attn, v)
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, m, d))
    x = ops.add(x, ops.dropout(linear(params, f"{name}.attn.o", ctx), dropout, rng))
    h = layer_norm(params, f"{name}.ln2", x)
    h = linear(params, f"{name}.ffn.2", ops.gelu(linear(params, f"{name}.ffn.1", h)))
    return ops.add(x, ops.dropout(h, dropout, rng))


def key_padding(lengths: np.ndarray | None, width: int) -> np.ndarray | None:
    """Additive (B, 1, 1, M) mask hiding padded keys, or None without padding."""
    if lengths is None or np.all(np.asarray(lengths) == width):
        return None
    valid = np.arange(width)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def run_stack(
    params: Params,
    names: Sequence[str],
    x: Tensor,
    lengths: np.ndarray | None,
    heads: int,
    n_buckets: int,
    max_distance: int,
    dropout: float = 0.0,
    rngs: Sequence[np.random.Generator | None] | None = None,
) -> list[Tensor]:
    """Apply blocks in order; returns every block's output."""
    m = x.shape[1]
    buckets = relative_buckets(m, n_buckets, max_distance)
    pad = key_padding(lengths, m)
    outs = []
    for i, name in enumerate(names):
        rng = rngs[i] if rngs is not None else None
        x = block(params, name, x, buckets, pad, heads, dropout, rng)
        outs.append(x)
    return outs
