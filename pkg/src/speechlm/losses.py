"""Unit masked-LM loss, unit CTC loss, their weighted sum, and greedy CTC decoding."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .model import ModelConfig, unit_logits
from .numerics import Tensor, ops
from .numerics.tensor import record

BLANK = 0


class TargetTooLong(ValueError):
    """No CTC alignment exists: the target needs more frames than the input has."""


@dataclass(frozen=True)
class LossBreakdown:
    umlm_half: float
    umlm_full: float
    uctc: float
    total: float
    lam: float
    empty_mask: bool = False

    @property
    def umlm(self) -> float:
        return self.umlm_half + self.umlm_full


# -- UMLM ------------------------------------------------------------------


def unit_distribution(h: np.ndarray, w: np.ndarray, e_table: np.ndarray, tau: float) -> np.ndarray:
    """``softmax_z cos(W h, e(z)) / tau`` for a single row ``h`` (no tape)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    hw = Tensor(np.asarray(h) @ np.asarray(w))
    logits = ops.scale(ops.cosine_similarity(hw, Tensor(np.asarray(e_table))), 1.0 / tau)
    return ops.softmax(logits).data


def umlm_terms(
    params: nn.Params,
    cfg: ModelConfig,
    h_half: Tensor,
    h_full: Tensor,
    targets: np.ndarray,
    masked: np.ndarray,
) -> tuple[Tensor, Tensor, int]:
    """Summed ``-log p(z | h)`` over masked frames at both layers, and the masked count.

    ``masked`` is a (B, M) boolean array; targets elsewhere are never read.
    """
    weights = masked.astype(h_half.dtype)
    safe = np.where(masked, targets, 0)
    half = ops.cross_entropy(unit_logits(params, cfg, h_half, "half"), safe, weights)
    full = ops.cross_entropy(unit_logits(params, cfg, h_full, "full"), safe, weights)
    return half, full, int(masked.sum())


def umlm_loss(params, cfg, h_half, h_full, targets, masked) -> tuple[Tensor, Tensor, bool]:
    """Per-layer UMLM losses averaged over masked positions.

    Returns ``(half, full, empty)``; with no masked frame anywhere both terms
    are zero and ``empty`` is True.
    """
    half, full, count = umlm_terms(params, cfg, h_half, h_full, targets, masked)
    if count == 0:
        warnings.warn("UMLM: no masked positions in batch; loss is 0", RuntimeWarning, stacklevel=2)
        return ops.scale(half, 0.0), ops.scale(full, 0.0), True
    return ops.scale(half, 1.0 / count), ops.scale(full, 1.0 / count), False


# -- CTC -------------------------------------------------------------------


def _lse3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ctc_nll(logits: Tensor, targets: Sequence[np.ndarray], input_lengths: np.ndarray | None = None) -> Tensor:
    """Per-sequence CTC negative log-likelihood, shape (B,).

    ``logits`` is (B, T, V) with the blank at index 0.  Forward and backward
    recursions run in log space over the blank-interleaved targets.
    """
    if logits.ndim != 3:
        raise ValueError("ctc_nll expects (B, T, V) logits")
    bsz, t_max, _ = logits.shape
    in_len = np.full(bsz, t_max) if input_lengths is None else np.asarray(input_lengths, dtype=np.int64)
    if len(targets) != bsz:
        raise ValueError("one target per batch item required")
    tgt_len = np.array([len(y) for y in targets], dtype=np.int64)
    s_max = 2 * int(tgt_len.max(initial=0)) + 1
    ext = np.zeros((bsz, s_max), dtype=np.int64)
    for b, y in enumerate(targets):
        y = np.asarray(y, dtype=np.int64)
        if np.any(y == BLANK):
            raise ValueError("blank id inside a CTC target")
        ext[b, 1 : 2 * len(y) : 2] = y
    s_len = 2 * tgt_len + 1
    states = np.arange(s_max)
    valid = states[None, :] < s_len[:, None]
    skip = np.zeros((bsz, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])

    x = logits.data.astype(np.float64)
    logp = _log_softmax_np(x)
    emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (bsz, t_max, s_max)), axis=2)
    neg = -np.inf
    alpha = np.full((bsz, t_max, s_max), neg)
    beta = np.full((bsz, t_max, s_max), neg)
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha[:, 0, 0] = emit[:, 0, 0]
        alpha[:, 0, 1:2] = np.where(tgt_len[:, None] > 0, emit[:, 0, 1:2], neg) if s_max > 1 else neg
        for t in range(1, t_max):
            prev = alpha[:, t - 1]
            one = np.concatenate([np.full((bsz, 1), neg), prev[:, :-1]], axis=1)
            two = np.concatenate([np.full((bsz, 2), neg), prev[:, :-2]], axis=1)[:, :s_max]
            two = np.where(skip, two, neg)
            cur = _lse3(prev, one, two) + emit[:, t]
            alpha[:, t] = np.where(valid & (t < in_len)[:, None], cur, neg)

        last = in_len - 1
        a_last = alpha[np.arange(bsz), last]
        end1 = a_last[np.arange(bsz), s_len - 1]
        end2 = np.where(tgt_len > 0, a_last[np.arange(bsz), np.maximum(s_len - 2, 0)], neg)
        loglik = np.logaddexp(end1, end2)
        if not np.all(np.isfinite(loglik)):
            bad = int(np.flatnonzero(~np.isfinite(loglik))[0])
            raise TargetTooLong(
                f"CTC target of length {tgt_len[bad]} cannot be aligned to {in_len[bad]} frames (item {bad})"
            )

        rows = np.arange(bsz)
        beta[rows, last, s_len - 1] = emit[rows, last, s_len - 1]
        has_tgt = tgt_len > 0
        beta[rows[has_tgt], last[has_tgt], s_len[has_tgt] - 2] = emit[rows[has_tgt], last[has_tgt], s_len[has_tgt] - 2]
        skip_next = np.zeros_like(skip)
        skip_next[:, :-2] = skip[:, 2:]
        for t in range(t_max - 2, -1, -1):
            nxt = beta[:, t + 1]
            one = np.concatenate([nxt[:, 1:], np.full((bsz, 1), neg)], axis=1)
            two = np.concatenate([nxt[:, 2:], np.full((bsz, 2), neg)], axis=1)[:, :s_max]
            two = np.where(skip_next, two, neg)
            cur = _lse3(nxt, one, two) + emit[:, t]
            active = (t < last)[:, None] & valid
            beta[:, t] = np.where(active, cur, beta[:, t])

    def backward(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            gamma = alpha + beta - emit - loglik[:, None, None]
            occ = np.where(np.isfinite(gamma), np.exp(gamma), 0.0)
        post = np.zeros_like(logp)
        bi, ti, si = np.indices(occ.shape)
        np.add.at(post, (bi, ti, np.broadcast_to(ext[:, None, :], occ.shape)), occ)
        grad = np.exp(logp) - post
        grad[np.arange(t_max)[None, :] >= in_len[:, None]] = 0.0
        return ((grad * np.asarray(g)[:, None, None]).astype(logits.dtype),)

    return record("ctc", (-loglik).astype(logits.dtype), (logits,), backward)


def uctc_loss(
    char_logits: Tensor, targets: Sequence[np.ndarray], input_lengths: np.ndarray | None = None
) -> Tensor:
    """CTC negative log-likelihood summed over the batch, divided by the total target length."""
    nll = ctc_nll(char_logits, targets, input_lengths)
    n_chars = max(1, int(sum(len(y) for y in targets)))
    return ops.scale(ops.sum(nll), 1.0 / n_chars)


def ctc_collapse(path: Sequence[int], blank: int = BLANK) -> tuple[int, ...]:
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return tuple(out)


def uctc_brute_force(char_logits: np.ndarray, target: Sequence[int]) -> float:
    """``-log`` of the summed probability of every path that collapses to ``target``.

    Enumerates all ``V**T`` label paths; only for T <= 8 and V <= 5.
    """
    logits = np.asarray(char_logits, dtype=np.float64)
    t, v = logits.shape
    if t > 8 or v > 5:
        raise ValueError(f"enumeration bound exceeded (T={t}, V={v})")
    probs = np.exp(_log_softmax_np(logits))
    target = tuple(int(c) for c in target)
    total = 0.0
    for path in itertools.product(range(v), repeat=t):
        if ctc_collapse(path) == target:
            total += float(np.prod(probs[np.arange(t), path]))
    if total == 0.0:
        raise TargetTooLong(f"no path of length {t} collapses to {target}")
    return -float(np.log(total))


def ctc_greedy_decode(char_logits: np.ndarray, length: int | None = None) -> tuple[int, ...]:
    """Per-frame argmax, merge repeats, drop blanks."""
    logits = np.asarray(char_logits)
    if length is not None:
        logits = logits[:length]
    return ctc_collapse(logits.argmax(axis=-1))


# -- joint objective -------------------------------------------------------


def joint_loss(umlm: float, uctc: float, lam: float, umlm_half: float | None = None) -> LossBreakdown:
    """``total = umlm + lam * uctc``.  ``umlm_half`` splits the UMLM value by layer."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    half = umlm if umlm_half is None else umlm_half
    full = umlm - half
    return LossBreakdown(half, full, uctc, umlm + lam * uctc, lam)
