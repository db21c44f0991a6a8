"""Edit-distance error rates and cluster purity."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    ref = list(ref)
    hyp = list(hyp)
    prev = np.arange(len(hyp) + 1)
    for i, r in enumerate(ref, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return int(prev[-1])


def error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Corpus-level rate: total edits over total reference length."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps differ in count")
    if not refs:
        raise ValueError("no references")
    edits = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("references are empty")
    return edits / total


def wer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    return error_rate([r.split() for r in refs], [h.split() for h in hyps])


def cer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    return error_rate([list(r) for r in refs], [list(h) for h in hyps])


def frame_purity(clusters: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of frames whose cluster's majority label equals their own label."""
    clusters = np.asarray(clusters, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if clusters.shape != labels.shape or clusters.size == 0:
        raise ValueError("need equal-length, non-empty cluster and label arrays")
    counts = np.zeros((clusters.max() + 1, labels.max() + 1), dtype=np.int64)
    np.add.at(counts, (clusters, labels), 1)
    return float(counts.max(axis=1).sum() / clusters.size)
