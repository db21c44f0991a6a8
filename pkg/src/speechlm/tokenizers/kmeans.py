"""k-means hidden-unit tokenizer for speech frames."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..units import HIDDEN, UnitSequence

MAGIC = b"SPLM-KM1"
_CHUNK = 4096


@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray
    inertia_trace: tuple[float, ...] = ()

    def __post_init__(self):
        c = np.asarray(self.centroids)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ValueError("need a K x D centroid matrix with K >= 2")

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])


def squared_distances(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact ``sum((x - c)**2)`` for every frame/centroid pair, chunked over frames."""
    out = np.empty((frames.shape[0], centroids.shape[0]), dtype=np.float64)
    c = centroids.astype(np.float64)
    for start in range(0, frames.shape[0], _CHUNK):
        x = frames[start : start + _CHUNK].astype(np.float64)
        diff = x[:, None, :] - c[None, :, :]
        out[start : start + _CHUNK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _plus_plus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each new center is the best of ``2 + log k`` D^2-weighted draws."""
    n = x.shape[0]
    trials = 2 + int(np.log(k))
    centers = [x[rng.integers(n)]]
    closest = squared_distances(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            cand = rng.integers(n, size=trials)
        else:
            cand = rng.choice(n, size=trials, p=closest / total)
        cand_d2 = np.minimum(closest[None, :], squared_distances(x, x[cand]).T)
        best = int(cand_d2.sum(axis=1).argmin())
        centers.append(x[cand[best]])
        closest = cand_d2[best]
    return np.array(centers)


def kmeans_fit(frames: np.ndarray, k: int, iters: int = 50, seed: int = 0, n_init: int = 3) -> KMeansModel:
    """Lloyd's algorithm from greedy k-means++ seeds; best of ``n_init`` runs.

    Empty clusters are re-seeded at the point farthest from its centroid.
    Stops early once assignments stop changing.  The inertia recorded after
    every assignment step must not increase; a violation raises.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("frames must be N x D")
    n = x.shape[0]
    if n < k:
        raise ValueError(f"need at least K={k} frames, got {n}")
    if k < 2:
        raise ValueError("K must be >= 2")
    if iters < 1 or n_init < 1:
        raise ValueError("iters and n_init must be >= 1")
    runs = [_lloyd(x, k, iters, np.random.default_rng([seed, r])) for r in range(n_init)]
    return min(runs, key=lambda m: m.inertia_trace[-1])


def _lloyd(x: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> KMeansModel:
    n = x.shape[0]
    centroids = _plus_plus_init(x, k, rng)
    trace: list[float] = []
    labels = None
    for _ in range(iters):
        d2 = squared_distances(x, centroids)
        new_labels = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), new_labels]
        inertia = float(point_d2.sum())
        if trace and inertia > trace[-1] * (1 + 1e-12) + 1e-12:
            raise RuntimeError(f"k-means inertia increased: {trace[-1]} -> {inertia}")
        trace.append(inertia)
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        live = counts > 0
        centroids[live] = sums[live] / counts[live, None]
        if not live.all():
            taken = point_d2.copy()
            for j in np.flatnonzero(~live):
                far = int(taken.argmax())
                centroids[j] = x[far]
                taken[far] = -1.0
    return KMeansModel(centroids.astype(np.float32), tuple(trace))


def kmeans_assign(model: KMeansModel, frames: np.ndarray) -> UnitSequence:
    """Nearest centroid per frame; ties go to the lowest id."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != model.dim:
        raise ValueError(f"frame dim {frames.shape[-1]} does not match centroid dim {model.dim}")
    return UnitSequence(squared_distances(frames, model.centroids).argmin(axis=1), HIDDEN)


def inertia(model: KMeansModel, frames: np.ndarray) -> float:
    return float(squared_distances(np.asarray(frames), model.centroids).min(axis=1).sum())


def save_kmeans(model: KMeansModel, path: str | Path) -> None:
    c = np.ascontiguousarray(model.centroids, dtype="<f4")
    Path(path).write_bytes(MAGIC + struct.pack("<ii", model.k, model.dim) + c.tobytes())


def load_kmeans(path: str | Path) -> KMeansModel:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a k-means model file (bad magic)")
    head = len(MAGIC) + 8
    if len(data) < head:
        raise ValueError(f"{path}: truncated header")
    k, d = struct.unpack("<ii", data[len(MAGIC) : head])
    if len(data) != head + 4 * k * d:
        raise ValueError(f"{path}: expected {k * d} centroid values")
    c = np.frombuffer(data[head:], dtype="<f4").reshape(k, d).astype(np.float32)
    return KMeansModel(c)
