"""Layer-wise speech/unit alignment inside the Shared Transformer.

For each shared layer (``L/2`` meaning the input to the shared stack) the
probe reports the mean cosine between every speech frame's representation
and the input embedding of that frame's unit.  It also projects sampled
speech frames and unit-branch frames (oracle units pushed through the same
shared layers) to 2-D with PCA for plotting.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .nn import Params
from .pipeline import SpeechItem
from .training import speech_forward


@dataclass
class ProbeResult:
    layers: list[int]
    emb_cosine: list[float]
    pair_cosine: list[float]
    # rows of (layer, modality, x, y)
    projection: list[tuple[int, str, float, float]]

    def table(self, sep: str = "\t") -> str:
        lines = [sep.join(("layer", "modality", "x", "y"))]
        lines += [sep.join((str(l), m, f"{x:.6g}", f"{y:.6g}")) for l, m, x, y in self.projection]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.table(), encoding="utf-8")


def _row_cosine(a: np.ndarray, b: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    na = np.maximum(np.linalg.norm(a, axis=-1), eps)
    nb = np.maximum(np.linalg.norm(b, axis=-1), eps)
    return (a * b).sum(-1) / (na * nb)


def pca_2d(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(comps.shape[0]), np.abs(comps).argmax(axis=1)])
    signs[signs == 0] = 1.0
    out = centered @ (comps * signs[:, None]).T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def alignment_probe(
    params: Params,
    cfg: M.ModelConfig,
    items: Sequence[SpeechItem],
    n_points: int = 200,
    seed: int = 0,
    mask_prob: float = 0.0,
    swap_prob: float = 0.0,
) -> ProbeResult:
    """Mean frame/unit-embedding cosine per shared layer, plus a PCA table.

    ``n_points`` speech frames and ``n_points`` unit-branch frames are
    sampled (same positions) per layer for the projection table.
    """
    rng = np.random.default_rng(seed)
    fwd = speech_forward(params, cfg, items, rng, mask_prob=mask_prob, swap_prob=swap_prob)
    valid = np.arange(fwd.units.shape[1])[None, :] < fwd.lengths[:, None]
    emb = params["unit_emb"].data
    target = emb[fwd.units]
    # unit branch: oracle units through the shared stack
    text_in = M.embed_units(fwd.units, params["unit_emb"])
    text_layers = [text_in] + M.encode_shared(params, text_in, fwd.lengths, cfg)
    speech_layers = [fwd.h_shared_in] + fwd.shared_outputs
    layer_ids = list(range(cfg.layers // 2, cfg.layers + 1))

    flat_idx = np.flatnonzero(valid.reshape(-1))
    take = np.sort(rng.choice(flat_idx, size=min(n_points, flat_idx.size), replace=False))
    emb_cos, pair_cos, rows = [], [], []
    for layer, hs, ht in zip(layer_ids, speech_layers, text_layers):
        s = hs.data.astype(np.float64)
        t = ht.data.astype(np.float64)
        emb_cos.append(float(_row_cosine(s, target)[valid].mean()))
        pair_cos.append(float(_row_cosine(s, t)[valid].mean()))
        s_pts = s.reshape(-1, s.shape[-1])[take]
        t_pts = t.reshape(-1, t.shape[-1])[take]
        xy = pca_2d(np.concatenate([s_pts, t_pts]))
        rows += [(layer, "speech", float(x), float(y)) for x, y in xy[: len(take)]]
        rows += [(layer, "unit", float(x), float(y)) for x, y in xy[len(take) :]]
    return ProbeResult(layer_ids, emb_cos, pair_cos, rows)
