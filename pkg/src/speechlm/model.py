"""Speech Transformer + Shared Transformer encoder with masking, random swapping and a CTC head.

All sequence tensors are batched as (B, M, d) with a length vector; padded
frames are excluded from attention (as keys), from mask and swap plans,
and from every loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn
from .numerics import Tensor, ops


@dataclass(frozen=True)
class ModelConfig:
    n_units: int
    n_chars: int
    feat_dim: int = 16
    layers: int = 4
    d_model: int = 64
    heads: int = 4
    ffn: int = 256
    mask_prob: float = 0.08
    mask_len: int = 10
    swap_prob: float = 0.15
    tau: float = 0.1
    stride: int = 1
    n_buckets: int = 16
    max_distance: int = 64
    dropout: float = 0.0
    tie_label_emb: bool = False

    def __post_init__(self):
        if self.layers < 2 or self.layers % 2:
            raise ValueError("layers must be even and >= 2")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if not 0.0 <= self.mask_prob <= 1.0 or not 0.0 <= self.swap_prob <= 1.0:
            raise ValueError("mask_prob and swap_prob must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.stride < 1 or self.mask_len < 1:
            raise ValueError("stride and mask_len must be >= 1")
        if self.n_units < 2 or self.n_chars < 2:
            raise ValueError("vocabularies too small")

    @property
    def speech_layers(self) -> list[str]:
        return [f"speech.{i}" for i in range(self.layers // 2)]

    @property
    def shared_layers(self) -> list[str]:
        return [f"shared.{i}" for i in range(self.layers // 2)]

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> nn.Params:
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    p: nn.Params = {}
    nn.init_linear(p, "frontend", cfg.feat_dim * cfg.stride, d, rng, dtype)
    nn.add_param(p, "mask_emb", rng.uniform(0, 1, size=d).astype(dtype))
    for name in cfg.speech_layers + cfg.shared_layers:
        nn.init_block(p, name, d, cfg.ffn, cfg.n_buckets, cfg.max_distance, cfg.heads, rng, dtype)
    nn.add_param(p, "unit_emb", rng.normal(0, 1, size=(cfg.n_units, d)).astype(dtype))
    for which in ("half", "full"):
        nn.init_linear(p, f"proj.{which}", d, d, rng, dtype, bias=False)
        if not cfg.tie_label_emb:
            nn.add_param(p, f"label_emb.{which}", rng.normal(0, 1, size=(cfg.n_units, d)).astype(dtype))
    nn.init_layer_norm(p, "ctc.ln", d, dtype)
    nn.add_param(p, "ctc.conv.w_prev", nn.dense_init(rng, d, d, dtype))
    nn.add_param(p, "ctc.conv.w_cur", nn.dense_init(rng, d, d, dtype))
    nn.add_param(p, "ctc.conv.b", np.zeros(d, dtype=dtype))
    nn.init_linear(p, "ctc.out", d, cfg.n_chars, rng, dtype)
    return p


def label_table(params: nn.Params, cfg: ModelConfig, which: str) -> Tensor:
    return params["unit_emb"] if cfg.tie_label_emb else params[f"label_emb.{which}"]


# -- frontend, masking, swapping ------------------------------------------


def frontend(params: nn.Params, feats: Tensor, cfg: ModelConfig) -> Tensor:
    """Strided linear projection (B, M0, D) -> (B, ceil(M0 / stride), d).

    With stride s, each output frame sees ``s`` consecutive input frames
    concatenated (the tail is zero-padded).
    """
    if feats.ndim != 3 or feats.shape[1] == 0:
        raise ValueError("frontend needs a non-empty (B, M0, D) feature batch")
    b, m0, dim = feats.shape
    s = cfg.stride
    if s > 1:
        m = -(-m0 // s)
        if m * s != m0:
            pad = Tensor(np.zeros((b, m * s - m0, dim), dtype=feats.dtype))
            feats = ops.concat([feats, pad], axis=1)
        feats = ops.reshape(feats, (b, m, s * dim))
    return nn.linear(params, "frontend", feats)


def out_lengths(lengths: np.ndarray, stride: int) -> np.ndarray:
    return -(-np.asarray(lengths) // stride)


def make_mask_plan(length: int, mask_prob: float, mask_len: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted masked indices: union of ``[s, s + mask_len)`` over Bernoulli(mask_prob) starts.

    If no start is drawn but masking is possible (``mask_prob > 0`` and
    ``length >= mask_len``), one start is placed uniformly in
    ``[0, length - mask_len]`` so a trainable sequence always has targets.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    starts = np.flatnonzero(rng.random(length) < mask_prob)
    if starts.size == 0 and mask_prob > 0 and length >= mask_len:
        starts = np.array([rng.integers(0, length - mask_len + 1)])
    covered = np.zeros(length, dtype=bool)
    for s in starts:
        covered[s : s + mask_len] = True
    return np.flatnonzero(covered)


def make_swap_plan(mask_plan: np.ndarray, length: int, swap_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Each unmasked index joins the swap set independently with probability ``swap_prob``."""
    draws = rng.random(length) < swap_prob
    draws[np.asarray(mask_plan, dtype=np.int64)] = False
    return np.flatnonzero(draws)


def plans_to_mask(plans, lengths: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(plans), width), dtype=bool)
    for b, (plan, n) in enumerate(zip(plans, lengths)):
        plan = np.asarray(plan, dtype=np.int64)
        if plan.size and (plan.min() < 0 or plan.max() >= n):
            raise IndexError(f"plan index out of range for sequence {b} of length {n}")
        out[b, plan] = True
    return out


def apply_mask(x: Tensor, mask: np.ndarray, mask_emb: Tensor) -> Tensor:
    """Rows where ``mask`` (B, M) is set become the learned mask embedding."""
    if not mask.any():
        return x
    return ops.replace_rows(x, mask, mask_emb)


def apply_swap(h: Tensor, units: np.ndarray, swap: np.ndarray, emb: Tensor) -> Tensor:
    """Rows where ``swap`` is set become ``Emb(units)`` for that frame."""
    if units.shape != h.shape[:-1]:
        raise ValueError(f"unit labels {units.shape} do not match representation {h.shape[:-1]}")
    if not swap.any():
        return h
    return ops.replace_rows(h, swap, embed_units(units, emb))


def embed_units(units: np.ndarray, emb: Tensor) -> Tensor:
    return ops.embedding(emb, np.asarray(units, dtype=np.int64))


# -- encoder stacks and heads ---------------------------------------------


def _layer_rngs(cfg: ModelConfig, names, dropout_key):
    # dropout_key is (seed, step[, branch]); each layer gets its own stream
    if cfg.dropout <= 0 or dropout_key is None:
        return None
    return [np.random.default_rng([*dropout_key, layer_index(cfg, n)]) for n in names]


def layer_index(cfg: ModelConfig, name: str) -> int:
    stack, i = name.split(".")
    return int(i) + (cfg.layers // 2 if stack == "shared" else 0)


def encode_speech(params, x_hat: Tensor, lengths, cfg: ModelConfig, dropout_key=None) -> list[Tensor]:
    """Speech Transformer; returns outputs of layers 1..L/2."""
    names = cfg.speech_layers
    return nn.run_stack(
        params, names, x_hat, lengths, cfg.heads, cfg.n_buckets, cfg.max_distance,
        cfg.dropout, _layer_rngs(cfg, names, dropout_key),
    )


def encode_shared(params, h_in: Tensor, lengths, cfg: ModelConfig, dropout_key=None) -> list[Tensor]:
    """Shared Transformer (same parameters for speech and text); layers L/2+1..L."""
    names = cfg.shared_layers
    return nn.run_stack(
        params, names, h_in, lengths, cfg.heads, cfg.n_buckets, cfg.max_distance,
        cfg.dropout, _layer_rngs(cfg, names, dropout_key),
    )


def ctc_head_logits(params: nn.Params, h: Tensor) -> Tensor:
    """Width-2 causal convolution (one frame of left padding) then projection to chars + blank."""
    b, n, d = h.shape
    h = nn.layer_norm(params, "ctc.ln", h)
    zero = Tensor(np.zeros((b, 1, d), dtype=h.dtype))
    prev = ops.concat([zero, ops.slice_axis(h, 0, n - 1, axis=1)], axis=1) if n > 1 else zero
    y = ops.add(
        ops.add(ops.matmul(prev, params["ctc.conv.w_prev"]), ops.matmul(h, params["ctc.conv.w_cur"])),
        params["ctc.conv.b"],
    )
    return nn.linear(params, "ctc.out", y)


def unit_logits(params: nn.Params, cfg: ModelConfig, h: Tensor, which: str) -> Tensor:
    """``cos(W h, e(z)) / tau`` for every unit z."""
    projected = nn.linear(params, f"proj.{which}", h)
    return ops.scale(ops.cosine_similarity(projected, label_table(params, cfg, which)), 1.0 / cfg.tau)
