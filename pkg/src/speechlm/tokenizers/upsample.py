"""Random-duration phoneme upsampling for the text side of the phoneme tokenizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..units import PHONEME, UnitSequence


@dataclass(frozen=True)
class UpsamplerConfig:
    mean: float = 5.0
    variance: float = 25.0
    sil_mean: float = 14.0
    sil_variance: float = 25.0
    min_len: int = 1
    max_len: int = 30

    def __post_init__(self):
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.mean <= 0 or self.sil_mean <= 0:
            raise ValueError("means must be positive")
        if self.variance < 0 or self.sil_variance < 0:
            raise ValueError("variances must be non-negative")


def sample_durations(
    phonemes: np.ndarray, sil_id: int | None, cfg: UpsamplerConfig, rng: np.random.Generator
) -> np.ndarray:
    is_sil = phonemes == sil_id if sil_id is not None else np.zeros(phonemes.shape, bool)
    mean = np.where(is_sil, cfg.sil_mean, cfg.mean)
    std = np.sqrt(np.where(is_sil, cfg.sil_variance, cfg.variance))
    draw = mean + std * rng.standard_normal(phonemes.shape)
    return np.clip(np.rint(draw), cfg.min_len, cfg.max_len).astype(np.int64)


def phoneme_upsample(
    phonemes: UnitSequence,
    cfg: UpsamplerConfig,
    rng: np.random.Generator,
    sil_id: int | None = None,
) -> UnitSequence:
    """Repeat each phoneme ``clip(round(N(mean, variance)), min_len, max_len)`` times.

    SIL (``sil_id``) draws from its own mean and variance.
    """
    if phonemes.kind != PHONEME:
        raise ValueError("upsampling expects a phoneme sequence")
    reps = sample_durations(phonemes.ids, sil_id, cfg, rng)
    return UnitSequence(np.repeat(phonemes.ids, reps), PHONEME)
