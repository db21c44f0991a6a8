"""Non-autoregressive phoneme -> hidden-unit model.

Phoneme encoder, per-phoneme log-duration regressor, and a frame-level unit
decoder that runs on encoder states repeated by duration.  Training uses the
oracle durations; inference uses the predicted ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import nn
from ..corpus import batch_pad, length_mask
from ..numerics import Tape, Tensor, ops
from ..optim import AdamConfig, OptimState, Schedule, adam_step, lr_at
from ..units import HIDDEN, UnitSequence


@dataclass(frozen=True)
class T2UConfig:
    d_model: int = 64
    heads: int = 4
    ffn: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    n_buckets: int = 16
    max_distance: int = 64
    batch_size: int = 16
    peak_lr: float = 2e-3


@dataclass
class T2UPair:
    phonemes: np.ndarray
    durations: np.ndarray
    units: np.ndarray


@dataclass
class TextToUnitModel:
    params: nn.Params
    n_phonemes: int
    n_units: int
    config: T2UConfig = field(default_factory=T2UConfig)
    trained: bool = False
    loss_trace: list[float] = field(default_factory=list)


def init_t2u(n_phonemes: int, n_units: int, config: T2UConfig, seed: int, dtype=np.float32) -> TextToUnitModel:
    rng = np.random.default_rng(seed)
    c = config
    p: nn.Params = {}
    nn.add_param(p, "t2u.emb", (rng.normal(0, 1, size=(n_phonemes, c.d_model))).astype(dtype))
    for i in range(c.enc_layers):
        nn.init_block(p, f"t2u.enc.{i}", c.d_model, c.ffn, c.n_buckets, c.max_distance, c.heads, rng, dtype)
    nn.init_layer_norm(p, "t2u.enc.ln", c.d_model, dtype)
    nn.init_linear(p, "t2u.dur", c.d_model, 1, rng, dtype)
    for i in range(c.dec_layers):
        nn.init_block(p, f"t2u.dec.{i}", c.d_model, c.ffn, c.n_buckets, c.max_distance, c.heads, rng, dtype)
    nn.init_layer_norm(p, "t2u.dec.ln", c.d_model, dtype)
    nn.init_linear(p, "t2u.out", c.d_model, n_units, rng, dtype)
    return TextToUnitModel(p, n_phonemes, n_units, config)


def _encode(model: TextToUnitModel, ph: np.ndarray, lengths: np.ndarray) -> Tensor:
    c = model.config
    x = ops.embedding(model.params["t2u.emb"], ph)
    names = [f"t2u.enc.{i}" for i in range(c.enc_layers)]
    x = nn.run_stack(model.params, names, x, lengths, c.heads, c.n_buckets, c.max_distance)[-1]
    return nn.layer_norm(model.params, "t2u.enc.ln", x)


def _log_durations(model: TextToUnitModel, enc: Tensor) -> Tensor:
    out = nn.linear(model.params, "t2u.dur", enc)
    return ops.reshape(out, out.shape[:-1])


def _decode(model: TextToUnitModel, enc: Tensor, durations: np.ndarray, ph_lengths: np.ndarray):
    """Expand encoder states by ``durations`` (B, N) and return unit logits (B, M, K)."""
    c = model.config
    b, n, d = enc.shape
    frame_src = []
    for i in range(b):
        reps = durations[i, : ph_lengths[i]]
        frame_src.append(np.repeat(np.arange(ph_lengths[i]) + i * n, reps))
    index, frame_lengths = batch_pad(frame_src)
    flat = ops.reshape(enc, (b * n, d))
    x = ops.take_rows(flat, index.reshape(-1))
    x = ops.reshape(x, (b, index.shape[1], d))
    names = [f"t2u.dec.{i}" for i in range(c.dec_layers)]
    x = nn.run_stack(model.params, names, x, frame_lengths, c.heads, c.n_buckets, c.max_distance)[-1]
    x = nn.layer_norm(model.params, "t2u.dec.ln", x)
    return nn.linear(model.params, "t2u.out", x), frame_lengths


def t2u_loss(model: TextToUnitModel, batch: Sequence[T2UPair]) -> tuple[Tensor, Tensor]:
    """Mean squared log-duration error and mean per-frame unit cross-entropy."""
    ph, ph_len = batch_pad([p.phonemes.astype(np.int64) for p in batch])
    dur, _ = batch_pad([p.durations.astype(np.int64) for p in batch])
    units, frame_len = batch_pad([p.units.astype(np.int64) for p in batch])
    enc = _encode(model, ph, ph_len)
    pred = _log_durations(model, enc)
    ph_mask = length_mask(ph_len, ph.shape[1]).astype(enc.dtype)
    target = Tensor(np.log(np.maximum(dur, 1)).astype(enc.dtype))
    err = ops.sub(pred, target)
    dur_loss = ops.scale(ops.sum(ops.mul(ops.mul(err, err), Tensor(ph_mask))), 1.0 / ph_mask.sum())
    logits, flen = _decode(model, enc, dur, ph_len)
    fmask = length_mask(flen, logits.shape[1]).astype(enc.dtype)
    ce = ops.scale(ops.cross_entropy(logits, units, fmask), 1.0 / fmask.sum())
    return dur_loss, ce


def validate_pairs(pairs: Sequence[T2UPair]) -> None:
    if not pairs:
        raise ValueError("no text-to-unit pairs")
    for i, p in enumerate(pairs):
        if len(p.phonemes) != len(p.durations):
            raise ValueError(f"pair {i}: {len(p.phonemes)} phonemes but {len(p.durations)} durations")
        if int(np.sum(p.durations)) != len(p.units):
            raise ValueError(
                f"pair {i}: durations sum to {int(np.sum(p.durations))} but there are {len(p.units)} units"
            )
        if np.any(np.asarray(p.durations) < 1):
            raise ValueError(f"pair {i}: durations must be >= 1")


def t2u_train(
    pairs: Sequence[T2UPair],
    n_phonemes: int,
    n_units: int,
    epochs: int = 30,
    seed: int = 0,
    config: T2UConfig = T2UConfig(),
) -> TextToUnitModel:
    validate_pairs(pairs)
    model = init_t2u(n_phonemes, n_units, config, seed)
    rng = np.random.default_rng([seed, 1])
    steps_per_epoch = -(-len(pairs) // config.batch_size)
    total = max(2, epochs * steps_per_epoch)
    schedule = Schedule(config.peak_lr, max(1, total // 12), total + 1)
    state = OptimState()
    trainable = model.params
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), config.batch_size):
            batch = [pairs[i] for i in order[start : start + config.batch_size]]
            with Tape() as tape:
                dur_loss, ce = t2u_loss(model, batch)
                loss = ops.add(dur_loss, ce)
            grads = tape.gradient(loss, trainable)
            adam_step(trainable, grads, state, lr_at(schedule, state.step + 1), AdamConfig(clip_norm=5.0))
            model.loss_trace.append(float(loss.data))
    model.trained = True
    return model


def predict_durations(model: TextToUnitModel, phonemes: np.ndarray) -> np.ndarray:
    """Round-half-up of exp(predicted log duration), floored at 1."""
    ph = np.asarray(phonemes, dtype=np.int64)[None, :]
    enc = _encode(model, ph, np.array([ph.shape[1]]))
    logd = _log_durations(model, enc).data[0].astype(np.float64)
    return np.maximum(np.floor(np.exp(logd) + 0.5), 1).astype(np.int64)


def t2u_infer(model: TextToUnitModel, phonemes: UnitSequence | np.ndarray) -> UnitSequence:
    if not model.trained:
        raise ValueError("text-to-unit model has not been trained")
    ids = phonemes.ids if isinstance(phonemes, UnitSequence) else np.asarray(phonemes)
    if ids.size == 0:
        raise ValueError("empty phoneme sequence")
    ph = ids.astype(np.int64)[None, :]
    lengths = np.array([ph.shape[1]])
    enc = _encode(model, ph, lengths)
    logd = _log_durations(model, enc).data.astype(np.float64)
    dur = np.maximum(np.floor(np.exp(logd) + 0.5), 1).astype(np.int64)
    logits, _ = _decode(model, enc, dur, lengths)
    return UnitSequence(logits.data[0].argmax(axis=-1), HIDDEN)


def t2u_infer_batch(model: TextToUnitModel, phoneme_seqs: Sequence[np.ndarray], chunk: int = 64) -> list[np.ndarray]:
    """Batched :func:`t2u_infer` over many phoneme sequences."""
    if not model.trained:
        raise ValueError("text-to-unit model has not been trained")
    out: list[np.ndarray] = []
    for start in range(0, len(phoneme_seqs), chunk):
        group = [np.asarray(s, dtype=np.int64) for s in phoneme_seqs[start : start + chunk]]
        if any(g.size == 0 for g in group):
            raise ValueError("empty phoneme sequence")
        ph, lengths = batch_pad(group)
        enc = _encode(model, ph, lengths)
        logd = _log_durations(model, enc).data.astype(np.float64)
        dur = np.maximum(np.floor(np.exp(logd) + 0.5), 1).astype(np.int64)
        dur[~length_mask(lengths, ph.shape[1])] = 0
        logits, frame_len = _decode(model, enc, dur, lengths)
        ids = logits.data.argmax(axis=-1)
        out.extend(ids[i, : frame_len[i]].copy() for i in range(len(group)))
    return out
