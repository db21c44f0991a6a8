"""Pre-training (UMLM on speech + weighted UCTC on text), CTC fine-tuning, and evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import model as M
from .corpus import batch_pad, length_mask
from .losses import LossBreakdown, ctc_greedy_decode, umlm_loss, uctc_loss
from .metrics import error_rate, wer
from .nn import Params
from .numerics import Tape, Tensor, ops
from .optim import AdamConfig, OptimState, Schedule, adam_step, lr_at
from .pipeline import PreparedData, SpeechItem, TextItem
from .units import CharVocab

log = logging.getLogger(__name__)

# parameters that fine-tuning never touches
FROZEN_PREFIXES = ("unit_emb", "label_emb.", "proj.", "mask_emb")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    variant: str = "P"
    swap: bool = True
    text: bool = True
    seed: int = 0
    speech_batch: int = 8
    text_batch: int = 8
    pretrain_steps: int = 2000
    pretrain_warmup: int = 160
    peak_lr: float = 2e-3
    finetune_steps: int = 400
    finetune_warmup: int = 40
    finetune_lr: float = 1e-3
    finetune_batch: int = 8
    eval_every: int = 50
    reinit_ctc_head: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.variant not in ("P", "H"):
            raise ValueError(f"unknown variant {self.variant!r}")

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class SpeechForward:
    h_half: Tensor
    h_shared_in: Tensor
    h_full: Tensor
    shared_outputs: list[Tensor]
    units: np.ndarray
    lengths: np.ndarray
    masked: np.ndarray
    swapped: np.ndarray


def _stride_units(units: np.ndarray, stride: int) -> np.ndarray:
    return units[::stride] if stride > 1 else units


def speech_forward(
    params: Params,
    cfg: M.ModelConfig,
    items: Sequence[SpeechItem],
    rng: np.random.Generator | None,
    mask_prob: float | None = None,
    swap_prob: float | None = None,
    dropout_key=None,
) -> SpeechForward:
    """Frontend -> mask -> Speech Transformer -> swap -> Shared Transformer.

    ``mask_prob``/``swap_prob`` default to the config; pass 0 to disable.
    Plans are drawn per item from ``rng`` (mask first, then swap).
    """
    mask_prob = cfg.mask_prob if mask_prob is None else mask_prob
    swap_prob = cfg.swap_prob if swap_prob is None else swap_prob
    feats, raw_len = batch_pad([it.features for it in items])
    units, _ = batch_pad([_stride_units(it.units, cfg.stride) for it in items])
    x = M.frontend(params, Tensor(feats.astype(params["frontend.w"].dtype)), cfg)
    lengths = M.out_lengths(raw_len, cfg.stride)
    width = x.shape[1]
    units = units[:, :width]
    mask_plans, swap_plans = [], []
    for n in lengths:
        if rng is None or (mask_prob == 0 and swap_prob == 0):
            mask_plans.append(np.empty(0, np.int64))
            swap_plans.append(np.empty(0, np.int64))
            continue
        mp = M.make_mask_plan(int(n), mask_prob, cfg.mask_len, rng)
        mask_plans.append(mp)
        swap_plans.append(M.make_swap_plan(mp, int(n), swap_prob, rng))
    masked = M.plans_to_mask(mask_plans, lengths, width)
    swapped = M.plans_to_mask(swap_plans, lengths, width)
    x_hat = M.apply_mask(x, masked, params["mask_emb"])
    key = None if dropout_key is None else (*dropout_key, 0)
    h_half = M.encode_speech(params, x_hat, lengths, cfg, key)[-1]
    h_in = M.apply_swap(h_half, units, swapped, params["unit_emb"])
    shared = M.encode_shared(params, h_in, lengths, cfg, key)
    return SpeechForward(h_half, h_in, shared[-1], shared, units, lengths, masked, swapped)


def text_forward(
    params: Params,
    cfg: M.ModelConfig,
    items: Sequence[TextItem],
    rng: np.random.Generator | None,
    dropout_key=None,
) -> Tensor:
    """Masked unit embeddings -> Shared Transformer -> CTC head -> UCTC (per target char)."""
    units, lengths = batch_pad([it.units for it in items])
    u = M.embed_units(units, params["unit_emb"])
    if rng is not None and cfg.mask_prob > 0:
        plans = [M.make_mask_plan(int(n), cfg.mask_prob, cfg.mask_len, rng) for n in lengths]
        u = M.apply_mask(u, M.plans_to_mask(plans, lengths, units.shape[1]), params["mask_emb"])
    key = None if dropout_key is None else (*dropout_key, 1)
    h = M.encode_shared(params, u, lengths, cfg, key)[-1]
    logits = M.ctc_head_logits(params, h)
    return uctc_loss(logits, [it.chars for it in items], lengths)


def sample_batch(pool: Sequence, size: int, rng: np.random.Generator) -> list:
    idx = rng.choice(len(pool), size=min(size, len(pool)), replace=False)
    return [pool[i] for i in idx]


def check_variant(cfg: M.ModelConfig, tcfg: TrainConfig, data: PreparedData) -> None:
    if data.variant != tcfg.variant:
        raise ValueError(f"data tokenized with variant {data.variant} but training variant is {tcfg.variant}")
    if cfg.n_units != data.n_units:
        raise ValueError(f"model has {cfg.n_units} unit classes but tokenizer produces {data.n_units}")


def pretrain_loss(
    params: Params,
    cfg: M.ModelConfig,
    tcfg: TrainConfig,
    speech: Sequence[SpeechItem],
    text: Sequence[TextItem] | None,
    step: int,
) -> tuple[Tensor, dict]:
    """Joint loss for one step; separate random streams per branch."""
    srng = np.random.default_rng([tcfg.seed, step, 0])
    swap_prob = cfg.swap_prob if tcfg.swap else 0.0
    fwd = speech_forward(params, cfg, speech, srng, swap_prob=swap_prob, dropout_key=(tcfg.seed, step))
    half, full, empty = umlm_loss(params, cfg, fwd.h_half, fwd.h_full, fwd.units, fwd.masked)
    total = ops.add(half, full)
    uctc = None
    if tcfg.text and text:
        trng = np.random.default_rng([tcfg.seed, step, 1])
        uctc = text_forward(params, cfg, text, trng, dropout_key=(tcfg.seed, step))
        total = ops.add(total, ops.scale(uctc, tcfg.lam))
    parts = {
        "umlm_half": float(half.data),
        "umlm_full": float(full.data),
        "uctc": 0.0 if uctc is None else float(uctc.data),
        "empty_mask": empty,
        "forward": fwd,
    }
    return total, parts


def pretrain_step(
    params: Params,
    cfg: M.ModelConfig,
    tcfg: TrainConfig,
    data: PreparedData,
    state: OptimState,
    schedule: Schedule,
) -> LossBreakdown:
    """Draw one speech and one text batch for step ``state.step + 1`` and apply one Adam update."""
    step = state.step + 1
    brng = np.random.default_rng([tcfg.seed, step, 2])
    speech = sample_batch(data.pretrain_speech, tcfg.speech_batch, brng)
    text = sample_batch(data.pretrain_text, tcfg.text_batch, brng) if tcfg.text else None
    with Tape() as tape:
        total, parts = pretrain_loss(params, cfg, tcfg, speech, text, step)
    grads = tape.gradient(total, params)
    adam_step(params, grads, state, lr_at(schedule, step))
    return LossBreakdown(
        parts["umlm_half"], parts["umlm_full"], parts["uctc"], float(total.data), tcfg.lam, parts["empty_mask"]
    )


def finetune_trainable(params: Params) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if not k.startswith(FROZEN_PREFIXES)}


def speech_ctc_logits(params: Params, cfg: M.ModelConfig, items: Sequence[SpeechItem], dropout_key=None):
    """Unmasked, unswapped speech path into the CTC head."""
    fwd = speech_forward(params, cfg, items, None, mask_prob=0.0, swap_prob=0.0, dropout_key=dropout_key)
    assert not fwd.masked.any() and not fwd.swapped.any()
    return M.ctc_head_logits(params, fwd.h_full), fwd.lengths


def finetune_step(
    params: Params,
    cfg: M.ModelConfig,
    tcfg: TrainConfig,
    items: Sequence[SpeechItem],
    state: OptimState,
    schedule: Schedule,
) -> tuple[float, int]:
    """One CTC update on labelled speech.  Returns ``(loss, skipped)``.

    Items whose transcript cannot fit their frame count are skipped.
    """
    step = state.step + 1
    stride = cfg.stride
    usable = [it for it in items if -(-len(it.features) // stride) >= len(it.chars) + _repeats(it.chars)]
    skipped = len(items) - len(usable)
    if not usable:
        return float("nan"), skipped
    trainable = finetune_trainable(params)
    with Tape() as tape:
        logits, lengths = speech_ctc_logits(params, cfg, usable, dropout_key=(tcfg.seed, step, 9))
        loss = uctc_loss(logits, [it.chars for it in usable], lengths)
    grads = tape.gradient(loss, trainable)
    adam_step(trainable, grads, state, lr_at(schedule, step))
    return float(loss.data), skipped


def _repeats(chars: np.ndarray) -> int:
    return int(np.sum(chars[1:] == chars[:-1])) if len(chars) > 1 else 0


def decode(params: Params, cfg: M.ModelConfig, items: Sequence[SpeechItem], chars: CharVocab, batch: int = 32):
    hyps = []
    for start in range(0, len(items), batch):
        group = items[start : start + batch]
        logits, lengths = speech_ctc_logits(params, cfg, group)
        for b in range(len(group)):
            hyps.append(chars.decode(ctc_greedy_decode(logits.data[b], int(lengths[b]))))
    return hyps


def masked_unit_accuracy(
    params: Params, cfg: M.ModelConfig, items: Sequence[SpeechItem], seed: int = 1234, batch: int = 32
) -> dict[str, float]:
    """Fraction of masked frames whose most likely unit is the target, at both loss layers."""
    rng = np.random.default_rng(seed)
    hits = {"half": 0, "full": 0}
    total = 0
    for start in range(0, len(items), batch):
        group = items[start : start + batch]
        fwd = speech_forward(params, cfg, group, rng, swap_prob=0.0)
        for which, h in (("half", fwd.h_half), ("full", fwd.h_full)):
            pred = M.unit_logits(params, cfg, h, which).data.argmax(axis=-1)
            hits[which] += int(np.sum((pred == fwd.units) & fwd.masked))
        total += int(fwd.masked.sum())
    if total == 0:
        raise ValueError("no masked frames to score")
    return {"masked_unit_acc": hits["full"] / total, "masked_unit_acc_half": hits["half"] / total}


def evaluate(
    params: Params, cfg: M.ModelConfig, items: Sequence[SpeechItem], chars: CharVocab, with_units: bool = True
) -> dict[str, float]:
    """PER over output symbols (toy letters + separator), WER, and masked-unit accuracy."""
    if not items:
        raise ValueError("cannot evaluate an empty split")
    hyps = decode(params, cfg, items, chars)
    refs = [it.transcript for it in items]
    out = {
        "PER": error_rate([list(r) for r in refs], [list(h) for h in hyps]),
        "WER": wer(refs, hyps),
    }
    if with_units:
        out.update(masked_unit_accuracy(params, cfg, items))
    return out


def pretrain(
    params: Params,
    cfg: M.ModelConfig,
    tcfg: TrainConfig,
    data: PreparedData,
    state: OptimState | None = None,
    steps: int | None = None,
    on_step=None,
) -> tuple[OptimState, list[LossBreakdown]]:
    """Run pre-training from ``state.step`` up to ``steps`` (default: the full schedule)."""
    check_variant(cfg, tcfg, data)
    state = state or OptimState()
    schedule = Schedule(tcfg.peak_lr, tcfg.pretrain_warmup, tcfg.pretrain_steps)
    end = tcfg.pretrain_steps if steps is None else min(steps, tcfg.pretrain_steps)
    trace = []
    while state.step < end:
        br = pretrain_step(params, cfg, tcfg, data, state, schedule)
        trace.append(br)
        if on_step is not None:
            on_step(state.step, br)
    return state, trace


def finetune(
    params: Params,
    cfg: M.ModelConfig,
    tcfg: TrainConfig,
    data: PreparedData,
    chars: CharVocab,
    on_eval=None,
) -> tuple[Params, list[float], dict]:
    """CTC fine-tuning with best-dev-PER model selection.

    Returns the selected parameters, the loss trace, and the dev metrics of
    the selected checkpoint.
    """
    if tcfg.reinit_ctc_head:
        fresh = M.init_params(cfg, tcfg.seed + 1000, params["frontend.w"].dtype)
        for k, v in fresh.items():
            if k.startswith("ctc."):
                params[k].data[...] = v.data
    state = OptimState()
    schedule = Schedule(tcfg.finetune_lr, tcfg.finetune_warmup, tcfg.finetune_steps)
    rng = np.random.default_rng([tcfg.seed, 5])
    trace: list[float] = []
    best = None
    best_metrics: dict = {}
    for _ in range(tcfg.finetune_steps):
        items = sample_batch(data.finetune, tcfg.finetune_batch, rng)
        loss, _ = finetune_step(params, cfg, tcfg, items, state, schedule)
        trace.append(loss)
        if state.step % tcfg.eval_every == 0 or state.step == tcfg.finetune_steps:
            metrics = evaluate(params, cfg, data.dev, chars, with_units=False)
            if on_eval is not None:
                on_eval(state.step, metrics)
            if best is None or metrics["PER"] < best_metrics["PER"]:
                best = {k: v.data.copy() for k, v in params.items()}
                best_metrics = dict(metrics, step=state.step)
    if best is not None:
        for k, v in best.items():
            params[k].data[...] = v
    return params, trace, best_metrics
