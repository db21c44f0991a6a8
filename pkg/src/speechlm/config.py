"""Flat ``section.key = value`` run configuration.

Sections map onto the dataclasses used by each stage:

* ``data``   seeds of the language and corpus (``data.seed``) and of training (``data.train_seed``)
* ``lang``   :class:`~speechlm.corpus.LanguageConfig`
* ``split``  :class:`~speechlm.corpus.SplitSizes`
* ``tok``    :class:`~speechlm.pipeline.TokenizerSettings` (scalar fields); ``tok.p_sil`` is the
  SIL insertion rate for text, ``lang.p_sil`` the one used to synthesize speech
* ``ups``    :class:`~speechlm.tokenizers.UpsamplerConfig`
* ``model``  :class:`~speechlm.model.ModelConfig` minus the vocabulary sizes and ``feat_dim``
  (taken from ``lang.feat_dim``)
* ``train``  :class:`~speechlm.training.TrainConfig` minus the seed

Precedence is defaults < config file < overrides.  Unknown keys and values
that fail to parse raise :class:`ConfigError` naming the key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping

from .corpus import LanguageConfig, SplitSizes
from .model import ModelConfig
from .pipeline import TokenizerSettings
from .tokenizers import UpsamplerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, detail: str):
        self.key = key
        super().__init__(f"{key}: {detail}")


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    train_seed: int = 0


@dataclass(frozen=True)
class ModelKnobs:
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


@dataclass(frozen=True)
class TokKnobs:
    kmeans_k: int = 32
    kmeans_iters: int = 50
    t2u_epochs: int = 30
    p_sil: float = 0.25


_TRAIN_SKIP = {"seed"}

KEY_DOCS = {
    "data.seed": "seed of the toy language, corpus and tokenizer fits",
    "data.train_seed": "seed of parameter init, batch draws, masking and swapping",
    "lang.n_phonemes": "regular phonemes (SIL and UNK come on top)",
    "lang.n_words": "lexicon size",
    "lang.min_word_len": "fewest phonemes per word",
    "lang.max_word_len": "most phonemes per word",
    "lang.n_letters": "letters in the toy alphabet",
    "lang.separator": "word separator character in transcripts",
    "lang.feat_dim": "frame feature dimension",
    "lang.noise": "std of the Gaussian noise around phoneme prototypes",
    "lang.dur_mean": "mean phoneme duration in frames",
    "lang.dur_std": "std of phoneme durations",
    "lang.dur_min": "shortest phoneme duration",
    "lang.p_sil": "probability of a SIL segment at each word boundary in speech",
    "lang.zipf": "exponent of the Zipf word distribution",
    "lang.min_words": "fewest words per sentence",
    "lang.max_words": "most words per sentence",
    "split.paired": "utterances used only to fit tokenizers",
    "split.pretrain_speech": "unlabelled speech for pre-training",
    "split.pretrain_text": "text-only sentences for pre-training",
    "split.finetune": "labelled speech for CTC fine-tuning",
    "split.dev": "labelled speech for model selection",
    "split.test": "labelled speech for final scoring",
    "tok.kmeans_k": "hidden-unit vocabulary size",
    "tok.kmeans_iters": "Lloyd iterations per k-means restart",
    "tok.t2u_epochs": "text-to-unit training epochs",
    "tok.p_sil": "SIL insertion rate at word boundaries of text",
    "ups.mean": "mean repeat count of a phoneme when upsampling text",
    "ups.variance": "variance of the phoneme repeat count",
    "ups.sil_mean": "mean repeat count of SIL",
    "ups.sil_variance": "variance of the SIL repeat count",
    "ups.min_len": "repeat counts are clamped to at least this",
    "ups.max_len": "repeat counts are clamped to at most this",
    "model.layers": "total encoder layers, half speech and half shared (even)",
    "model.d_model": "model width",
    "model.heads": "attention heads",
    "model.ffn": "feed-forward width",
    "model.mask_prob": "probability that a frame starts a masked span",
    "model.mask_len": "masked span length in frames",
    "model.swap_prob": "probability that an unmasked frame is swapped for its unit embedding",
    "model.tau": "temperature of the cosine unit classifier",
    "model.stride": "frames concatenated per model step by the frontend",
    "model.n_buckets": "relative-position buckets",
    "model.max_distance": "offset at which relative-position buckets saturate",
    "model.dropout": "dropout rate inside Transformer blocks",
    "model.tie_label_emb": "score units against the input embedding table",
    "train.lam": "weight of the unit CTC loss in pre-training",
    "train.variant": "unit tokenizer: P (phonemes) or H (k-means hidden units)",
    "train.swap": "enable random swapping",
    "train.text": "enable the text branch in pre-training",
    "train.speech_batch": "speech utterances per pre-training step",
    "train.text_batch": "text sentences per pre-training step",
    "train.pretrain_steps": "pre-training steps",
    "train.pretrain_warmup": "pre-training warmup steps",
    "train.peak_lr": "pre-training peak learning rate",
    "train.finetune_steps": "fine-tuning steps",
    "train.finetune_warmup": "fine-tuning warmup steps",
    "train.finetune_lr": "fine-tuning peak learning rate",
    "train.finetune_batch": "utterances per fine-tuning step",
    "train.eval_every": "dev evaluation cadence in fine-tuning steps",
    "train.reinit_ctc_head": "re-initialize the CTC head before fine-tuning",
}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    lang: LanguageConfig = field(default_factory=LanguageConfig)
    split: SplitSizes = field(default_factory=SplitSizes)
    tok: TokKnobs = field(default_factory=TokKnobs)
    ups: UpsamplerConfig = field(default_factory=UpsamplerConfig)
    model: ModelKnobs = field(default_factory=ModelKnobs)
    train: TrainConfig = field(default_factory=TrainConfig)

    # -- views -------------------------------------------------------------

    def model_config(self, n_units: int, n_chars: int) -> ModelConfig:
        return ModelConfig(
            n_units=n_units, n_chars=n_chars, feat_dim=self.lang.feat_dim, **dataclasses.asdict(self.model)
        )

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.data.train_seed)

    def tokenizer_settings(self) -> TokenizerSettings:
        return TokenizerSettings(upsampler=self.ups, **dataclasses.asdict(self.tok))

    # -- flat form ---------------------------------------------------------

    def items(self) -> list[tuple[str, object]]:
        out = []
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                if sec.name == "train" and f.name in _TRAIN_SKIP:
                    continue
                out.append((f"{sec.name}.{f.name}", getattr(obj, f.name)))
        return out

    def dumps(self, comments: bool = False) -> str:
        if comments:
            return "".join(f"{k} = {_format(v)}  # {KEY_DOCS[k]}\n" for k, v in self.items())
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def with_values(self, values: Mapping[str, str | object]) -> "RunConfig":
        """Return a copy with ``section.key`` entries replaced; strings are parsed to the field type."""
        sections = {sec.name: getattr(self, sec.name) for sec in fields(self)}
        changes: dict[str, dict] = {}
        for key, raw in values.items():
            sec, _, name = key.partition(".")
            if sec not in sections or not name:
                raise ConfigError(key, "unknown key")
            kinds = {f.name: f.type for f in fields(sections[sec])}
            if name not in kinds or (sec == "train" and name in _TRAIN_SKIP):
                raise ConfigError(key, "unknown key")
            changes.setdefault(sec, {})[name] = _coerce(key, raw, kinds[name])
        try:
            out = RunConfig(**{sec: replace(obj, **changes.get(sec, {})) for sec, obj in sections.items()})
            out.model_config(2, 2)  # model knobs are validated by ModelConfig
        except (ValueError, TypeError) as exc:
            raise ConfigError(",".join(values) or "config", str(exc)) from None
        return out


def _format(v) -> str:
    return str(v) if not isinstance(v, str) else repr(v)


def _coerce(key: str, raw, kind):
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {kind}") from None
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def parse_lines(lines: Iterable[str], source: str = "config") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment outside quotes."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        body = _strip_comment(line).strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {line.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"file not found: {p}")
        cfg = cfg.with_values(parse_lines(p.read_text(encoding="utf-8").splitlines(), str(p)))
    if overrides:
        cfg = cfg.with_values(overrides)
    return cfg
