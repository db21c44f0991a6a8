"""Turn corpus splits into unit-labelled training material for one tokenizer variant.

Variant ``P`` uses phoneme units: oracle frame alignments for speech, lexicon
lookup + SIL insertion + random upsampling for text.  Variant ``H`` uses
hidden units: k-means on speech frames, and the text-to-unit model for text.
Both tokenizers are fitted on the paired split only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, ToyLanguage, Utterance
from .tokenizers import (
    KMeansModel,
    T2UConfig,
    T2UPair,
    TextToUnitModel,
    UpsamplerConfig,
    kmeans_assign,
    kmeans_fit,
    t2u_train,
)
from .tokenizers.t2u import t2u_infer_batch
from .tokenizers.upsample import sample_durations
from .units import UnitVocab, insert_silence, words_to_phonemes

VARIANTS = ("P", "H")


@dataclass
class TokenizerSettings:
    kmeans_k: int = 32
    kmeans_iters: int = 50
    t2u_epochs: int = 30
    upsampler: UpsamplerConfig = field(default_factory=UpsamplerConfig)
    p_sil: float = 0.25


@dataclass
class Tokenizers:
    variant: str
    vocab: UnitVocab
    kmeans: KMeansModel | None = None
    t2u: TextToUnitModel | None = None


@dataclass
class SpeechItem:
    features: np.ndarray
    units: np.ndarray
    chars: np.ndarray
    transcript: str
    uid: int


@dataclass
class TextItem:
    units: np.ndarray
    chars: np.ndarray
    uid: int


@dataclass
class PreparedData:
    variant: str
    n_units: int
    pretrain_speech: list[SpeechItem]
    pretrain_text: list[TextItem]
    finetune: list[SpeechItem]
    dev: list[SpeechItem]
    test: list[SpeechItem]
    paired: list[SpeechItem]
    dropped_text: int = 0


def t2u_pairs(utts: list[Utterance], kmeans: KMeansModel) -> list[T2UPair]:
    return [
        T2UPair(u.phonemes.astype(np.int64), u.durations.astype(np.int64), kmeans_assign(kmeans, u.features).ids)
        for u in utts
    ]


def fit_tokenizers(
    lang: ToyLanguage, corpus: Corpus, variant: str, settings: TokenizerSettings, seed: int
) -> Tokenizers:
    if variant not in VARIANTS:
        raise ValueError(f"unknown tokenizer variant {variant!r}")
    if variant == "P":
        return Tokenizers("P", lang.phonemes)
    paired = corpus["paired"]
    frames = np.concatenate([u.features for u in paired])
    km = kmeans_fit(frames, settings.kmeans_k, settings.kmeans_iters, seed)
    t2u = t2u_train(
        t2u_pairs(paired, km), lang.phonemes.size, settings.kmeans_k, settings.t2u_epochs, seed, T2UConfig()
    )
    return Tokenizers("H", UnitVocab.hidden(settings.kmeans_k), km, t2u)


def speech_units(tok: Tokenizers, utt: Utterance) -> np.ndarray:
    if tok.variant == "P":
        return utt.frame_phonemes.astype(np.int64)
    return kmeans_assign(tok.kmeans, utt.features).ids.astype(np.int64)


def text_phonemes(lang: ToyLanguage, words, p_sil: float, rng: np.random.Generator) -> np.ndarray:
    seq = words_to_phonemes(list(words), lang.lexicon)
    return insert_silence(seq, lang.phonemes.sil, p_sil, rng).ids


def ctc_min_frames(chars: np.ndarray) -> int:
    """Fewest input frames that can emit ``chars`` under CTC (repeats need a blank between)."""
    repeats = int(np.sum(chars[1:] == chars[:-1])) if len(chars) > 1 else 0
    return len(chars) + repeats


def prepare_data(
    lang: ToyLanguage,
    corpus: Corpus,
    tok: Tokenizers,
    settings: TokenizerSettings,
    seed: int,
) -> PreparedData:
    """Tokenize every split.  Text items too short for CTC are dropped and counted."""

    def speech(split):
        return [
            SpeechItem(u.features, speech_units(tok, u), lang.chars.encode(u.transcript), u.transcript, u.uid)
            for u in corpus[split]
        ]

    texts = corpus["pretrain_text"]
    phon = [text_phonemes(lang, u.words, settings.p_sil, np.random.default_rng([seed, 7, u.uid])) for u in texts]
    if tok.variant == "P":
        units = []
        for u, ph in zip(texts, phon):
            rng = np.random.default_rng([seed, 8, u.uid])
            units.append(np.repeat(ph, sample_durations(ph, lang.phonemes.sil, settings.upsampler, rng)))
    else:
        units = t2u_infer_batch(tok.t2u, phon)
    items = []
    dropped = 0
    for u, z in zip(texts, units):
        chars = lang.chars.encode(u.transcript)
        if len(z) < ctc_min_frames(chars):
            dropped += 1
            continue
        items.append(TextItem(np.asarray(z, dtype=np.int64), chars, u.uid))
    return PreparedData(
        variant=tok.variant,
        n_units=tok.vocab.size,
        pretrain_speech=speech("pretrain_speech"),
        pretrain_text=items,
        finetune=speech("finetune"),
        dev=speech("dev"),
        test=speech("test"),
        paired=speech("paired"),
        dropped_text=dropped,
    )
