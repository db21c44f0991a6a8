"""Synthetic speech/text corpus with oracle frame alignments.

A toy language has a small phoneme inventory, each phoneme owning a
prototype feature vector.  Speech is rendered frame by frame as the
prototype plus Gaussian noise, so the frame-level phoneme labels are known
exactly and stand in for a forced aligner.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .units import (
    CharVocab,
    Lexicon,
    UnitSequence,
    UnitVocab,
    insert_silence,
    words_to_phonemes,
)

SPLITS = ("paired", "pretrain_speech", "pretrain_text", "finetune", "dev", "test")
TEXT_ONLY = frozenset({"pretrain_text"})


@dataclass(frozen=True)
class LanguageConfig:
    n_phonemes: int = 12
    n_words: int = 40
    min_word_len: int = 1
    max_word_len: int = 4
    n_letters: int = 10
    separator: str = " "
    feat_dim: int = 16
    noise: float = 0.3
    dur_mean: float = 5.0
    dur_std: float = 2.0
    dur_min: int = 1
    p_sil: float = 0.25
    zipf: float = 1.0
    min_words: int = 2
    max_words: int = 5


@dataclass(frozen=True)
class ToyLanguage:
    config: LanguageConfig
    seed: int
    phonemes: UnitVocab
    chars: CharVocab
    lexicon: Lexicon
    words: tuple[str, ...]
    word_probs: np.ndarray
    # one row per phoneme id that can be spoken (regular phonemes + SIL)
    prototypes: np.ndarray

    def spell(self, words: Sequence[str]) -> str:
        return self.config.separator.join(words)


@dataclass
class Utterance:
    """One sentence; text-only records have ``features is None``."""

    uid: int
    words: tuple[str, ...]
    transcript: str
    features: np.ndarray | None = None
    frame_phonemes: np.ndarray | None = None
    # phoneme segments (including inserted SIL) and their frame counts
    phonemes: np.ndarray | None = None
    durations: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return 0 if self.features is None else int(self.features.shape[0])

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        if (self.uid, self.words, self.transcript) != (other.uid, other.words, other.transcript):
            return False
        for a, b in (
            (self.features, other.features),
            (self.frame_phonemes, other.frame_phonemes),
            (self.phonemes, other.phonemes),
            (self.durations, other.durations),
        ):
            if (a is None) != (b is None):
                return False
            if a is not None and (a.dtype != b.dtype or not np.array_equal(a, b)):
                return False
        return True


@dataclass(frozen=True)
class SplitSizes:
    paired: int = 200
    pretrain_speech: int = 2000
    pretrain_text: int = 8000
    finetune: int = 300
    dev: int = 200
    test: int = 200

    def as_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in SPLITS}


@dataclass
class Corpus:
    """Named splits plus the seed they were drawn from."""

    seed: int
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    def __getitem__(self, name: str) -> list[Utterance]:
        return self.splits[name]


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


def generate_language(seed: int, config: LanguageConfig = LanguageConfig()) -> ToyLanguage:
    """Deterministically build a toy language from ``seed``."""
    rng = _rng(seed, 0)
    cfg = config
    min_dist = 4.0 * cfg.noise
    n_spoken = cfg.n_phonemes + 1  # regular phonemes + SIL
    for _ in range(1000):
        protos = rng.normal(0.0, 1.0, size=(n_spoken, cfg.feat_dim))
        diff = protos[:, None, :] - protos[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        dist[np.diag_indices(n_spoken)] = np.inf
        if dist.min() > min_dist:
            break
    else:
        raise ValueError(f"prototype separation > {min_dist} unreachable; noise too large")

    phonemes = UnitVocab.phonemes(cfg.n_phonemes)
    letters = "abcdefghijklmnopqrstuvwxyz"[: cfg.n_letters]
    chars = CharVocab(tuple(letters) + (cfg.separator,), cfg.separator)

    entries: dict[str, tuple[int, ...]] = {}
    seen_pron: set[tuple[int, ...]] = set()
    attempts = 0
    while len(entries) < cfg.n_words:
        attempts += 1
        if attempts > 100_000:
            raise ValueError("cannot draw enough distinct words")
        n = int(rng.integers(cfg.min_word_len, cfg.max_word_len + 1))
        pron = tuple(int(p) for p in rng.integers(0, cfg.n_phonemes, size=n))
        spelling = "".join(letters[i] for i in rng.integers(0, cfg.n_letters, size=n))
        if pron in seen_pron or spelling in entries:
            continue
        seen_pron.add(pron)
        entries[spelling] = pron
    lexicon = Lexicon(entries, phonemes)
    words = tuple(entries)
    ranks = rng.permutation(len(words)) + 1
    probs = 1.0 / ranks.astype(np.float64) ** cfg.zipf
    probs /= probs.sum()
    return ToyLanguage(cfg, seed, phonemes, chars, lexicon, words, probs, protos)


def sample_words(lang: ToyLanguage, n_words: int, rng: np.random.Generator) -> tuple[str, ...]:
    idx = rng.choice(len(lang.words), size=n_words, p=lang.word_probs)
    return tuple(lang.words[i] for i in idx)


def synth_utterance(
    lang: ToyLanguage,
    n_words: int,
    rng: np.random.Generator,
    uid: int = 0,
    noise: float | None = None,
    dur_std: float | None = None,
) -> Utterance:
    """Render one spoken sentence with its oracle alignment."""
    if n_words < 1:
        raise ValueError("n_words must be >= 1")
    cfg = lang.config
    noise = cfg.noise if noise is None else noise
    dur_std = cfg.dur_std if dur_std is None else dur_std
    words = sample_words(lang, n_words, rng)
    seq = insert_silence(words_to_phonemes(words, lang.lexicon), lang.phonemes.sil, cfg.p_sil, rng)
    segs = seq.ids
    durs = np.maximum(np.rint(rng.normal(cfg.dur_mean, dur_std, size=segs.size)), cfg.dur_min)
    durs = durs.astype(np.int64)
    frame_ph = np.repeat(segs, durs)
    feats = lang.prototypes[frame_ph] + rng.normal(0.0, 1.0, size=(frame_ph.size, cfg.feat_dim)) * noise
    return Utterance(
        uid=uid,
        words=words,
        transcript=lang.spell(words),
        features=feats.astype(np.float32),
        frame_phonemes=frame_ph.astype(np.int16),
        phonemes=segs.astype(np.int16),
        durations=durs.astype(np.int16),
    )


def synth_text(lang: ToyLanguage, n_words: int, rng: np.random.Generator, uid: int = 0) -> Utterance:
    words = sample_words(lang, n_words, rng)
    return Utterance(uid=uid, words=words, transcript=lang.spell(words))


def generate_corpora(lang: ToyLanguage, sizes: SplitSizes | None = None, seed: int = 0) -> Corpus:
    """Draw every split; each utterance gets its own stream from ``(seed, split, index)``."""
    sizes = sizes or SplitSizes()
    counts = sizes.as_dict()
    if any(n < 0 for n in counts.values()):
        raise ValueError("split sizes must be non-negative")
    cfg = lang.config
    corpus = Corpus(seed)
    uid = 0
    for split_idx, name in enumerate(SPLITS):
        items = []
        for i in range(counts[name]):
            rng = _rng(seed, split_idx + 1, i)
            n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1))
            if name in TEXT_ONLY:
                items.append(synth_text(lang, n_words, rng, uid))
            else:
                items.append(synth_utterance(lang, n_words, rng, uid))
            uid += 1
        corpus.splits[name] = items
    return corpus


def batch_pad(items: Sequence[np.ndarray], pad_value=0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad along the first axis; returns ``(batch, lengths)``."""
    if not items:
        raise ValueError("empty batch")
    lengths = np.array([len(x) for x in items], dtype=np.int64)
    first = np.asarray(items[0])
    out = np.full((len(items), int(lengths.max())) + first.shape[1:], pad_value, dtype=first.dtype)
    for b, x in enumerate(items):
        out[b, : len(x)] = x
    return out, lengths


def length_mask(lengths: np.ndarray, width: int | None = None) -> np.ndarray:
    width = int(lengths.max()) if width is None else width
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


# -- binary I/O ------------------------------------------------------------

MAGIC = b"SPLM-CP1"


class CorpusFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorpusFormatError(f"truncated input (needed {n} bytes)", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals[0] if len(vals) == 1 else vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def text(self) -> str:
        n = self.unpack("H")
        return self.take(n).decode("utf-8")


def _put_text(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def corpus_to_bytes(corpus: Corpus, chars: CharVocab) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<q", corpus.seed))
    _put_text(buf, "".join(chars.chars))
    _put_text(buf, chars.separator)
    buf.write(struct.pack("<I", len(corpus.splits)))
    for name, items in corpus.splits.items():
        _put_text(buf, name)
        buf.write(struct.pack("<I", len(items)))
        for u in items:
            has_speech = u.features is not None
            buf.write(struct.pack("<IB", u.uid, int(has_speech)))
            tid = chars.encode(u.transcript).astype("<u1")
            buf.write(struct.pack("<I", tid.size))
            buf.write(tid.tobytes())
            if has_speech:
                m, d = u.features.shape
                buf.write(struct.pack("<II", m, d))
                buf.write(u.features.astype("<f4").tobytes())
                buf.write(u.frame_phonemes.astype("<i2").tobytes())
                buf.write(struct.pack("<I", u.phonemes.size))
                buf.write(u.phonemes.astype("<i2").tobytes())
                buf.write(u.durations.astype("<i2").tobytes())
    return buf.getvalue()


def corpus_from_bytes(data: bytes) -> tuple[Corpus, CharVocab]:
    r = _Reader(data)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise CorpusFormatError(f"bad magic {magic!r}", 0)
    seed = r.unpack("q")
    alphabet = r.text()
    sep = r.text()
    chars = CharVocab(tuple(alphabet), sep)
    corpus = Corpus(seed)
    for _ in range(r.unpack("I")):
        name = r.text()
        items = []
        for _ in range(r.unpack("I")):
            uid, has_speech = r.unpack("IB")
            n_chars = r.unpack("I")
            transcript = chars.decode(r.array("<u1", n_chars).astype(np.int64))
            u = Utterance(uid=uid, words=tuple(transcript.split(sep)), transcript=transcript)
            if has_speech:
                m, d = r.unpack("II")
                u.features = r.array("<f4", m * d).reshape(m, d).astype(np.float32)
                u.frame_phonemes = r.array("<i2", m).astype(np.int16)
                n_seg = r.unpack("I")
                u.phonemes = r.array("<i2", n_seg).astype(np.int16)
                u.durations = r.array("<i2", n_seg).astype(np.int16)
            items.append(u)
        corpus.splits[name] = items
    if r.pos != len(data):
        raise CorpusFormatError("trailing bytes", r.pos)
    return corpus, chars


def write_corpus(corpus: Corpus, chars: CharVocab, path: str | Path) -> None:
    path = Path(path)
    path.write_bytes(corpus_to_bytes(corpus, chars))
    manifest = "".join(f"{name}\t{len(items)}\t{corpus.seed}\n" for name, items in corpus.splits.items())
    path.with_suffix(path.suffix + ".manifest").write_text(manifest, encoding="utf-8")


def read_corpus(path: str | Path) -> tuple[Corpus, CharVocab]:
    return corpus_from_bytes(Path(path).read_bytes())
