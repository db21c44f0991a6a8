"""Unit and character vocabularies, the lexicon, and text-side phonemization."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PHONEME = "phoneme"
HIDDEN = "hidden"


@dataclass(frozen=True)
class UnitVocab:
    """Dense unit ids ``[0, size)``.

    Phoneme vocabularies carry SIL and UNK ids; hidden-unit (cluster)
    vocabularies have no special ids.
    """

    kind: str
    size: int
    sil: int | None = None
    unk: int | None = None
    symbols: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (PHONEME, HIDDEN):
            raise ValueError(f"unknown vocab kind {self.kind!r}")
        if self.size < 2:
            raise ValueError("vocab size must be >= 2")
        if self.kind == PHONEME and (self.sil is None or self.unk is None):
            raise ValueError("phoneme vocab needs SIL and UNK ids")
        if self.kind == HIDDEN and self.sil is not None:
            raise ValueError("hidden vocab has no SIL")
        for special in (self.sil, self.unk):
            if special is not None and not 0 <= special < self.size:
                raise ValueError(f"special id {special} out of range")
        if self.sil is not None and self.sil == self.unk:
            raise ValueError("SIL and UNK must differ")
        if self.symbols and len(self.symbols) != self.size:
            raise ValueError("symbols must name every id")

    @classmethod
    def phonemes(cls, n_phonemes: int) -> "UnitVocab":
        """``n_phonemes`` regular phonemes followed by SIL and UNK."""
        symbols = tuple(f"p{i}" for i in range(n_phonemes)) + ("<SIL>", "<unk>")
        return cls(PHONEME, n_phonemes + 2, sil=n_phonemes, unk=n_phonemes + 1, symbols=symbols)

    @classmethod
    def hidden(cls, k: int) -> "UnitVocab":
        return cls(HIDDEN, k)

    def symbol(self, uid: int) -> str:
        return self.symbols[uid] if self.symbols else str(uid)

    def lookup(self, symbol: str) -> int:
        if self.symbols:
            return self.symbols.index(symbol)
        return int(symbol)


@dataclass(frozen=True)
class CharVocab:
    """Characters for CTC targets; id 0 is the blank and never appears in a transcript."""

    chars: tuple[str, ...]
    separator: str = " "

    blank: int = field(default=0, init=False)

    def __post_init__(self):
        if self.separator not in self.chars:
            raise ValueError("separator must be one of the characters")
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("duplicate characters")

    @property
    def size(self) -> int:
        """Output classes including the blank."""
        return len(self.chars) + 1

    @property
    def separator_id(self) -> int:
        return self.encode(self.separator)[0]

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.array([self.chars.index(c) + 1 for c in text], dtype=np.int64)
        except ValueError as err:
            raise ValueError(f"character not in vocabulary: {text!r}") from err

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if i == self.blank:
                raise ValueError("blank id inside a transcript")
            out.append(self.chars[int(i) - 1])
        return "".join(out)


@dataclass(frozen=True)
class UnitSequence:
    """Discrete units with an optional list of word-start positions.

    ``boundaries`` holds the index of the first unit of every word after the
    first; it is only meaningful straight out of :func:`words_to_phonemes`.
    """

    ids: np.ndarray
    kind: str
    boundaries: tuple[int, ...] = ()

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        if ids.ndim != 1 or ids.size < 1:
            raise ValueError("unit sequence must be 1-D and non-empty")
        if any(not 0 < b < ids.size for b in self.boundaries):
            raise ValueError("word boundary out of range")

    def __len__(self) -> int:
        return int(self.ids.size)

    def validate(self, vocab: UnitVocab) -> "UnitSequence":
        if vocab.kind != self.kind:
            raise ValueError(f"{self.kind} sequence checked against {vocab.kind} vocab")
        if self.ids.min() < 0 or self.ids.max() >= vocab.size:
            raise ValueError("unit id outside vocabulary")
        return self

    def __eq__(self, other):
        if not isinstance(other, UnitSequence):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.ids, other.ids)

    def __hash__(self):
        return hash((self.kind, self.ids.tobytes()))


class Lexicon(dict):
    """Word -> tuple of phoneme ids, validated against a phoneme vocab."""

    def __init__(self, entries: dict[str, Sequence[int]], vocab: UnitVocab):
        super().__init__()
        if vocab.kind != PHONEME:
            raise ValueError("lexicon needs a phoneme vocab")
        self.vocab = vocab
        for word, phones in entries.items():
            phones = tuple(int(p) for p in phones)
            if not word or not phones:
                raise ValueError(f"empty lexicon entry for {word!r}")
            if any(not 0 <= p < vocab.size for p in phones):
                raise ValueError(f"invalid phoneme id in entry {word!r}")
            self[word] = phones

    def dumps(self) -> str:
        return "".join(
            f"{w}\t{' '.join(self.vocab.symbol(p) for p in ph)}\n" for w, ph in self.items()
        )

    @classmethod
    def loads(cls, text: str, vocab: UnitVocab) -> "Lexicon":
        entries = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                word, phones = line.split("\t")
                entries[word] = [vocab.lookup(s) for s in phones.split()]
            except ValueError as err:
                raise ValueError(f"lexicon line {lineno}: {err}") from err
        return cls(entries, vocab)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, vocab: UnitVocab) -> "Lexicon":
        return cls.loads(Path(path).read_text(encoding="utf-8"), vocab)


def words_to_phonemes(words: Sequence[str], lexicon: Lexicon) -> UnitSequence:
    """Concatenate lexicon pronunciations; unknown words become a single UNK."""
    if not words:
        raise ValueError("empty word list")
    ids: list[int] = []
    starts: list[int] = []
    for word in words:
        if ids:
            starts.append(len(ids))
        ids.extend(lexicon.get(word, (lexicon.vocab.unk,)))
    return UnitSequence(np.array(ids), PHONEME, tuple(starts))


def insert_silence(
    phonemes: UnitSequence, sil_id: int, p_sil: float, rng: np.random.Generator
) -> UnitSequence:
    """Insert ``sil_id`` at each word boundary independently with probability ``p_sil``."""
    if not 0.0 <= p_sil <= 1.0:
        raise ValueError(f"p_sil={p_sil} outside [0, 1]")
    if phonemes.kind != PHONEME:
        raise ValueError("silence insertion needs a phoneme sequence")
    if not phonemes.boundaries:
        return phonemes
    # one draw per boundary, always, so the stream does not depend on p_sil
    draws = rng.random(len(phonemes.boundaries))
    chosen = [b for b, u in zip(phonemes.boundaries, draws) if u < p_sil]
    if not chosen:
        return phonemes
    ids = np.insert(phonemes.ids, chosen, sil_id)
    shift = np.searchsorted(np.array(chosen), np.array(phonemes.boundaries), side="right")
    new_bounds = tuple(int(b + s) for b, s in zip(phonemes.boundaries, shift))
    return UnitSequence(ids, PHONEME, new_bounds)


def strip_silence(seq: UnitSequence, sil_id: int) -> np.ndarray:
    return seq.ids[seq.ids != sil_id]


def collapse_repeats(ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size == 0:
        return ids
    keep = np.ones(ids.size, dtype=bool)
    keep[1:] = ids[1:] != ids[:-1]
    return ids[keep]
