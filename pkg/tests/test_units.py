import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechlm.units import (
    HIDDEN,
    PHONEME,
    CharVocab,
    Lexicon,
    UnitSequence,
    UnitVocab,
    collapse_repeats,
    insert_silence,
    strip_silence,
    words_to_phonemes,
)

VOCAB = UnitVocab.phonemes(4)  # p0..p3, SIL=4, UNK=5
B, A = 0, 1
LEX = Lexicon({"ba": [B, A], "a": [A], "dab": [2, A, B]}, VOCAB)


class TestVocab:
    def test_phoneme_specials(self):
        assert (VOCAB.size, VOCAB.sil, VOCAB.unk) == (6, 4, 5)
        assert VOCAB.symbol(4) == "<SIL>"

    def test_hidden_has_no_specials(self):
        v = UnitVocab.hidden(8)
        assert v.kind == HIDDEN and v.sil is None and v.unk is None

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(kind=PHONEME, size=1, sil=0, unk=0),
            dict(kind=PHONEME, size=4, sil=2, unk=2),
            dict(kind=PHONEME, size=4, sil=5, unk=1),
            dict(kind=HIDDEN, size=4, sil=1),
            dict(kind="graphemes", size=4),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            UnitVocab(**kwargs)

    def test_char_vocab_blank_reserved(self):
        cv = CharVocab(("a", "b", " "))
        assert cv.size == 4
        ids = cv.encode("ab a")
        assert 0 not in ids
        assert cv.decode(ids) == "ab a"
        assert cv.separator_id == 3

    def test_char_vocab_rejects_blank_in_transcript(self):
        with pytest.raises(ValueError):
            CharVocab(("a", " ")).decode([1, 0])

    def test_char_vocab_unknown_char(self):
        with pytest.raises(ValueError):
            CharVocab(("a", " ")).encode("b")


class TestUnitSequence:
    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            UnitSequence(np.array([], dtype=int), PHONEME)

    def test_immutable(self):
        seq = UnitSequence([1, 2], PHONEME)
        with pytest.raises(ValueError):
            seq.ids[0] = 3

    def test_validate(self):
        UnitSequence([0, 5], PHONEME).validate(VOCAB)
        with pytest.raises(ValueError):
            UnitSequence([6], PHONEME).validate(VOCAB)
        with pytest.raises(ValueError):
            UnitSequence([0], HIDDEN).validate(VOCAB)

    def test_equality_ignores_boundaries(self):
        assert UnitSequence([1, 2], PHONEME, (1,)) == UnitSequence([1, 2], PHONEME)
        assert len({UnitSequence([1, 2], PHONEME), UnitSequence([1, 2], PHONEME)}) == 1


class TestWordsToPhonemes:
    def test_single_word(self):
        np.testing.assert_array_equal(words_to_phonemes(["ba"], LEX).ids, [B, A])

    def test_oov_is_single_unk(self):
        np.testing.assert_array_equal(words_to_phonemes(["zz"], LEX).ids, [VOCAB.unk])

    def test_concatenation_and_boundaries(self):
        seq = words_to_phonemes(["ba", "ba"], LEX)
        np.testing.assert_array_equal(seq.ids, [B, A, B, A])
        assert seq.boundaries == (2,)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            words_to_phonemes([], LEX)

    def test_lexicon_round_trip(self, tmp_path):
        path = tmp_path / "lex.txt"
        LEX.save(path)
        assert path.read_text().splitlines()[0] == "ba\tp0 p1"
        assert Lexicon.load(path, VOCAB) == LEX

    def test_lexicon_rejects_bad_id(self):
        with pytest.raises(ValueError):
            Lexicon({"x": [9]}, VOCAB)
        with pytest.raises(ValueError):
            Lexicon({"x": []}, VOCAB)

    def test_lexicon_bad_line(self):
        with pytest.raises(ValueError, match="line 1"):
            Lexicon.loads("ba p0 p1\n", VOCAB)


class TestInsertSilence:
    def test_p0_identity(self):
        seq = words_to_phonemes(["ba", "a", "dab"], LEX)
        assert insert_silence(seq, VOCAB.sil, 0.0, np.random.default_rng(0)) == seq

    def test_p1_fills_every_boundary(self):
        seq = words_to_phonemes(["ba", "a", "dab"], LEX)
        out = insert_silence(seq, VOCAB.sil, 1.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out.ids, [B, A, 4, A, 4, 2, A, B])

    def test_rejects_bad_probability(self):
        seq = words_to_phonemes(["ba", "a"], LEX)
        with pytest.raises(ValueError):
            insert_silence(seq, VOCAB.sil, 1.5, np.random.default_rng(0))

    def test_frequency(self):
        # one boundary per 2-word item; the vectorized draw mirrors the per-item stream
        seq = words_to_phonemes(["ba", "a"], LEX)
        rng = np.random.default_rng(123)
        hits = sum(len(insert_silence(seq, VOCAB.sil, 0.25, rng)) == 4 for _ in range(100_000))
        assert abs(hits / 100_000 - 0.25) < 0.01

    def test_deterministic(self):
        seq = words_to_phonemes(["ba", "a", "dab", "a"], LEX)
        a = insert_silence(seq, VOCAB.sil, 0.5, np.random.default_rng(7))
        b = insert_silence(seq, VOCAB.sil, 0.5, np.random.default_rng(7))
        assert a == b and a.boundaries == b.boundaries

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.sampled_from(["ba", "a", "dab", "oov"]), min_size=1, max_size=8),
        st.floats(0, 1),
        st.integers(0, 2**32 - 1),
    )
    def test_strip_recovers_input(self, words, p, seed):
        seq = words_to_phonemes(words, LEX)
        out = insert_silence(seq, VOCAB.sil, p, np.random.default_rng(seed))
        np.testing.assert_array_equal(strip_silence(out, VOCAB.sil), seq.ids)
        # boundaries still point at word starts
        for b, b0 in zip(out.boundaries, seq.boundaries):
            assert out.ids[b] == seq.ids[b0]


def test_collapse_repeats():
    np.testing.assert_array_equal(collapse_repeats([1, 1, 2, 2, 2, 1]), [1, 2, 1])
    assert collapse_repeats([]).size == 0
