"""Tokenizer and vocabulary behavior."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dietcap.errors import VocabError
from dietcap.vocab import BOS, EOS, PAD, UNK, Vocabulary, tokenize


def test_tokenize_lowercases_and_strips_punctuation():
    assert tokenize("The subject, eating!") == ["the", "subject", "eating"]


def test_tokenize_keeps_fractions_and_digits():
    assert tokenize("a 3/4 bowl") == ["a", "3/4", "bowl"]
    assert tokenize("2 bowls") == ["2", "bowls"]


def test_tokenize_splits_apostrophes():
    assert tokenize("there isn't much") == ["there", "isn", "t", "much"]


@given(st.text(max_size=80))
def test_tokenize_idempotent(text):
    toks = tokenize(text)
    assert tokenize(" ".join(toks)) == toks


def test_vocab_ids_are_stable_and_reserved():
    v = Vocabulary.from_corpus(["rice rice bowl", "bowl of soup"])
    # frequency order, lexical ties: rice(2), bowl(2) -> bowl first lexically
    assert v.tokens == ["bowl", "rice", "of", "soup"]
    assert v.encode("bowl rice") == [BOS, 4, 5, EOS]


def test_vocab_strict_encode_rejects_oov():
    v = Vocabulary.from_corpus(["rice"])
    with pytest.raises(VocabError) as e:
        v.encode("beans")
    assert "beans" in str(e.value)
    assert v.encode("beans", allow_unk=True) == [BOS, UNK, EOS]


def test_vocab_decode_drops_structural_ids():
    v = Vocabulary.from_corpus(["rice bowl"])
    ids = [BOS, 4, PAD, 5, EOS]
    assert v.decode(ids) == "bowl rice"


def test_vocab_decode_roundtrip():
    v = Vocabulary.from_corpus(["the subject is eating a 3/4 bowl of okra"])
    text = "a 3/4 bowl of okra"
    assert v.decode(v.encode(text)) == text


def test_vocab_rejects_reserved_and_duplicate_tokens():
    with pytest.raises(VocabError):
        Vocabulary(["rice", "rice"])
    with pytest.raises(VocabError):
        Vocabulary(["<bos>"])


def test_vocab_file_roundtrip(tmp_path):
    v = Vocabulary.from_corpus(["a bowl of rice", "a cup of tea"])
    p = tmp_path / "vocab.txt"
    v.save(p)
    w = Vocabulary.load(p)
    assert w.tokens == v.tokens
    assert len(w) == len(v)
    # id = 4 + line index, by construction
    lines = p.read_text().splitlines()
    assert w.encode(lines[2]) == [BOS, 6, EOS]


def test_vocab_decode_rejects_out_of_range_id():
    v = Vocabulary.from_corpus(["rice"])
    with pytest.raises(VocabError):
        v.decode(np.array([4, 99]))
