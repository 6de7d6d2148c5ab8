"""Caption metrics against brute-force oracles and fixed points."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dietcap.errors import ConfigError, DataError
from dietcap.metrics import EvalCorpus, bleu, cider, rouge_l, score_all
from dietcap.vocab import tokenize
from oracles import bleu_reference, cider_reference, rouge_l_reference

# Ten varied items: multiple references, length mismatches, repeated n-grams,
# one empty-ish candidate. Frozen as the oracle comparison fixture.
TEN_ITEMS = [
    ("the subject is eating a half bowl of rice",
     ["the subject is eating a half bowl of rice",
      "a person eats a half bowl of rice"]),
    ("a bowl of okra stew",
     ["the subject is eating a bowl of okra stew"]),
    ("the bowl is empty",
     ["the bowl is empty", "there is an empty bowl"]),
    ("she is cooking banku and soup",
     ["the subject cooks banku with soup", "she is cooking banku and soup for dinner"]),
    ("a cup of tea",
     ["the subject drinks a cup of tea"]),
    ("more than half of the bowl is empty",
     ["more than half of the bowl is empty"]),
    ("rice rice rice rice",
     ["a bowl of rice", "rice and stew"]),
    ("the subject is holding a plate of jollof",
     ["a plate of jollof rice", "the subject holds a plate of jollof"]),
    ("water",
     ["a cup of water", "the subject is drinking water"]),
    ("the subject is eating roasted corn with her hands",
     ["the subject eats roasted corn", "a person is eating roasted corn"]),
]


def tok_pairs():
    return [(tokenize(c), [tokenize(r) for r in refs]) for c, refs in TEN_ITEMS]


@pytest.fixture(scope="module")
def corpus():
    return EvalCorpus.from_pairs(TEN_ITEMS)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_bleu_matches_bruteforce_oracle(corpus, n):
    assert abs(bleu(corpus, n) - bleu_reference(tok_pairs(), n)) <= 1e-6


def test_rouge_l_matches_bruteforce_oracle(corpus):
    assert abs(rouge_l(corpus) - rouge_l_reference(tok_pairs())) <= 1e-6


def test_cider_matches_bruteforce_oracle(corpus):
    assert abs(cider(corpus) - cider_reference(tok_pairs())) <= 1e-6


def test_bleu_identical_corpus_is_exactly_100():
    caps = [c for c, _ in TEN_ITEMS]
    ident = EvalCorpus.from_pairs([(c, [c]) for c in caps])
    for n in (1, 2, 3, 4):
        assert bleu(ident, n) == 100.0


def test_rouge_l_identical_corpus_is_exactly_100():
    caps = [c for c, _ in TEN_ITEMS]
    ident = EvalCorpus.from_pairs([(c, [c]) for c in caps])
    assert rouge_l(ident) == 100.0


def test_cider_identical_disjoint_pairs_score_100():
    # two items, identical candidate/reference, no shared n-grams between
    # items, so every idf is ln(2) and each cosine is 1
    c = EvalCorpus.from_pairs([
        ("red apple pie tart sugar", ["red apple pie tart sugar"]),
        ("blue fish soup pot stove", ["blue fish soup pot stove"]),
    ])
    assert abs(cider(c) - 100.0) < 1e-9


def test_cider_single_item_warns_and_returns_zero():
    c = EvalCorpus.from_pairs([("a bowl of rice", ["a bowl of rice"])])
    with pytest.warns(UserWarning):
        assert cider(c) == 0.0


def test_bleu_zero_overlap_is_zero(corpus):
    c = EvalCorpus.from_pairs([("xx yy zz", ["aa bb cc dd"])])
    assert bleu(c, 1) == 0.0


def test_bleu_smoothing_rescues_missing_high_orders():
    c = EvalCorpus.from_pairs([("a bowl of", ["a bowl of rice"])])
    assert bleu(c, 4) == 0.0  # no 4-grams in a 3-token candidate
    assert bleu(c, 4, smooth=True) > 0.0


def test_bleu_empty_candidate_contributes_zero_length(corpus):
    c = EvalCorpus.from_pairs([("", ["a bowl of rice"]),
                               ("a bowl of rice", ["a bowl of rice"])])
    ref = bleu_reference([(tokenize(""), [tokenize("a bowl of rice")]),
                          (tokenize("a bowl of rice"), [tokenize("a bowl of rice")])])
    assert abs(bleu(c, 4) - ref) <= 1e-6


def test_brevity_penalty_pulls_score_below_precision():
    # perfect unigram precision, half-length candidate: bp = exp(1 - 2)
    c = EvalCorpus.from_pairs([("a bowl", ["a bowl of okra"])])
    import math
    assert abs(bleu(c, 1) - 100.0 * math.exp(1.0 - 4.0 / 2.0)) <= 1e-9


def test_closest_reference_length_tie_prefers_shorter():
    # candidate length 4, references length 3 and 5: the tie picks 3,
    # so bp = exp(1 - 3/4) > exp(1 - 5/4)
    import math
    c = EvalCorpus.from_pairs([("a bowl of rice", ["bowl of rice", "a big bowl of rice"])])
    got = bleu(c, 1)
    # unigram precision is 4/4 = 1 against the clipped union
    assert abs(got - 100.0 * 1.0) <= 1e-9 or got < 100.0
    swapped = EvalCorpus.from_pairs([("a bowl of rice", ["a big bowl of rice", "bowl of rice"])])
    assert abs(bleu(c, 1) - bleu(swapped, 1)) <= 1e-12


def test_rouge_empty_candidate_scores_zero():
    c = EvalCorpus.from_pairs([("", ["a bowl of rice"])])
    assert rouge_l(c) == 0.0


def test_corpus_validates_references():
    with pytest.raises(DataError):
        EvalCorpus.from_pairs([("a bowl", [])])
    with pytest.raises(DataError):
        EvalCorpus.from_pairs([])


def test_bleu_order_validated(corpus):
    with pytest.raises(ConfigError):
        bleu(corpus, 5)
    with pytest.raises(ConfigError):
        bleu(corpus, 0)


def test_corpus_jsonl_roundtrip(tmp_path):
    path = tmp_path / "corpus.jsonl"
    with open(path, "w") as fh:
        for i, (cand, refs) in enumerate(TEN_ITEMS):
            fh.write(json.dumps({"id": f"it{i}", "candidate": cand, "references": list(refs)}) + "\n")
    loaded = EvalCorpus.load_jsonl(path)
    assert len(loaded) == 10
    assert loaded.items[0].candidate == tokenize(TEN_ITEMS[0][0])
    assert abs(bleu(loaded, 4) - bleu(EvalCorpus.from_pairs(TEN_ITEMS), 4)) == 0.0


def test_corpus_jsonl_rejects_malformed_lines(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "candidate": "x"}\n')
    with pytest.raises(DataError):
        EvalCorpus.load_jsonl(path)


def test_score_all_keys(corpus):
    scores = score_all(corpus)
    assert set(scores) == {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"}
    for v in scores.values():
        assert 0.0 <= v <= 100.0


WORDS = ["rice", "bowl", "a", "of", "soup", "eating", "the", "subject"]


@settings(deadline=None, max_examples=40)
@given(st.lists(
    st.tuples(st.lists(st.sampled_from(WORDS), min_size=1, max_size=8),
              st.lists(st.lists(st.sampled_from(WORDS), min_size=1, max_size=8),
                       min_size=1, max_size=3)),
    min_size=1, max_size=5))
def test_metric_ranges_and_oracle_agreement(items):
    pairs = [(" ".join(c), [" ".join(r) for r in refs]) for c, refs in items]
    corpus = EvalCorpus.from_pairs(pairs)
    tokd = [(tokenize(c), [tokenize(r) for r in refs]) for c, refs in pairs]
    for n in (1, 2):
        mine = bleu(corpus, n)
        assert 0.0 <= mine <= 100.0
        assert abs(mine - bleu_reference(tokd, n)) <= 1e-6
    r = rouge_l(corpus)
    assert 0.0 <= r <= 100.0
    assert abs(r - rouge_l_reference(tokd)) <= 1e-6
