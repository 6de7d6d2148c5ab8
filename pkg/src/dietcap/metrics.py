"""Corpus-level caption metrics: BLEU-n, ROUGE-L, and CIDEr.

All three work on the shared tokenizer and score 0..100. They are written
directly from the standard definitions:

* BLEU: clipped modified n-gram precision pooled over the corpus, geometric
  mean over orders 1..n, brevity penalty from closest-reference lengths.
  No smoothing by default; any zero precision zeroes the score.
* ROUGE-L: longest-common-subsequence F-measure (beta = 1.2), best reference
  per item, mean over items.
* CIDEr (plain variant, not the -D one): per-order tf-idf cosine between
  candidate and each reference with idf = ln(N / max(1, df)) over reference
  sets, averaged over orders 1..4 and references, scaled so a corpus of
  identical pairs with fully distinct reference sets scores 100.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, DataError
from .vocab import tokenize


@dataclass(frozen=True)
class CorpusItem:
    item_id: str
    candidate: list[str]
    references: list[list[str]]


class EvalCorpus:
    """Tokenized candidate/reference pairs keyed by item id."""

    def __init__(self, items: Sequence[CorpusItem]) -> None:
        if not items:
            raise DataError("empty evaluation corpus")
        for it in items:
            if not it.references:
                raise DataError(f"item {it.item_id!r} has no references")
        self.items = list(items)

    def __len__(self) -> int:
        return len(self.items)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, Sequence[str]]]) -> "EvalCorpus":
        items = [
            CorpusItem(str(i), tokenize(cand), [tokenize(r) for r in refs])
            for i, (cand, refs) in enumerate(pairs)
        ]
        return cls(items)

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "EvalCorpus":
        """One JSON object per line: {"id", "candidate", "references": [...]}."""
        items = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    raw = json.loads(line)
                    items.append(CorpusItem(
                        str(raw["id"]), tokenize(raw["candidate"]),
                        [tokenize(r) for r in raw["references"]],
                    ))
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise DataError(f"{path}:{lineno}: bad corpus line ({e})") from e
        return cls(items)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(corpus: EvalCorpus, max_n: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU over orders 1..max_n, scaled 0..100."""
    if not 1 <= max_n <= 4:
        raise ConfigError(f"bleu order must be 1..4, got {max_n}")
    clipped = [0] * (max_n + 1)
    total = [0] * (max_n + 1)
    cand_len = 0
    ref_len = 0
    for it in corpus.items:
        cand_len += len(it.candidate)
        # closest reference length; ties go to the shorter reference
        ref_len += min((abs(len(r) - len(it.candidate)), len(r)) for r in it.references)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(it.candidate, n)
            if not counts:
                continue
            best = Counter()
            for r in it.references:
                for g, k in _ngrams(r, n).items():
                    if k > best[g]:
                        best[g] = k
            clipped[n] += sum(min(k, best[g]) for g, k in counts.items())
            total[n] += sum(counts.values())
    log_sum = 0.0
    for n in range(1, max_n + 1):
        num, den = clipped[n], total[n]
        if smooth and num == 0:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_sum += math.log(num / den)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(1, cand_len))
    return 100.0 * bp * math.exp(log_sum / max_n)


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    # single-row DP; captions are short so this is plenty
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(corpus: EvalCorpus, beta: float = 1.2) -> float:
    """Mean best-reference LCS F-measure, scaled 0..100."""
    scores = []
    for it in corpus.items:
        best = 0.0
        for r in it.references:
            l = _lcs_len(it.candidate, r)
            if l == 0:
                continue
            prec = l / len(it.candidate)
            rec = l / len(r)
            f = (1 + beta * beta) * prec * rec / (rec + beta * beta * prec)
            if f > best:
                best = f
        scores.append(best)
    return 100.0 * sum(scores) / len(scores)


def cider(corpus: EvalCorpus, max_n: int = 4) -> float:
    """tf-idf n-gram cosine consensus score, scaled 0..100.

    idf comes from reference sets only; a gram in every item's references has
    idf 0. With a single-item corpus every idf is 0 and the score collapses
    to 0: legal input, but meaningless, hence the warning.
    """
    n_items = len(corpus)
    if n_items < 2:
        warnings.warn("cider scoring over fewer than 2 items is always 0", stacklevel=2)
    df: list[Counter] = [Counter() for _ in range(max_n + 1)]
    for it in corpus.items:
        for n in range(1, max_n + 1):
            seen: set[tuple] = set()
            for r in it.references:
                seen.update(_ngrams(r, n))
            for g in seen:
                df[n][g] += 1

    log_n = math.log(n_items) if n_items else 0.0

    def tfidf(tokens: Sequence[str], n: int) -> dict[tuple, float]:
        return {
            g: k * (log_n - math.log(max(1.0, df[n][g])))
            for g, k in _ngrams(tokens, n).items()
        }

    def cosine(u: dict, v: dict) -> float:
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        return sum(u[g] * v[g] for g in u.keys() & v.keys()) / (nu * nv)

    item_scores = []
    for it in corpus.items:
        per_order = []
        for n in range(1, max_n + 1):
            cu = tfidf(it.candidate, n)
            sims = [cosine(cu, tfidf(r, n)) for r in it.references]
            per_order.append(sum(sims) / len(sims))
        item_scores.append(10.0 * sum(per_order) / max_n)
    return 10.0 * sum(item_scores) / len(item_scores)


def score_all(corpus: EvalCorpus) -> dict[str, float]:
    """Every metric the evaluation report carries, one call."""
    out = {f"bleu{n}": bleu(corpus, n) for n in range(1, 5)}
    out["rouge_l"] = rouge_l(corpus)
    out["cider"] = cider(corpus)
    return out
