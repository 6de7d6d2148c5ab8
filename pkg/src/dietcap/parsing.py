"""Controlled-vocabulary caption parsing and term-level accuracy.

Captions are matched against three fixed term lists (portion phrases, food
names, action verbs). Matching is longest-phrase-first with token
consumption, scanned independently per category, so "a half bowl of okra
stew" yields the portion "a half bowl" and both foods "okra" and "stew".
Portion phrases additionally admit a numeric template: an optional article,
one a/b fraction token, an optional container noun ("a 3/4 bowl", "3/4").

Portion phrases map to rational fill fractions where a value is defensible
(empty = 0, full = a bowl = 1, ...); hedged phrases like "not much" stay
unquantified and are simply skipped by downstream volume math.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, DataError, LexiconError, UndefinedRateError
from .vocab import tokenize

CATEGORIES = ("portion", "food", "action")

# Nouns the numeric portion template accepts after the fraction token.
CONTAINER_NOUNS = frozenset(
    ["bowl", "bowls", "plate", "plates", "cup", "cups", "pot", "pots"]
)

_FRACTION_TOKEN = re.compile(r"^(\d+)/(\d+)$")


@dataclass(frozen=True)
class Lexicon:
    """The three term lists plus the portion -> fraction table."""

    portion_phrases: tuple[tuple[str, ...], ...]
    portion_fractions: dict[tuple[str, ...], Fraction | None]
    food_phrases: tuple[tuple[str, ...], ...]
    action_forms: dict[str, str]  # surface form -> lemma, includes lemma itself
    action_lemmas: tuple[str, ...]
    _portion_index: dict[str, list[tuple[str, ...]]] = field(repr=False, default_factory=dict)
    _food_index: dict[str, list[tuple[str, ...]]] = field(repr=False, default_factory=dict)

    def __post_init__(self) -> None:
        seen: set[tuple[str, ...]] = set()
        for group, name in ((self.portion_phrases, "portion"), (self.food_phrases, "food")):
            for ph in group:
                if not ph or any(not t for t in ph):
                    raise LexiconError(f"empty {name} phrase {ph!r}")
                if ph in seen:
                    raise LexiconError(f"duplicate phrase {' '.join(ph)!r} across categories")
                seen.add(ph)
        for ph in self.portion_phrases:
            if ph not in self.portion_fractions:
                raise LexiconError(f"portion phrase {' '.join(ph)!r} has no fraction entry")
            frac = self.portion_fractions[ph]
            if frac is not None and frac < 0:
                raise LexiconError(f"negative fraction for {' '.join(ph)!r}")
        for form, lemma in self.action_forms.items():
            if lemma not in self.action_lemmas:
                raise LexiconError(f"action form {form!r} maps to unknown lemma {lemma!r}")
        object.__setattr__(self, "_portion_index", _index_by_first(self.portion_phrases))
        object.__setattr__(self, "_food_index", _index_by_first(self.food_phrases))

    @classmethod
    def from_dict(cls, raw: dict) -> "Lexicon":
        portions = []
        fractions: dict[tuple[str, ...], Fraction | None] = {}
        for entry in raw["portions"]:
            ph = tuple(tokenize(entry["phrase"]))
            portions.append(ph)
            f = entry["fraction"]
            fractions[ph] = None if f is None else Fraction(f)
        foods = tuple(tuple(tokenize(f)) for f in raw["foods"])
        forms: dict[str, str] = {}
        lemmas = tuple(sorted(raw["actions"]))
        for lemma, inflections in raw["actions"].items():
            for form in [lemma, *inflections]:
                if form in forms and forms[form] != lemma:
                    raise LexiconError(f"action form {form!r} is ambiguous")
                forms[form] = lemma
        return cls(tuple(portions), fractions, foods, forms, lemmas)

    @classmethod
    def load(cls, path: str | Path) -> "Lexicon":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _index_by_first(phrases: Iterable[tuple[str, ...]]) -> dict[str, list[tuple[str, ...]]]:
    index: dict[str, list[tuple[str, ...]]] = {}
    for ph in phrases:
        index.setdefault(ph[0], []).append(ph)
    for lst in index.values():
        lst.sort(key=len, reverse=True)
    return index


def default_lexicon_path() -> Path:
    """$DIETCAP_DATA_DIR/lexicon.json if set, else the repo data/ copy."""
    env = os.environ.get("DIETCAP_DATA_DIR")
    if env:
        return Path(env) / "lexicon.json"
    return Path(__file__).resolve().parents[2] / "data" / "lexicon.json"


def load_default_lexicon() -> Lexicon:
    path = default_lexicon_path()
    if not path.exists():
        raise DataError(f"no lexicon at {path}; set DIETCAP_DATA_DIR")
    return Lexicon.load(path)


@dataclass
class ParsedCaption:
    """Terms extracted from one caption.

    portions keeps mention order and duplicates (the volume pipeline aligns
    mentions with containers positionally); foods and actions are sets.
    portion_values aligns with portions; None marks an unquantified phrase.
    """

    tokens: list[str]
    portions: list[str]
    portion_values: list[Fraction | None]
    foods: set[str]
    actions: set[str]

    @property
    def fractions(self) -> list[Fraction]:
        return [v for v in self.portion_values if v is not None]

    def terms(self, category: str) -> set[str]:
        if category == "portion":
            return set(self.portions)
        if category == "food":
            return self.foods
        if category == "action":
            return self.actions
        raise ConfigError(f"unknown category {category!r}; expected one of {CATEGORIES}")


def _match_numeric_portion(tokens: Sequence[str], i: int) -> tuple[int, str, Fraction] | None:
    j = i
    if j < len(tokens) and tokens[j] in ("a", "an"):
        j += 1
    if j >= len(tokens):
        return None
    m = _FRACTION_TOKEN.match(tokens[j])
    if not m:
        return None
    num, den = int(m.group(1)), int(m.group(2))
    if den == 0:
        return None
    j += 1
    if j < len(tokens) and tokens[j] in CONTAINER_NOUNS:
        j += 1
    return j - i, " ".join(tokens[i:j]), Fraction(num, den)


def _scan(tokens: Sequence[str], index: dict[str, list[tuple[str, ...]]],
          numeric: bool = False) -> list[tuple[str, Fraction | None, tuple[str, ...] | None]]:
    """Longest-match scan with consumption; returns (text, value, phrase)."""
    out = []
    i = 0
    n = len(tokens)
    while i < n:
        best_len = 0
        best: tuple[str, Fraction | None, tuple[str, ...] | None] | None = None
        for ph in index.get(tokens[i], ()):
            L = len(ph)
            if L <= best_len:
                break  # index lists are sorted longest first
            if tuple(tokens[i:i + L]) == ph:
                best_len, best = L, (" ".join(ph), None, ph)
                break
        if numeric:
            hit = _match_numeric_portion(tokens, i)
            if hit is not None and hit[0] > best_len:
                best_len, best = hit[0], (hit[1], hit[2], None)
        if best is not None:
            out.append(best)
            i += best_len
        else:
            i += 1
    return out


def parse(caption: str, lexicon: Lexicon) -> ParsedCaption:
    """Extract portion/food/action terms; the three scans are independent."""
    tokens = tokenize(caption)

    portions: list[str] = []
    values: list[Fraction | None] = []
    for text, value, phrase in _scan(tokens, lexicon._portion_index, numeric=True):
        portions.append(text)
        values.append(lexicon.portion_fractions[phrase] if phrase is not None else value)

    foods = {text for text, _, _ in _scan(tokens, lexicon._food_index)}
    actions = {lexicon.action_forms[t] for t in tokens if t in lexicon.action_forms}
    return ParsedCaption(tokens, portions, values, foods, actions)


def portion_fraction(phrase: str, lexicon: Lexicon) -> Fraction | None:
    """Fraction for a portion phrase; None means unquantified.

    Accepts either a listed phrase or a numeric-template phrase. Unknown
    phrases raise LookupError.
    """
    toks = tuple(tokenize(phrase))
    if toks in lexicon.portion_fractions:
        return lexicon.portion_fractions[toks]
    hit = _match_numeric_portion(toks, 0)
    if hit is not None and hit[0] == len(toks):
        return hit[2]
    raise LookupError(f"unknown portion phrase {phrase!r}")


@dataclass(frozen=True)
class AccuracyResult:
    rate: float
    pairs_used: int
    pairs_excluded: int


def accuracy_report(gt_captions: Sequence[str], generated_captions: Sequence[str],
                    category: str, lexicon: Lexicon) -> AccuracyResult:
    """Mean per-pair recall of ground-truth terms, as sets.

    A pair whose ground-truth caption has no terms in the category carries no
    signal and is excluded from the mean. If every pair is excluded the rate
    is undefined and that is an error, not a 0 or a 1.
    """
    if category not in CATEGORIES:
        raise ConfigError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    if len(gt_captions) != len(generated_captions):
        raise DataError(
            f"caption list lengths differ: {len(gt_captions)} vs {len(generated_captions)}"
        )
    if not gt_captions:
        raise DataError("empty caption lists")
    rates = []
    excluded = 0
    for gt, gen in zip(gt_captions, generated_captions):
        gt_terms = parse(gt, lexicon).terms(category)
        if not gt_terms:
            excluded += 1
            continue
        gen_terms = parse(gen, lexicon).terms(category)
        rates.append(len(gt_terms & gen_terms) / len(gt_terms))
    if not rates:
        raise UndefinedRateError(
            f"all {excluded} pairs excluded for category {category!r} (no ground-truth terms)"
        )
    return AccuracyResult(sum(rates) / len(rates), len(rates), excluded)


def accuracy(gt_captions: Sequence[str], generated_captions: Sequence[str],
             category: str, lexicon: Lexicon) -> float:
    return accuracy_report(gt_captions, generated_captions, category, lexicon).rate
