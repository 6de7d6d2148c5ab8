"""Caption tokenization and the model vocabulary.

One tokenizer for everything: captions are lowercased, punctuation collapses
to spaces, digits and the fraction slash survive ("3/4" is one token). The
vocabulary file is one corpus token per line; ids 0..3 are reserved.
"""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable

from .errors import VocabError

BOS, EOS, PAD, UNK = 0, 1, 2, 3
RESERVED = ("<bos>", "<eos>", "<pad>", "<unk>")
N_RESERVED = 4

_TOKEN_CLEAN = re.compile(r"[^0-9a-z/]+")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; keeps digits and '/' so "3/4" stays intact."""
    return _TOKEN_CLEAN.sub(" ", text.lower()).split()


class Vocabulary:
    """Token <-> id mapping with fixed reserved ids 0..3."""

    def __init__(self, tokens: Iterable[str]) -> None:
        self.tokens = list(tokens)
        seen = set()
        for t in self.tokens:
            if not t or t in RESERVED or t in seen or t != t.strip():
                raise VocabError(f"bad vocabulary token {t!r}")
            seen.add(t)
        self._ids = {t: N_RESERVED + i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return N_RESERVED + len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @classmethod
    def from_corpus(cls, captions: Iterable[str]) -> "Vocabulary":
        """Frequency-sorted tokens, ties broken lexically for determinism."""
        counts = Counter()
        for cap in captions:
            counts.update(tokenize(cap))
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ordered)

    def encode(self, text: str, allow_unk: bool = False) -> list[int]:
        """BOS + token ids + EOS; unknown tokens raise unless allow_unk."""
        ids = [BOS]
        for tok in tokenize(text):
            if tok in self._ids:
                ids.append(self._ids[tok])
            elif allow_unk:
                ids.append(UNK)
            else:
                raise VocabError(f"token {tok!r} not in vocabulary")
        ids.append(EOS)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Ids back to text; reserved structural ids are dropped."""
        words = []
        for i in ids:
            i = int(i)
            if i in (BOS, EOS, PAD):
                continue
            if i == UNK:
                words.append("<unk>")
                continue
            if i < 0 or i >= len(self):
                raise VocabError(f"id {i} outside vocabulary of size {len(self)}")
            words.append(self.tokens[i - N_RESERVED])
        return " ".join(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])
