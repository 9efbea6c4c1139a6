"""Lexical leakage scan: training text reproduced inside a generated prompt.

Both sides are lowercased and punctuation is replaced by spaces before
splitting on whitespace. A training example is reported when it shares a
contiguous run of at least ``min_overlap`` words with the prompt.
"""

from __future__ import annotations

import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from dpopt._kernels import longest_common_run

DEFAULT_MIN_OVERLAP = 6
_PUNCT = re.compile("[" + re.escape(string.punctuation) + "\u2018\u2019\u201c\u201d\u2013\u2014]")


@dataclass(frozen=True)
class LeakMatch:
    prompt_span: str
    train_example_index: int
    overlap_tokens: int
    jaccard: float

    def to_dict(self) -> dict:
        return {
            "prompt_span": self.prompt_span,
            "train_example_index": self.train_example_index,
            "overlap_tokens": self.overlap_tokens,
            "jaccard": self.jaccard,
        }


def normalize(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def shingles(words: Sequence[str], n: int) -> set[tuple[str, ...]]:
    return {tuple(words[i:i + n]) for i in range(len(words) - n + 1)}


def jaccard(a: Sequence[str], b: Sequence[str], n: int = 3) -> float:
    sa, sb = shingles(a, n), shingles(b, n)
    if not sa and not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


class _Vocab:
    def __init__(self):
        self.ids: dict[str, int] = {}

    def encode(self, words: Iterable[str]) -> np.ndarray:
        return np.array([self.ids.setdefault(w, len(self.ids)) for w in words], dtype=np.int64)


def overlap(a: str, b: str) -> int:
    """Longest common normalised word run between two strings."""
    vocab = _Vocab()
    return longest_common_run(vocab.encode(normalize(a)), vocab.encode(normalize(b)))[0]


def scan(prompt: str, train: Sequence, min_overlap: int = DEFAULT_MIN_OVERLAP,
         workers: int = 1) -> list[LeakMatch]:
    """Report training examples sharing ``>= min_overlap`` consecutive words with ``prompt``.

    Args:
        prompt: Generated instruction text.
        train: Sequence of examples (objects with a ``text`` attribute) or strings.
        min_overlap: Minimum run length in words, at least 3.
        workers: Threads used for the per-example DP.

    Returns:
        Matches sorted by overlap descending, then example index ascending.
    """
    if min_overlap < 3:
        raise ValueError("min_overlap must be >= 3")
    p_words = normalize(prompt)
    if len(p_words) < min_overlap:
        return []
    vocab = _Vocab()
    p_ids = vocab.encode(p_words)
    p_grams = shingles(p_words, min_overlap)

    def check(item):
        idx, ex = item
        words = normalize(ex if isinstance(ex, str) else ex.text)
        # a run of length >= n implies a shared n-gram
        if len(words) < min_overlap or p_grams.isdisjoint(shingles(words, min_overlap)):
            return None
        length, end = longest_common_run(p_ids, vocab_lookup(words))
        if length < min_overlap:
            return None
        span = " ".join(p_words[end - length:end])
        return LeakMatch(span, idx, int(length), jaccard(p_words, words))

    def vocab_lookup(words):
        # unseen words get -1 and never match the prompt
        return np.array([vocab.ids.get(w, -1) for w in words], dtype=np.int64)

    items = list(enumerate(train))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            found = list(pool.map(check, items))
    else:
        found = [check(it) for it in items]
    matches = [m for m in found if m is not None]
    matches.sort(key=lambda m: (-m.overlap_tokens, m.train_example_index))
    return matches
