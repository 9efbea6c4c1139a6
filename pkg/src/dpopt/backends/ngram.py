"""Word-level n-gram language model with add-one smoothing."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Iterable, Sequence

import numpy as np

from dpopt.backends.base import GenRequest, LabelScore, sample_token
from dpopt.tokens import EOS

BOS = "<s>"


class NgramBackend:
    """Order-``n`` word model; emitted tokens carry their own leading space.

    A word is emitted as ``" word"`` unless the prompt already ends in
    whitespace. The vocabulary is every corpus word plus EOS, so its size is
    the LimitedDomain domain size.
    """

    deterministic = True
    supports_logprobs = True

    def __init__(self, order: int):
        if order < 1:
            raise ValueError("n-gram order must be >= 1")
        self.order = order
        self.counts: dict[tuple, Counter] = defaultdict(Counter)
        self.vocab: list = []
        self._index: dict = {}

    @classmethod
    def train(cls, corpus: Iterable[str], order: int) -> "NgramBackend":
        corpus = list(corpus)
        if not corpus:
            raise ValueError("corpus must be non-empty")
        model = cls(order)
        words = set()
        for line in corpus:
            seq = [BOS] * (order - 1) + line.split() + [EOS]
            words.update(w for w in seq if w is not EOS and w != BOS)
            for i in range(order - 1, len(seq)):
                model.counts[tuple(seq[i - order + 1:i])][seq[i]] += 1
        model.vocab = [EOS] + sorted(words)
        model._index = {w: i for i, w in enumerate(model.vocab)}
        return model

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _context(self, words: Sequence[str]) -> tuple:
        if self.order == 1:
            return ()
        ctx = list(words[-(self.order - 1):])
        return tuple([BOS] * (self.order - 1 - len(ctx)) + ctx)

    def _counts(self, ctx: tuple) -> np.ndarray:
        counts = np.ones(len(self.vocab))
        seen = self.counts.get(ctx)
        if seen:
            for w, c in seen.items():
                counts[self._index[w]] += c
        return counts

    def _logprobs(self, ctx: tuple) -> np.ndarray:
        counts = self._counts(ctx)
        return np.log(counts / counts.sum())

    def _surface(self, prompt: str) -> list:
        sep = "" if (not prompt or prompt[-1].isspace()) else " "
        return [EOS] + [sep + w for w in self.vocab[1:]]

    def distribution(self, prompt: str) -> dict:
        p = np.exp(self._logprobs(self._context(prompt.split())))
        return dict(zip(self._surface(prompt), p))

    def next_token(self, req: GenRequest):
        logits = self._logprobs(self._context(req.prompt.split()))
        return sample_token(self._surface(req.prompt), logits, req)

    def score_labels(self, prompt: str, labels: Sequence[str]) -> list[LabelScore]:
        if not labels:
            raise ValueError("labels must be non-empty")
        base = prompt.split()
        out = []
        for label in labels:
            words = list(base)
            total = 0.0
            for w in label.split():
                counts = self._counts(self._context(words))
                i = self._index.get(w)
                # out-of-vocabulary words get the add-one floor
                total += math.log((counts[i] if i is not None else 1.0) / counts.sum())
                words.append(w)
            out.append(LabelScore(label, float(total)))
        return out
