"""Deterministic table-driven and callable backends for tests and demos."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from dpopt.backends.base import GenRequest, LabelScore, sample_token
from dpopt.tokens import EOS

EOS_JSON = "</s>"


def _longest_suffix(prompt: str, table: Mapping[str, object]):
    best = None
    for suffix in table:
        if prompt.endswith(suffix) and (best is None or len(suffix) > len(best)):
            best = suffix
    return best


class TableBackend:
    """Next-token and label-score lookup keyed by prompt suffix.

    The longest suffix key matching the prompt wins. ``next_tokens`` maps a
    suffix to ``{token: probability}``; ``label_scores`` maps a suffix to
    ``{label: logprob}``. Unmatched prompts fall back to ``default_next``
    (EOS if unset) and to equal label scores.
    """

    deterministic = True
    supports_logprobs = True

    def __init__(self, next_tokens: Mapping[str, Mapping] = None,
                 label_scores: Mapping[str, Mapping[str, float]] = None,
                 default_next: Optional[Mapping] = None, vocab_size: Optional[int] = None):
        self.next_tokens = {k: dict(v) for k, v in (next_tokens or {}).items()}
        self.label_scores = {k: dict(v) for k, v in (label_scores or {}).items()}
        self.default_next = dict(default_next) if default_next else {EOS: 1.0}
        vocab = {t for dist in self.next_tokens.values() for t in dist} | set(self.default_next)
        self.vocab_size = vocab_size or max(len(vocab), 1000)

    @classmethod
    def from_json(cls, path) -> "TableBackend":
        """Load ``{"next_tokens": ..., "label_scores": ..., "vocab_size": ...}``.

        The token ``"</s>"`` stands for EOS.
        """
        raw = json.loads(Path(path).read_text(encoding="utf-8"))

        def conv(dist):
            return {EOS if t == EOS_JSON else t: float(p) for t, p in dist.items()}

        return cls(
            {k: conv(v) for k, v in raw.get("next_tokens", {}).items()},
            raw.get("label_scores", {}),
            conv(raw["default_next"]) if "default_next" in raw else None,
            raw.get("vocab_size"),
        )

    def distribution(self, prompt: str) -> dict:
        key = _longest_suffix(prompt, self.next_tokens)
        dist = self.next_tokens[key] if key is not None else self.default_next
        total = sum(dist.values())
        return {t: p / total for t, p in dist.items()}

    def next_token(self, req: GenRequest):
        dist = self.distribution(req.prompt)
        tokens = list(dist)
        with np.errstate(divide="ignore"):
            logits = np.log(np.array([dist[t] for t in tokens]))
        return sample_token(tokens, logits, req)

    def score_labels(self, prompt: str, labels: Sequence[str]) -> list[LabelScore]:
        if not labels:
            raise ValueError("labels must be non-empty")
        key = _longest_suffix(prompt, self.label_scores)
        if key is None:
            return [LabelScore(l, 0.0) for l in labels]
        table = self.label_scores[key]
        return [LabelScore(l, float(table.get(l, -math.inf))) for l in labels]


class CallableBackend:
    """Backend built from two plain functions.

    ``next_token_fn(req) -> token`` and ``score_fn(prompt, labels) -> sequence
    of logprobs`` (aligned with ``labels``).
    """

    deterministic = True

    def __init__(self, next_token_fn: Callable = None, score_fn: Callable = None,
                 vocab_size: int = 32000, supports_logprobs: bool = True):
        self._next = next_token_fn
        self._score = score_fn
        self.vocab_size = vocab_size
        self.supports_logprobs = supports_logprobs

    def next_token(self, req: GenRequest):
        if self._next is None:
            raise NotImplementedError("no next_token function configured")
        return self._next(req)

    def score_labels(self, prompt, labels):
        if self._score is None:
            raise NotImplementedError("no score function configured")
        return [LabelScore(l, float(s)) for l, s in zip(labels, self._score(prompt, labels))]
