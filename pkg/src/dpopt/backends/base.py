"""Backend interface shared by local and remote language models."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from dpopt.tokens import EOS, token_sort_key


class BackendError(RuntimeError):
    """Base class for language-model backend failures."""


class BackendUnavailableError(BackendError):
    """Transient failure; the request may be retried."""


class RateLimitError(BackendUnavailableError):
    pass


class AuthError(BackendError):
    pass


class ContextLengthError(BackendError):
    pass


class MalformedResponseError(BackendError):
    pass


class UnsupportedOperationError(BackendError):
    pass


@dataclass
class GenRequest:
    prompt: str
    temperature: float = 0.0
    repetition_penalty: float = 1.0
    rng: Optional[np.random.Generator] = None
    history: tuple = ()  # tokens already generated in this continuation

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.repetition_penalty < 1:
            raise ValueError("repetition_penalty must be >= 1")


@dataclass(frozen=True)
class LabelScore:
    label: str
    logprob: float


@runtime_checkable
class Backend(Protocol):
    vocab_size: int
    deterministic: bool
    supports_logprobs: bool

    def next_token(self, req: GenRequest):
        ...

    def score_labels(self, prompt: str, labels: Sequence[str]) -> list[LabelScore]:
        ...


def best_label(scores: Sequence[LabelScore]) -> Optional[str]:
    """Argmax label, ties to the lexicographically smallest; None if nothing scored."""
    finite = [s for s in scores if s.logprob > -math.inf]
    if not finite:
        return None
    top = max(s.logprob for s in finite)
    return min(s.label for s in finite if s.logprob == top)


def penalize(logits: np.ndarray, tokens: Sequence, history: Sequence, penalty: float) -> np.ndarray:
    """Repetition penalty: positive logits are divided, negative ones multiplied."""
    if penalty == 1.0 or not history:
        return logits
    seen = set(history)
    out = logits.copy()
    for i, tok in enumerate(tokens):
        if tok in seen:
            out[i] = out[i] / penalty if out[i] > 0 else out[i] * penalty
    return out


def sample_token(tokens: Sequence, logits: np.ndarray, req: GenRequest):
    """Draw from ``softmax(logits / T)``; ``T = 0`` picks the mode.

    Ties at ``T = 0`` go to the smallest token under :func:`token_sort_key`.
    """
    logits = penalize(np.asarray(logits, dtype=np.float64), tokens, req.history,
                      req.repetition_penalty)
    if req.temperature == 0:
        top = logits.max()
        return min((t for t, l in zip(tokens, logits) if l == top), key=token_sort_key)
    if req.rng is None:
        raise ValueError("sampling at positive temperature needs an rng")
    z = logits / req.temperature
    z = z - z[np.isfinite(z)].max()
    p = np.exp(z)
    p /= p.sum()
    return tokens[int(req.rng.choice(len(tokens), p=p))]


class RecordingBackend:
    """Wraps a backend and records every outbound prompt.

    ``calls`` holds ``(operation, prompt)`` pairs in arrival order.
    """

    def __init__(self, inner):
        self.inner = inner
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def next_token(self, req: GenRequest):
        with self._lock:
            self.calls.append(("generate", req.prompt))
        return self.inner.next_token(req)

    def score_labels(self, prompt, labels):
        with self._lock:
            self.calls.append(("score", prompt))
        return self.inner.score_labels(prompt, labels)

    @property
    def prompts(self) -> list[str]:
        return [p for _, p in self.calls]
