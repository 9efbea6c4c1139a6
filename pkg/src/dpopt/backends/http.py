"""Client for OpenAI-compatible ``/v1/completions`` endpoints."""

from __future__ import annotations

import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import httpx

from dpopt.backends.base import (AuthError, BackendError, BackendUnavailableError,
                                 ContextLengthError, GenRequest, LabelScore,
                                 MalformedResponseError, RateLimitError)
from dpopt.tokens import EOS

logger = logging.getLogger(__name__)

RETRY_STATUS = {429, 500, 502, 503, 504}


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "DPOPT_API_KEY"
    timeout: float = 30.0
    max_attempts: int = 5
    backoff_initial: float = 0.5
    backoff_factor: float = 2.0
    max_concurrency: int = 4
    vocab_size: int = 50000  # upper bound used as the LimitedDomain domain size
    stop: Optional[list] = None
    label_max_tokens: Optional[int] = None


class HttpBackend:
    """Remote completion backend.

    Generation requests ask for a single token. Label scoring has no logprob
    access: the model completes greedily and the longest label that is a
    case-insensitive prefix of the completion gets logprob 0, all others
    ``-inf``. Outputs are not reproducible from a seed.
    """

    deterministic = False
    supports_logprobs = False

    def __init__(self, config: EndpointConfig, client: Optional[httpx.Client] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        key = os.environ.get(config.api_key_env)
        if not key:
            raise AuthError(f"environment variable {config.api_key_env} is not set")
        self._headers = {"Authorization": f"Bearer {key}"}
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(config.max_concurrency)
        self.vocab_size = config.vocab_size
        self.last_attempts = 0

    def _post(self, payload: dict) -> dict:
        url = self.config.base_url.rstrip("/") + "/v1/completions"
        delay = self.config.backoff_initial
        last_exc: Exception = BackendUnavailableError("no attempt made")
        for attempt in range(1, self.config.max_attempts + 1):
            self.last_attempts = attempt
            try:
                with self._slots:
                    resp = self._client.post(url, json=payload, headers=self._headers)
            except httpx.TransportError as exc:
                last_exc = BackendUnavailableError(f"transport error: {exc}")
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise MalformedResponseError(f"response is not JSON: {exc}") from None
                if resp.status_code in (401, 403):
                    raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
                if resp.status_code == 429:
                    last_exc = RateLimitError("rate limited (HTTP 429)")
                elif resp.status_code in RETRY_STATUS:
                    last_exc = BackendUnavailableError(f"HTTP {resp.status_code}")
                elif resp.status_code == 400 and "context" in resp.text.lower():
                    raise ContextLengthError(resp.text[:200])
                else:
                    raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            logger.warning("completion attempt %d/%d failed: %s", attempt,
                           self.config.max_attempts, last_exc)
            if attempt < self.config.max_attempts:
                self._sleep(delay)
                delay *= self.config.backoff_factor
        raise last_exc

    def complete(self, prompt: str, max_tokens: int, temperature: float,
                 repetition_penalty: float = 1.0, seed: Optional[int] = None):
        payload = {"model": self.config.model, "prompt": prompt, "max_tokens": max_tokens,
                   "temperature": temperature}
        if self.config.stop:
            payload["stop"] = list(self.config.stop)
        if repetition_penalty != 1.0:
            payload["repetition_penalty"] = repetition_penalty
        if seed is not None:
            payload["seed"] = seed
        data = self._post(payload)
        try:
            choice = data["choices"][0]
            text = choice["text"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponseError(f"unexpected response shape: {str(data)[:200]}") from None
        if not isinstance(text, str):
            raise MalformedResponseError("completion text is not a string")
        return text, choice.get("finish_reason")

    def next_token(self, req: GenRequest):
        seed = int(req.rng.integers(2 ** 31)) if req.rng is not None else None
        text, _finish = self.complete(req.prompt, 1, req.temperature, req.repetition_penalty, seed)
        # an empty completion means the model stopped
        return EOS if text == "" else text

    def score_labels(self, prompt: str, labels: Sequence[str]) -> list[LabelScore]:
        if not labels:
            raise ValueError("labels must be non-empty")
        max_tokens = self.config.label_max_tokens or 2 * max(len(l.split()) for l in labels) + 2
        text, _ = self.complete(prompt, max_tokens, 0.0)
        completion = text.lstrip().lower()
        matched = [l for l in labels if completion.startswith(l.lower())]
        winner = max(matched, key=len) if matched else None
        return [LabelScore(l, 0.0 if l == winner else -math.inf) for l in labels]
