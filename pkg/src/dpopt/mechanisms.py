"""Private selection primitives: Gumbel noise, exponential mechanism, LimitedDomain."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Mapping, Optional

import numpy as np

from dpopt.accountant import (EM, LIMITED_DOMAIN, MONOTONIC_EM, TRAIN, PrivacyEvent)
from dpopt.tokens import BOTTOM, token_sort_key


@dataclass
class TokenHistogram:
    counts: Counter
    domain_size: int

    def __post_init__(self):
        self.counts = Counter({k: int(v) for k, v in self.counts.items() if v})
        if any(v < 0 for v in self.counts.values()):
            raise ValueError("histogram counts must be non-negative")
        if self.domain_size < 1:
            raise ValueError("domain_size must be positive")
        if len(self.counts) > self.domain_size:
            raise ValueError(
                f"{len(self.counts)} distinct tokens exceed domain size {self.domain_size}")

    @classmethod
    def from_votes(cls, votes, domain_size: int) -> "TokenHistogram":
        return cls(Counter(votes), domain_size)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def ranked(self) -> list[tuple[Hashable, int]]:
        """Tokens by count descending, ties broken by :func:`token_sort_key`."""
        return sorted(self.counts.items(), key=lambda kv: (-kv[1], token_sort_key(kv[0])))


@dataclass(frozen=True)
class SensitivitySpec:
    delta_zero: int = 2
    delta_inf: int = 1

    def __post_init__(self):
        if self.delta_zero < 1 or self.delta_inf < 1:
            raise ValueError("sensitivities must be >= 1")


@dataclass(frozen=True)
class MechanismParams:
    epsilon0: float
    delta0: float
    k_bar: int = 10
    k: int = 1

    def __post_init__(self):
        if not self.epsilon0 > 0:
            raise ValueError("epsilon0 must be positive")
        if not 0 < self.delta0 < 1:
            raise ValueError("delta0 must lie in (0, 1)")
        if not 1 <= self.k <= self.k_bar:
            raise ValueError("need 1 <= k <= k_bar")


def gumbel_sample(scale: float, u: float) -> float:
    """Inverse-CDF Gumbel(0, scale) draw from a uniform ``u`` in (0, 1)."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie in the open interval (0, 1), got {u}")
    return -scale * math.log(-math.log(u))


def gumbel_noise(scale: float, size: int, rng: np.random.Generator) -> np.ndarray:
    # rng.random() lies in [0, 1); reject the (measure-zero) endpoint
    u = rng.random(size)
    while np.any(u == 0.0):
        u[u == 0.0] = rng.random(int(np.sum(u == 0.0)))
    return -scale * np.log(-np.log(u))


def exp_mech_argmax(scores: Mapping[Hashable, float], epsilon: float, sensitivity: float,
                    rng: Optional[np.random.Generator], *, monotonic: bool = False,
                    scope: str = TRAIN, subsample_rate: float = 1.0):
    """Sample from the exponential mechanism over ``scores``.

    Outcome ``i`` is drawn with probability proportional to
    ``exp(epsilon * s_i / (2 * sensitivity))`` by adding Gumbel noise of scale
    ``2 * sensitivity / epsilon`` and taking the argmax. ``epsilon = inf`` is
    the non-private argmax (smallest key on ties) and emits no event;
    ``epsilon = 0`` is the uniform draw.

    Returns:
        ``(outcome, event)`` where ``event`` is a :class:`PrivacyEvent` or None.
    """
    if not scores:
        raise ValueError("exponential mechanism needs at least one outcome")
    if not sensitivity > 0:
        raise ValueError("sensitivity must be positive")
    if epsilon < 0 or math.isnan(epsilon):
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    keys = list(scores)
    if math.isinf(epsilon):
        best = max(scores.values())
        return min((k for k in keys if scores[k] == best), key=token_sort_key), None
    kind = MONOTONIC_EM if monotonic else EM
    event = PrivacyEvent(kind, float(epsilon), 0.0, subsample_rate, scope)
    if epsilon == 0:
        return keys[int(rng.integers(len(keys)))], event
    values = np.array([scores[k] for k in keys], dtype=np.float64)
    noisy = values + gumbel_noise(2.0 * sensitivity / epsilon, len(keys), rng)
    return keys[int(np.argmax(noisy))], event


def limited_domain_threshold(h_next: float, params: MechanismParams, sens: SensitivitySpec,
                             domain_size: int) -> float:
    """Count the released token must beat, before noise.

    ``h_next`` is the (k_bar+1)-th largest count.
    """
    m = min(sens.delta_zero, params.k_bar, domain_size - params.k_bar)
    return h_next + 1.0 + 2.0 * math.log(m / params.delta0) / params.epsilon0


def _limited_domain_candidates(h: TokenHistogram, params: MechanismParams):
    if params.k_bar >= h.domain_size:
        raise ValueError(f"k_bar={params.k_bar} must be smaller than domain size {h.domain_size}")
    ranked = h.ranked()
    top = ranked[: params.k_bar]
    # Domain elements absent from the histogram fill the remaining top slots
    # with count 0; they have no name, so winning with one reports BOTTOM.
    n_phantom = params.k_bar - len(top)
    h_next = ranked[params.k_bar][1] if len(ranked) > params.k_bar else 0
    return top, n_phantom, h_next


def limited_domain_top_k(h: TokenHistogram, params: MechanismParams, sens: SensitivitySpec,
                         rng: np.random.Generator, *, subsample_rate: float = 1.0,
                         scope: str = TRAIN):
    """Noisy top-k over the ``k_bar`` largest counts against a noisy threshold.

    Returns ``(released, event)``: ``released`` lists the tokens whose noisy
    count beat the noisy threshold, in noisy order, truncated to ``k``; if
    fewer than ``k`` did, it ends with :data:`BOTTOM`.
    """
    top, n_phantom, h_next = _limited_domain_candidates(h, params)
    threshold = limited_domain_threshold(h_next, params, sens, h.domain_size)
    values = np.array([c for _, c in top] + [0] * n_phantom + [threshold], dtype=np.float64)
    noisy = values + gumbel_noise(2.0 * sens.delta_inf / params.epsilon0, len(values), rng)
    order = np.argsort(-noisy, kind="stable")
    bottom_idx = len(values) - 1
    released = []
    for idx in order:
        if idx == bottom_idx or idx >= len(top):
            # threshold reached, or an unnamed zero-count element outranks the rest
            released.append(BOTTOM)
            break
        released.append(top[idx][0])
        if len(released) == params.k:
            break
    event = PrivacyEvent(LIMITED_DOMAIN, params.epsilon0, params.delta0, subsample_rate, scope)
    return released, event


def limited_domain(h: TokenHistogram, params: MechanismParams, sens: SensitivitySpec,
                   rng: np.random.Generator, *, subsample_rate: float = 1.0, scope: str = TRAIN):
    """Release the single top token of ``h`` privately, or :data:`BOTTOM`."""
    if params.k != 1:
        params = MechanismParams(params.epsilon0, params.delta0, params.k_bar, 1)
    released, event = limited_domain_top_k(h, params, sens, rng, subsample_rate=subsample_rate,
                                           scope=scope)
    return released[0], event

