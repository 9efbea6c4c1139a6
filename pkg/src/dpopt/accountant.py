"""Renyi-DP accounting for token-selection and prompt-selection mechanisms.

Every mechanism invocation is logged as a :class:`PrivacyEvent` on a
:class:`Ledger`. Costs are tracked as RDP curves on the integer order grid
``2..64``, amplified for Poisson subsampling, summed per data scope (train vs.
validation) and converted to ``(epsilon, delta)``.
"""

from __future__ import annotations

import functools
import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from dpopt import _kernels

ORDERS = np.arange(2, 65, dtype=np.int64)

EM = "EM"
MONOTONIC_EM = "monotonicEM"
LIMITED_DOMAIN = "LimitedDomain"
KINDS = (EM, MONOTONIC_EM, LIMITED_DOMAIN)

TRAIN = "train"
VALIDATION = "validation"
SCOPES = (TRAIN, VALIDATION)


class BudgetError(ValueError):
    """Raised when a conversion has no delta slack left."""


@dataclass(frozen=True)
class PrivacyEvent:
    kind: str
    epsilon0: float
    delta0: float = 0.0
    subsample_rate: float = 1.0
    scope: str = TRAIN

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if not (self.epsilon0 >= 0 and math.isfinite(self.epsilon0)):
            raise ValueError(f"epsilon0 must be finite and non-negative, got {self.epsilon0}")
        if not 0.0 <= self.subsample_rate <= 1.0:
            raise ValueError(f"subsample_rate must lie in [0, 1], got {self.subsample_rate}")
        if self.kind != LIMITED_DOMAIN and self.delta0 != 0:
            raise ValueError(f"{self.kind} events carry no delta0")
        if not 0.0 <= self.delta0 < 1.0:
            raise ValueError(f"delta0 must lie in [0, 1), got {self.delta0}")
        if self.scope == VALIDATION and self.subsample_rate != 1.0:
            raise ValueError("validation-scope events are never subsampled")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "epsilon0": self.epsilon0,
            "delta0": self.delta0,
            "subsample_rate": self.subsample_rate,
            "scope": self.scope,
        }


@dataclass(frozen=True)
class RdpCurve:
    """RDP epsilon at each order of :data:`ORDERS`."""

    eps: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.eps, dtype=np.float64)
        if arr.shape != ORDERS.shape:
            raise ValueError(f"curve must have {len(ORDERS)} entries, got {arr.shape}")
        if np.any(arr < 0) or np.any(np.isnan(arr)):
            raise ValueError("RDP curve values must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "eps", arr)

    @classmethod
    def zero(cls) -> "RdpCurve":
        return cls(np.zeros(len(ORDERS)))

    @property
    def orders(self) -> np.ndarray:
        return ORDERS

    def at(self, alpha: int) -> float:
        return float(self.eps[int(alpha) - int(ORDERS[0])])

    def is_zero(self) -> bool:
        return not np.any(self.eps)

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        return RdpCurve(self.eps + other.eps)

    def __mul__(self, k: float) -> "RdpCurve":
        return RdpCurve(self.eps * k)

    __rmul__ = __mul__


def base_curve(event: PrivacyEvent) -> RdpCurve:
    """Unamplified RDP curve of a single invocation.

    EM and LimitedDomain cost ``alpha * eps0**2 / 2``; an exponential
    mechanism over a monotone utility costs a quarter of that.
    """
    factor = 8.0 if event.kind == MONOTONIC_EM else 2.0
    return RdpCurve(ORDERS * event.epsilon0 ** 2 / factor)


def subsample_amplify(curve: RdpCurve, q: float) -> RdpCurve:
    """Amplify ``curve`` for Poisson subsampling at rate ``q``.

    The result never exceeds the input curve.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"subsampling rate must lie in [0, 1], got {q}")
    if q == 1.0:
        return curve
    if q == 0.0:
        return RdpCurve.zero()
    amplified = _kernels.subsampled_rdp(curve.eps, ORDERS, q)
    return RdpCurve(np.clip(np.minimum(amplified, curve.eps), 0.0, None))


@functools.lru_cache(maxsize=256)
def _event_curve(kind: str, epsilon0: float, q: float) -> RdpCurve:
    return subsample_amplify(base_curve(PrivacyEvent(kind, epsilon0)), q)


def event_curve(event: PrivacyEvent) -> RdpCurve:
    return _event_curve(event.kind, event.epsilon0, event.subsample_rate)


def charged_delta(event: PrivacyEvent, amplify_delta: bool = True) -> float:
    """Delta mass an event adds to its scope.

    With ``amplify_delta`` the failure mass is scaled by the subsampling rate:
    when the differing record is not sampled the two runs coincide.
    """
    return event.delta0 * (event.subsample_rate if amplify_delta else 1.0)


class Ledger:
    """Append-only record of privacy events.

    Appends go through a lock; reads take a snapshot.
    """

    def __init__(self, events: Iterable[PrivacyEvent] = (), *,
                 delta_conversion_slack: Optional[float] = None, amplify_delta: bool = True):
        if delta_conversion_slack is not None and not 0 < delta_conversion_slack < 1:
            raise ValueError("delta_conversion_slack must lie in (0, 1)")
        self._events: list[PrivacyEvent] = list(events)
        self._lock = threading.Lock()
        self.delta_conversion_slack = delta_conversion_slack
        self.amplify_delta = amplify_delta

    def append(self, event: PrivacyEvent) -> None:
        with self._lock:
            self._events.append(event)

    @property
    def events(self) -> tuple[PrivacyEvent, ...]:
        with self._lock:
            return tuple(self._events)

    def __len__(self) -> int:
        return len(self._events)

    def count(self, scope: Optional[str] = None) -> int:
        return sum(1 for e in self.events if scope is None or e.scope == scope)

    @property
    def raw_delta0_mass(self) -> float:
        return math.fsum(e.delta0 for e in self.events)

    def extended(self, event: PrivacyEvent) -> "Ledger":
        return Ledger(self.events + (event,), delta_conversion_slack=self.delta_conversion_slack,
                      amplify_delta=self.amplify_delta)


@dataclass(frozen=True)
class Composition:
    train_curve: RdpCurve
    val_curve: RdpCurve
    delta0_total: float
    val_delta0_total: float = 0.0

    def curve(self, scope: str) -> RdpCurve:
        return self.train_curve if scope == TRAIN else self.val_curve

    def delta0(self, scope: str) -> float:
        return self.delta0_total if scope == TRAIN else self.val_delta0_total

    def __iter__(self):
        # unpacks as (train_curve, val_curve, delta0_total)
        return iter((self.train_curve, self.val_curve, self.delta0_total))


def compose(ledger: Ledger | Iterable[PrivacyEvent]) -> Composition:
    """Sum the amplified curves of each scope.

    Events are grouped by ``(kind, eps0, q)`` so composing ``n`` identical
    events costs one curve evaluation.
    """
    if isinstance(ledger, Ledger):
        events, amplify = ledger.events, ledger.amplify_delta
    else:
        events, amplify = tuple(ledger), True
    groups: dict[tuple, int] = {}
    for e in events:
        key = (e.scope, e.kind, e.epsilon0, e.subsample_rate)
        groups[key] = groups.get(key, 0) + 1
    curves = {TRAIN: np.zeros(len(ORDERS)), VALIDATION: np.zeros(len(ORDERS))}
    for (scope, kind, eps0, q), n in groups.items():
        curves[scope] = curves[scope] + n * _event_curve(kind, eps0, q).eps
    deltas = {TRAIN: [], VALIDATION: []}
    for e in events:
        deltas[e.scope].append(charged_delta(e, amplify))
    return Composition(
        RdpCurve(curves[TRAIN]),
        RdpCurve(curves[VALIDATION]),
        math.fsum(deltas[TRAIN]),
        math.fsum(deltas[VALIDATION]),
    )


def to_eps_delta_with_order(curve: RdpCurve, delta0_total: float,
                            delta_target: float) -> tuple[float, int]:
    """Convert an RDP curve to ``(epsilon, best_order)`` at ``delta_target``.

    ``delta_target - delta0_total`` is the slack spent on the conversion
    ``eps(a) + log(1/slack)/(a-1)``.
    """
    slack = delta_target - delta0_total
    if not slack > 0:
        raise BudgetError(
            f"no delta left for conversion: target {delta_target:g} <= accumulated {delta0_total:g}"
        )
    vals = curve.eps + math.log(1.0 / slack) / (ORDERS - 1)
    i = int(np.argmin(vals))
    return float(vals[i]), int(ORDERS[i])


def to_eps_delta(curve: RdpCurve, delta0_total: float, delta_target: float) -> float:
    return to_eps_delta_with_order(curve, delta0_total, delta_target)[0]


@dataclass(frozen=True)
class Budget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("budget epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("budget delta must lie in (0, 1)")


def _conversion_target(ledger: Ledger, delta0: float, budget: Budget) -> float:
    # A fixed slack d' spends exactly d'; otherwise all remaining delta is used.
    if ledger.delta_conversion_slack is not None:
        if delta0 + ledger.delta_conversion_slack > budget.delta:
            return delta0  # forces a BudgetError
        return delta0 + ledger.delta_conversion_slack
    return budget.delta


def scope_epsilon(ledger: Ledger, scope: str, budget: Budget) -> tuple[float, int]:
    comp = compose(ledger)
    d0 = comp.delta0(scope)
    return to_eps_delta_with_order(comp.curve(scope), d0, _conversion_target(ledger, d0, budget))


def budget_check(ledger: Ledger, next_event: PrivacyEvent, budget: Budget) -> bool:
    """True iff appending ``next_event`` keeps its scope within ``budget``."""
    try:
        eps, _ = scope_epsilon(ledger.extended(next_event), next_event.scope, budget)
    except BudgetError:
        return False
    return eps <= budget.epsilon


@dataclass
class ScopeSummary:
    scope: str
    events: int
    epsilon: float
    delta: float
    order: Optional[int]
    raw_delta0: float = 0.0

    def to_dict(self) -> dict:
        return {
            "events": self.events,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "optimal_order": self.order,
            "raw_delta0_mass": self.raw_delta0,
        }


def summarize(ledger: Ledger, delta_target: float) -> dict[str, ScopeSummary]:
    """Per-scope ``(epsilon, delta)`` at ``delta_target``.

    A scope whose curve is identically zero with no delta mass is reported as
    ``(0, 0)``: the data had no influence on the output.
    """
    comp = compose(ledger)
    out = {}
    for scope in SCOPES:
        n = ledger.count(scope)
        raw = math.fsum(e.delta0 for e in ledger.events if e.scope == scope)
        curve, d0 = comp.curve(scope), comp.delta0(scope)
        if curve.is_zero() and d0 == 0:
            out[scope] = ScopeSummary(scope, n, 0.0, 0.0, None, raw)
            continue
        budget_like = Budget(1.0, delta_target)
        target = _conversion_target(ledger, d0, budget_like)
        try:
            eps, order = to_eps_delta_with_order(curve, d0, target)
        except BudgetError:
            eps, order = math.inf, None
        out[scope] = ScopeSummary(scope, n, eps, target, order, raw)
    return out


def advanced_composition_epsilon(m: int, epsilon0: float, delta_prime: float) -> float:
    """Advanced-composition bound for ``m`` pure ``epsilon0``-DP steps."""
    return (epsilon0 * math.sqrt(2 * m * math.log(1 / delta_prime))
            + m * epsilon0 * math.expm1(epsilon0))
