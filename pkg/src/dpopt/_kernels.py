"""Numeric inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``DPOPT_DISABLE_NUMBA``
is unset (or ``0``). Both paths are always importable under explicit names so
tests and ``benchmarks/bench_kernels.py`` can compare them.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import gammaln, logsumexp

_DISABLED = os.environ.get("DPOPT_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes")

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

HAVE_NUMBA = njit is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


# ---------------------------------------------------------------------------
# Longest common run (word-level longest common substring)
# ---------------------------------------------------------------------------


def longest_common_run_numpy(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    """Length of the longest common contiguous run of ``a`` and ``b``.

    Returns ``(length, end)`` where ``a[end - length:end]`` is the first such
    run found scanning ``a`` left to right. Row-vectorised DP.
    """
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return 0, 0
    prev = np.zeros(m + 1, dtype=np.int64)
    best, best_end = 0, 0
    for i in range(n):
        cur = np.zeros(m + 1, dtype=np.int64)
        hit = b == a[i]
        cur[1:] = np.where(hit, prev[:-1] + 1, 0)
        row_best = int(cur.max())
        if row_best > best:
            best, best_end = row_best, i + 1
        prev = cur
    return best, best_end


def _longest_common_run_py(a, b):
    n, m = len(a), len(b)
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    best = 0
    best_end = 0
    for i in range(n):
        ai = a[i]
        for j in range(m):
            if ai == b[j]:
                v = prev[j] + 1
                cur[j + 1] = v
                if v > best:
                    best = v
                    best_end = i + 1
            else:
                cur[j + 1] = 0
        prev, cur = cur, prev
    return best, best_end


# ---------------------------------------------------------------------------
# Poisson-subsampled RDP at integer orders
# ---------------------------------------------------------------------------


def subsampled_rdp_numpy(eps: np.ndarray, orders: np.ndarray, q: float) -> np.ndarray:
    """Integer-order RDP bound for a Poisson-subsampled mechanism.

    ``eps[i]`` is the base mechanism's RDP at ``orders[i]``; the orders must be
    the contiguous integers ``2..A``. For each order ``a`` this evaluates, in
    log space,

        1/(a-1) * log[(1-q)^(a-1) (1+(a-1)q)
                      + sum_{l=2..a} C(a,l) (1-q)^(a-l) q^l exp((l-1) eps(l))]

    Caller guarantees ``0 < q < 1``.
    """
    out = np.empty(len(orders), dtype=np.float64)
    log_q = math.log(q)
    log_1mq = math.log1p(-q)
    for i, a in enumerate(orders):
        a = int(a)
        ls = np.arange(2, a + 1)
        log_terms = (
            gammaln(a + 1) - gammaln(ls + 1) - gammaln(a - ls + 1)
            + (a - ls) * log_1mq + ls * log_q + (ls - 1) * eps[: a - 1]
        )
        head = (a - 1) * log_1mq + math.log1p((a - 1) * q)
        out[i] = logsumexp(np.append(log_terms, head)) / (a - 1)
    return out


def _subsampled_rdp_py(eps, orders, q):
    out = np.empty(len(orders), dtype=np.float64)
    log_q = math.log(q)
    log_1mq = math.log1p(-q)
    for i in range(len(orders)):
        a = orders[i]
        head = (a - 1) * log_1mq + math.log1p((a - 1) * q)
        # running log-sum-exp
        mx = head
        for l in range(2, a + 1):
            t = (math.lgamma(a + 1.0) - math.lgamma(l + 1.0) - math.lgamma(a - l + 1.0)
                 + (a - l) * log_1mq + l * log_q + (l - 1) * eps[l - 2])
            if t > mx:
                mx = t
        acc = math.exp(head - mx)
        for l in range(2, a + 1):
            t = (math.lgamma(a + 1.0) - math.lgamma(l + 1.0) - math.lgamma(a - l + 1.0)
                 + (a - l) * log_1mq + l * log_q + (l - 1) * eps[l - 2])
            acc += math.exp(t - mx)
        out[i] = (mx + math.log(acc)) / (a - 1)
    return out


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    longest_common_run_numba = njit(cache=True, nogil=True)(_longest_common_run_py)
    subsampled_rdp_numba = njit(cache=True)(_subsampled_rdp_py)
else:  # pragma: no cover
    longest_common_run_numba = None
    subsampled_rdp_numba = None


def longest_common_run(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if USE_NUMBA:
        best, end = longest_common_run_numba(a, b)
        return int(best), int(end)
    return longest_common_run_numpy(a, b)


def subsampled_rdp(eps: np.ndarray, orders: np.ndarray, q: float) -> np.ndarray:
    eps = np.ascontiguousarray(eps, dtype=np.float64)
    orders = np.ascontiguousarray(orders, dtype=np.int64)
    if USE_NUMBA:
        return subsampled_rdp_numba(eps, orders, float(q))
    return subsampled_rdp_numpy(eps, orders, q)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
