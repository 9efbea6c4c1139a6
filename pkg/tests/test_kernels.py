import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpopt import _kernels as K


def brute_lcs(a, b):
    best = 0
    for i in range(len(a)):
        for j in range(len(b)):
            k = 0
            while i + k < len(a) and j + k < len(b) and a[i + k] == b[j + k]:
                k += 1
            best = max(best, k)
    return best


def direct_subsampled(eps, alpha, q):
    # 50-digit direct sum, no log-space tricks
    with mpmath.workdps(50):
        q = mpmath.mpf(q)
        total = (1 - q) ** (alpha - 1) * (1 + (alpha - 1) * q)
        for l in range(2, alpha + 1):
            total += (mpmath.binomial(alpha, l) * (1 - q) ** (alpha - l) * q ** l
                      * mpmath.exp((l - 1) * mpmath.mpf(eps[l - 2])))
        return float(mpmath.log(total) / (alpha - 1))


seqs = st.lists(st.integers(0, 4), max_size=25)


@settings(max_examples=200, deadline=None)
@given(seqs, seqs)
def test_lcs_paths_agree_with_brute_force(a, b):
    a, b = np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)
    want = brute_lcs(a.tolist(), b.tolist())
    n1, e1 = K.longest_common_run_numpy(a, b)
    n2, e2 = K.longest_common_run_numba(a, b)
    assert n1 == n2 == want
    assert e1 == e2
    if want:
        run = a[e1 - n1:e1].tolist()
        assert any(b[j:j + n1].tolist() == run for j in range(len(b)))


@settings(max_examples=100, deadline=None)
@given(seqs, seqs)
def test_lcs_symmetric(a, b):
    a, b = np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)
    assert K.longest_common_run(a, b)[0] == K.longest_common_run(b, a)[0]


@pytest.mark.parametrize("q", [0.001, 0.01, 0.1, 0.5, 0.9])
@pytest.mark.parametrize("eps0", [0.1, 0.8, 1.8])
def test_subsampled_rdp_matches_direct_sum(q, eps0):
    orders = np.arange(2, 21)
    eps = orders * eps0 ** 2 / 2
    want = [direct_subsampled(eps, int(a), q) for a in orders]
    # log(1 + x) in double precision has an absolute floor near 1e-16
    np.testing.assert_allclose(K.subsampled_rdp_numpy(eps, orders, q), want, rtol=1e-10, atol=1e-15)
    np.testing.assert_allclose(K.subsampled_rdp_numba(eps, orders, q), want, rtol=1e-10, atol=1e-15)


def test_subsampled_rdp_order2_closed_form():
    # 1 - q^2 + q^2 e^{eps(2)}, eps(2) = 1.8^2
    orders = np.arange(2, 65)
    eps = orders * 1.8 ** 2 / 2
    got = K.subsampled_rdp(eps, orders, 0.01)[0]
    assert got == pytest.approx(math.log1p(0.01 ** 2 * (math.exp(3.24) - 1)), rel=1e-12)
    assert round(got, 6) == 0.002450


def test_paths_agree_on_full_grid_large_orders():
    orders = np.arange(2, 65)
    eps = orders * 1.8 ** 2 / 2
    a = K.subsampled_rdp_numpy(eps, orders, 1025 / 66674)
    b = K.subsampled_rdp_numba(eps, orders, 1025 / 66674)
    assert np.all(np.isfinite(a))
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_backend_name():
    assert K.backend_name() in ("numba", "numpy")


@pytest.mark.parametrize("flag,want", [("1", "numpy"), ("0", "numba")])
def test_env_flag_selects_path(flag, want):
    import os
    import subprocess
    import sys
    env = {**os.environ, "DPOPT_DISABLE_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c",
                          "from dpopt import _kernels as K; print(K.backend_name())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == want
