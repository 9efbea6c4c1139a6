"""Time the numba and numpy paths of the two hot kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from dpopt import _kernels as K


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    a = rng.integers(0, 300, 400)
    b = rng.integers(0, 300, 2000)
    orders = np.arange(2, 65)
    eps = orders * 1.8 ** 2 / 2
    q = 1025 / 66674

    # compile once outside the timed region
    K.longest_common_run_numba(a, b)
    K.subsampled_rdp_numba(eps, orders, q)

    cases = [
        ("longest_common_run 400x2000", lambda: K.longest_common_run_numpy(a, b),
         lambda: K.longest_common_run_numba(a, b)),
        ("subsampled_rdp orders 2..64", lambda: K.subsampled_rdp_numpy(eps, orders, q),
         lambda: K.subsampled_rdp_numba(eps, orders, q)),
    ]
    print(f"{'kernel':<30} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, f_np, f_nb in cases:
        t_np = min(timeit.repeat(f_np, number=10, repeat=args.repeat)) / 10 * 1e3
        t_nb = min(timeit.repeat(f_nb, number=10, repeat=args.repeat)) / 10 * 1e3
        print(f"{name:<30} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
