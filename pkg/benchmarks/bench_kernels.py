"""Time the compiled kernels against the numpy fallback on a Table-1 sized tensor.

Usage: python3 benchmarks/bench_kernels.py [--repeats 5] [--threads 1]
"""
import argparse
import timeit

import numpy as np

from csgpfa import _backend
from csgpfa.augment import pg_match_shape_slope


def make_inputs(M=10, R=30, N=20, T=100, seed=0):
    rng = np.random.default_rng(seed)
    counts = rng.poisson(2.0, size=(M, R, N, T)).astype(np.int64)
    mask = np.ones((M, R), dtype=bool)
    r = rng.uniform(0.5, 5.0, size=N)
    F = rng.normal(-0.5, 1.0, size=(M, N, T))
    slope = pg_match_shape_slope(np.abs(F) + 0.1)
    k = counts.max(axis=(0, 1, 3)).astype(float)
    return counts, mask, r, F, slope, k


def cases(counts, mask, r, F, slope, k, threads):
    return {
        "aug_log_tau": lambda: _backend.aug_log_tau(counts, mask, r, threads),
        "dispersion_sums": lambda: _backend.dispersion_sums(counts, mask, r, slope, threads),
        "nb_loglik": lambda: _backend.nb_loglik(counts, mask, F, r, threads),
        "binom_loglik": lambda: _backend.binom_loglik(counts, mask, F, k, threads),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    inputs = make_inputs()
    backends = _backend.available_backends()
    results = {}
    for name in backends:
        _backend.set_backend(name)
        for case, fn in cases(*inputs, args.threads).items():
            results[(case, name)] = min(timeit.repeat(fn, number=1, repeat=args.repeats))
    print(f"{'kernel':<18}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for case in cases(*inputs, args.threads):
        row = f"{case:<18}" + "".join(f"{results[(case, b)] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) > 1:
            row += f"{results[(case, 'python')] / results[(case, 'cython')]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
