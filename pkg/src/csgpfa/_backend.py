"""Select the compiled kernels when available, else the numpy fallback.

The wrappers split neurons into contiguous chunks for a thread pool. Each
kernel reduces per neuron in a fixed order, so results do not depend on the
number of threads.
"""
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_active = _ckernels if _ckernels is not None else _pykernels


def available_backends():
    return ["cython", "python"] if _ckernels is not None else ["python"]


def backend_name():
    return "cython" if _active is _ckernels else "python"


def set_backend(name):
    """Switch between ``"cython"`` and ``"python"`` kernels."""
    global _active
    if name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built")
        _active = _ckernels
    elif name == "python":
        _active = _pykernels
    else:
        raise ValueError(f"unknown backend {name!r}")


def default_threads():
    return os.cpu_count() or 1


def _run(fn, N, threads, *args):
    threads = max(1, min(int(threads or 1), N))
    if threads == 1:
        fn(*args, 0, N)
        return
    bounds = np.linspace(0, N, threads + 1).astype(int)
    with ThreadPoolExecutor(threads) as pool:
        futures = [pool.submit(fn, *args, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:])]
        for f in futures:
            f.result()


def _prep(counts, mask):
    return np.ascontiguousarray(counts, dtype=np.int64), np.ascontiguousarray(mask, dtype=np.uint8)


def aug_log_tau(counts, mask, r_mean, threads=1):
    counts, mask = _prep(counts, mask)
    out = np.empty(counts.shape)
    _run(_active.aug_log_tau, counts.shape[2], threads, counts, mask,
         np.ascontiguousarray(r_mean, dtype=float), out)
    return out


def dispersion_sums(counts, mask, r_mean, slope, threads=1):
    counts, mask = _prep(counts, mask)
    N = counts.shape[2]
    out_d = np.zeros(N)
    out_c = np.zeros(N)
    _run(_active.dispersion_sums, N, threads, counts, mask, np.ascontiguousarray(r_mean, dtype=float),
         np.ascontiguousarray(slope, dtype=float), out_d, out_c)
    return out_d, out_c


def dispersion_sums_range(counts, mask, r_mean, slope, out_d, out_c, lo, hi):
    """Unthreaded call on prepared arrays for neurons ``lo <= n < hi``."""
    _active.dispersion_sums(counts, mask, r_mean, slope, out_d, out_c, lo, hi)


def nb_loglik(counts, mask, F, r, threads=1):
    counts, mask = _prep(counts, mask)
    out = np.zeros(counts.shape[2])
    _run(_active.nb_loglik, counts.shape[2], threads, counts, mask,
         np.ascontiguousarray(F, dtype=float), np.ascontiguousarray(r, dtype=float), out)
    return out


def binom_loglik(counts, mask, F, k, threads=1):
    counts, mask = _prep(counts, mask)
    out = np.zeros(counts.shape[2])
    _run(_active.binom_loglik, counts.shape[2], threads, counts, mask,
         np.ascontiguousarray(F, dtype=float), np.ascontiguousarray(k, dtype=float), out)
    return out
