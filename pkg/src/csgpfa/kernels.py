"""Squared-exponential kernels and jittered Cholesky factorisation."""
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import NumericalError

DEFAULT_JITTER = 1e-8
JITTER_STEPS = 7  # base * 10**k for k = 0..6


@dataclass
class KernelGrams:
    """Cholesky factor of ``K + jitter_used * I``."""

    K: np.ndarray
    chol: np.ndarray
    jitter_used: float
    log_det: float

    @property
    def K_eff(self):
        return self.K + self.jitter_used * np.eye(self.K.shape[0])

    def solve(self, B):
        return linalg.cho_solve((self.chol, True), B, check_finite=False)

    def inverse(self):
        return self.solve(np.eye(self.K.shape[0]))


def _as_points(A):
    A = np.asarray(A, dtype=float)
    return A[:, None] if A.ndim == 1 else A


def se_gram(A, B, lengthscales):
    """Unit-variance SE Gram ``exp(-sum_k (A_ik - B_jk)^2 / (2 l_k^2))``."""
    A = _as_points(A)
    B = _as_points(B)
    ls = np.broadcast_to(np.asarray(lengthscales, dtype=float), (A.shape[1],))
    if np.any(~(ls > 0)) or np.any(~np.isfinite(ls)):
        raise ValueError(f"lengthscales must be positive and finite, got {ls}")
    diff = (A[:, None, :] - B[None, :, :]) / ls
    return np.exp(-0.5 * np.sum(diff * diff, axis=-1))


def se_gram_grad_loglengthscale(A, lengthscales):
    """dK/d log l_k for the training Gram, shape (C, P, P)."""
    A = _as_points(A)
    ls = np.broadcast_to(np.asarray(lengthscales, dtype=float), (A.shape[1],))
    K = se_gram(A, A, ls)
    sq = (A[:, None, :] - A[None, :, :]) ** 2 / ls**2
    return np.moveaxis(sq, -1, 0) * K[None]


def factorize(K, base_jitter=DEFAULT_JITTER, min_jitter=0.0):
    """Cholesky of ``K + j I`` for the smallest j in {0, base * 10**k}.

    ``min_jitter`` drops ladder levels below it (a positive value is tried
    first), so the nugget never falls under a fixed floor.
    """
    K = np.asarray(K, dtype=float)
    if not np.all(np.isfinite(K)):
        raise NumericalError("matrix contains non-finite entries")
    K = 0.5 * (K + K.T)
    eye = np.eye(K.shape[0])
    ladder = [0.0] + [base_jitter * 10.0**k for k in range(JITTER_STEPS)]
    ladder = [min_jitter] + [j for j in ladder if j > min_jitter] if min_jitter > 0 else ladder
    for jitter in ladder:
        try:
            L = linalg.cholesky(K + jitter * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if np.all(np.diag(L) > 0):
            return KernelGrams(K, L, jitter, 2.0 * float(np.sum(np.log(np.diag(L)))))
    raise NumericalError(
        f"Cholesky failed up to jitter {base_jitter * 10.0 ** (JITTER_STEPS - 1):g}"
    )


def time_points(T):
    """Bin centres in bin units; time lengthscales are expressed in bins."""
    return np.arange(T, dtype=float)[:, None]


def delta_gram(A, B):
    """Kronecker-delta kernel: 1 where points coincide exactly."""
    A = _as_points(A)
    B = _as_points(B)
    return np.all(A[:, None, :] == B[None, :, :], axis=-1).astype(float)
