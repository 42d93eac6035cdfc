"""Numpy implementations mirroring the signatures in ``_ckernels.pyx``."""
import numpy as np
from scipy import special


def digamma(x):
    return float(special.digamma(x))


def trigamma(x):
    return float(special.polygamma(1, x))


def aug_log_tau(counts, mask, r_mean, out, lo, hi):
    obs = mask[:, :, None, None]
    for n in range(lo, hi):
        val = special.digamma(counts[:, :, n, :] + r_mean[n])
        out[:, :, n, :] = np.where(obs[:, :, 0], val, 0.0)


def dispersion_sums(counts, mask, r_mean, slope, out_digamma, out_curv, lo, hi):
    obs = mask[:, :, None]
    for n in range(lo, hi):
        a = counts[:, :, n, :] + r_mean[n]
        s = slope[:, None, n, :]
        out_digamma[n] = np.sum(np.where(obs, special.digamma(a), 0.0))
        out_curv[n] = np.sum(np.where(obs, s * s * special.polygamma(1, a * s), 0.0))


def nb_loglik(counts, mask, F, r, out, lo, hi):
    obs = mask[:, :, None]
    for n in range(lo, hi):
        y = counts[:, :, n, :].astype(float)
        f = F[:, None, n, :]
        rn = r[n]
        ll = (special.gammaln(y + rn) - special.gammaln(rn) - special.gammaln(y + 1.0)
              + y * f - (y + rn) * np.logaddexp(0.0, f))
        out[n] = np.sum(np.where(obs, ll, 0.0))


def binom_loglik(counts, mask, F, k, out, lo, hi):
    obs = mask[:, :, None]
    for n in range(lo, hi):
        y = counts[:, :, n, :].astype(float)
        kn = k[n]
        if np.any((y > kn) & obs):
            out[n] = -np.inf
            continue
        f = F[:, None, n, :]
        ll = (special.gammaln(kn + 1.0) - special.gammaln(y + 1.0) - special.gammaln(np.maximum(kn - y, 0.0) + 1.0)
              + y * f - kn * np.logaddexp(0.0, f))
        out[n] = np.sum(np.where(obs, ll, 0.0))
