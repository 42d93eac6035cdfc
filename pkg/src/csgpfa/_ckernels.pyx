# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Per-observation loops over (condition, trial, neuron, bin).

Every function reduces into per-neuron slots for neurons ``lo <= n < hi`` in a
fixed loop order, so chunking neurons across threads never changes results.
"""
from libc.math cimport log, log1p, exp, lgamma, INFINITY

ctypedef long long i64


cdef inline double _digamma(double x) noexcept nogil:
    cdef double res = 0.0, inv, inv2
    while x < 10.0:
        res -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    res += log(x) - 0.5 * inv - inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (
        1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (
            691.0 / 32760 - inv2 / 12.0))))))
    return res


cdef inline double _trigamma(double x) noexcept nogil:
    cdef double res = 0.0, inv, inv2
    while x < 10.0:
        res += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    res += inv + 0.5 * inv2 + inv * inv2 * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (
        1.0 / 42 - inv2 * (1.0 / 30 - inv2 * (5.0 / 66 - inv2 * (
            691.0 / 2730 - inv2 * 7.0 / 6))))))
    return res


cdef inline double _softplus(double f) noexcept nogil:
    if f > 0:
        return f + log1p(exp(-f))
    return log1p(exp(f))


def digamma(double x):
    return _digamma(x)


def trigamma(double x):
    return _trigamma(x)


def aug_log_tau(const i64[:, :, :, ::1] counts, const unsigned char[:, ::1] mask,
                const double[::1] r_mean, double[:, :, :, ::1] out, Py_ssize_t lo, Py_ssize_t hi):
    """out[m, j, n, t] = digamma(y + E[r_n]) on observed trials, 0 elsewhere."""
    cdef Py_ssize_t M = counts.shape[0], R = counts.shape[1], T = counts.shape[3]
    cdef Py_ssize_t m, j, n, t
    with nogil:
        for m in range(M):
            for j in range(R):
                for n in range(lo, hi):
                    if mask[m, j]:
                        for t in range(T):
                            out[m, j, n, t] = _digamma(counts[m, j, n, t] + r_mean[n])
                    else:
                        for t in range(T):
                            out[m, j, n, t] = 0.0


def dispersion_sums(const i64[:, :, :, ::1] counts, const unsigned char[:, ::1] mask,
                    const double[::1] r_mean, const double[:, :, ::1] slope,
                    double[::1] out_digamma, double[::1] out_curv, Py_ssize_t lo, Py_ssize_t hi):
    """Per-neuron sums of digamma(y + r) and slope^2 * trigamma((y + r) * slope)."""
    cdef Py_ssize_t M = counts.shape[0], R = counts.shape[1], T = counts.shape[3]
    cdef Py_ssize_t m, j, n, t
    cdef double a, s, acc_d, acc_c
    with nogil:
        for n in range(lo, hi):
            acc_d = 0.0
            acc_c = 0.0
            for m in range(M):
                for j in range(R):
                    if not mask[m, j]:
                        continue
                    for t in range(T):
                        a = counts[m, j, n, t] + r_mean[n]
                        s = slope[m, n, t]
                        acc_d += _digamma(a)
                        acc_c += s * s * _trigamma(a * s)
            out_digamma[n] = acc_d
            out_curv[n] = acc_c


def nb_loglik(const i64[:, :, :, ::1] counts, const unsigned char[:, ::1] mask,
              const double[:, :, ::1] F, const double[::1] r, double[::1] out,
              Py_ssize_t lo, Py_ssize_t hi):
    """Per-neuron sum of negative-binomial log pmf at linear predictor F."""
    cdef Py_ssize_t M = counts.shape[0], R = counts.shape[1], T = counts.shape[3]
    cdef Py_ssize_t m, j, n, t
    cdef double y, f, rn, acc, lgr
    with nogil:
        for n in range(lo, hi):
            acc = 0.0
            rn = r[n]
            lgr = lgamma(rn)
            for m in range(M):
                for j in range(R):
                    if not mask[m, j]:
                        continue
                    for t in range(T):
                        y = counts[m, j, n, t]
                        f = F[m, n, t]
                        acc += lgamma(y + rn) - lgr - lgamma(y + 1.0) + y * f - (y + rn) * _softplus(f)
            out[n] = acc


def binom_loglik(const i64[:, :, :, ::1] counts, const unsigned char[:, ::1] mask,
                 const double[:, :, ::1] F, const double[::1] k, double[::1] out,
                 Py_ssize_t lo, Py_ssize_t hi):
    """Per-neuron sum of binomial log pmf; -inf when a count exceeds k."""
    cdef Py_ssize_t M = counts.shape[0], R = counts.shape[1], T = counts.shape[3]
    cdef Py_ssize_t m, j, n, t
    cdef double y, f, kn, acc, lgk
    with nogil:
        for n in range(lo, hi):
            acc = 0.0
            kn = k[n]
            lgk = lgamma(kn + 1.0)
            for m in range(M):
                for j in range(R):
                    if not mask[m, j]:
                        continue
                    for t in range(T):
                        y = counts[m, j, n, t]
                        if y > kn:
                            acc = -INFINITY
                            continue
                        f = F[m, n, t]
                        acc += lgk - lgamma(y + 1.0) - lgamma(kn - y + 1.0) + y * f - kn * _softplus(f)
            out[n] = acc
