# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_pykernels``.

Same signatures, same arithmetic order where it matters for reproducibility.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, log, log1p, exp, erfc, ceil, lgamma, M_PI, INFINITY
from libc.stdint cimport uint64_t

cnp.import_array()

BACKEND = "cython"

cdef uint64_t GAMMA = 0x9E3779B97F4A7C15ULL
cdef uint64_t MUL1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MUL2 = 0x94D049BB133111EBULL
cdef double LOG_TERM_CUTOFF = -50.0
cdef double ERFC_TAIL_X = 26.0


cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * MUL1
    z = (z ^ (z >> 27)) * MUL2
    return z ^ (z >> 31)


cdef inline double _u01(uint64_t key, uint64_t j) noexcept nogil:
    return <double>(_mix(key + (j + 1) * GAMMA) >> 11) * (1.0 / 9007199254740992.0)


def uniform_fill(key, Py_ssize_t n):
    cdef uint64_t k = <uint64_t>key
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n)
    cdef double[::1] o = out
    cdef Py_ssize_t j
    with nogil:
        for j in range(n):
            o[j] = _u01(k, <uint64_t>j)
    return out


def gaussian_fill(key, Py_ssize_t n, double stddev):
    if stddev == 0.0 or n == 0:
        return np.zeros(n)
    cdef uint64_t k = <uint64_t>key
    cdef Py_ssize_t m = (n + 1) // 2
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(2 * m)
    cdef double[::1] o = out
    cdef Py_ssize_t p
    cdef double u1, u2, r, theta
    with nogil:
        for p in range(m):
            u1 = _u01(k, <uint64_t>(2 * p))
            u2 = _u01(k, <uint64_t>(2 * p + 1))
            r = sqrt(-2.0 * log(1.0 - u1))
            theta = (2.0 * M_PI) * u2
            o[2 * p] = r * cos(theta) * stddev
            o[2 * p + 1] = r * sin(theta) * stddev
    return out[:n]


cdef inline double _log_erfc(double x) noexcept nogil:
    if x <= ERFC_TAIL_X:
        return log(erfc(x))
    return (-0.5 * log(M_PI) - log(x) - x * x - 0.5 / (x * x)
            + 0.625 / (x * x * x * x) - 37.0 / 24.0 / (x ** 6) + 353.0 / 64.0 / (x ** 8))


cdef inline double _log_add(double a, double b) noexcept nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


cdef inline double _log_sub(double a, double b) noexcept nogil:
    # log(e^a - e^b); clamps to -inf when b >= a
    if b == -INFINITY:
        return a
    if b >= a:
        return -INFINITY
    return a + log1p(-exp(b - a))


cdef double _log_a_int(double q, double sigma, long alpha) noexcept nogil:
    cdef long k
    cdef double lq = log(q), l1q = log1p(-q), s2 = 2.0 * sigma * sigma
    cdef double la = lgamma(alpha + 1.0), acc = -INFINITY, t
    for k in range(alpha + 1):
        t = (la - lgamma(k + 1.0) - lgamma(<double>(alpha - k) + 1.0)
             + k * lq + (alpha - k) * l1q + (<double>k * k - k) / s2)
        acc = _log_add(acc, t)
    return acc


cdef double _log_a_frac(double q, double sigma, double alpha) noexcept nogil:
    cdef double z0 = sigma * sigma * log(1.0 / q - 1.0) + 0.5
    cdef double lq = log(q), l1q = log1p(-q), s2 = 2.0 * sigma * sigma
    cdef double rs = sqrt(2.0) * sigma
    cdef double top = ceil(alpha)
    cdef double pos0 = -INFINITY, pos1 = -INFINITY, neg0 = -INFINITY, neg1 = -INFINITY
    cdef double la = lgamma(alpha + 1.0), lc, i = 0.0, j, t0, t1, ls0, ls1
    cdef long n = 0
    while True:
        j = alpha - i
        lc = la - lgamma(i + 1.0) - lgamma(j + 1.0)
        t0 = lc + i * lq + j * l1q
        t1 = lc + j * lq + i * l1q
        ls0 = t0 + (i * i - i) / s2 + log(0.5) + _log_erfc((i - z0) / rs)
        ls1 = t1 + (j * j - j) / s2 + log(0.5) + _log_erfc((z0 - j) / rs)
        if i <= top or (<long>(i - top)) % 2 == 0:
            pos0 = _log_add(pos0, ls0)
            pos1 = _log_add(pos1, ls1)
        else:
            neg0 = _log_add(neg0, ls0)
            neg1 = _log_add(neg1, ls1)
        if i >= top and ls0 < LOG_TERM_CUTOFF and ls1 < LOG_TERM_CUTOFF:
            break
        i += 1.0
        n += 1
        if n > 10000000:
            return INFINITY
    return _log_add(_log_sub(pos0, neg0), _log_sub(pos1, neg1))


def rdp_subsampled_gaussian(double q, double sigma, orders):
    cdef double[::1] a = np.ascontiguousarray(orders, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], idx
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double v
    with nogil:
        for idx in range(n):
            if q == 0.0:
                v = 0.0
            elif q == 1.0:
                v = a[idx] / (2.0 * sigma * sigma)
            elif a[idx] == <double>(<long>a[idx]):
                v = _log_a_int(q, sigma, <long>a[idx]) / (a[idx] - 1.0)
            else:
                v = _log_a_frac(q, sigma, a[idx]) / (a[idx] - 1.0)
            o[idx] = v if v > 0.0 else 0.0
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("RDP series did not converge")
    return out
