"""Pure-Python (numpy) implementations of the hot kernels.

These are the reference versions. ``_ckernels.pyx`` implements the same
functions in Cython; ``dynadp.kernels`` picks one at import time.
"""
import math

import numpy as np
from scipy.special import erfc as _erfc
from scipy.special import gammaln

BACKEND = "python"

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MUL1 = 0xBF58476D1CE4E5B9
MUL2 = 0x94D049BB133111EB

# log-space cutoff below which series terms are dropped; the tail of the
# fractional-order series alternates, so the error is below exp(cutoff)
LOG_TERM_CUTOFF = -50.0
# above this argument libm erfc loses range; switch to the tail expansion
ERFC_TAIL_X = 26.0


def mix64(z):
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MUL1) & MASK64
    z = ((z ^ (z >> 27)) * MUL2) & MASK64
    return z ^ (z >> 31)


def derive_key(*words):
    """Fold integer words into a 64-bit stream key."""
    k = 0x6A09E667F3BCC909
    for w in words:
        k = mix64(((k + GAMMA) & MASK64) ^ mix64((int(w) + GAMMA) & MASK64))
    return k


def _mix64_array(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MUL2)
    return z ^ (z >> np.uint64(31))


def uniform_fill(key, n):
    """``n`` doubles in [0, 1); draw j depends only on (key, j)."""
    j = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + j * np.uint64(GAMMA)
        z = _mix64_array(z)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def gaussian_fill(key, n, stddev):
    """``n`` N(0, stddev^2) draws via Box-Muller on consecutive uniform pairs."""
    if stddev == 0.0 or n == 0:
        return np.zeros(n)
    m = (n + 1) // 2
    u = uniform_fill(key, 2 * m)
    r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
    theta = (2.0 * math.pi) * u[1::2]
    out = np.empty(2 * m)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n] * stddev


def log_erfc(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    tail = x > ERFC_TAIL_X
    out[~tail] = np.log(_erfc(x[~tail]))
    xt = x[tail]
    out[tail] = (-0.5 * math.log(math.pi) - np.log(xt) - xt**2 - 0.5 * xt**-2
                 + 0.625 * xt**-4 - 37.0 / 24.0 * xt**-6 + 353.0 / 64.0 * xt**-8)
    return out


def _signed_logsumexp(logs, signs):
    # log(sum(signs * exp(logs))) with log1p around the dominant term
    k = int(np.argmax(logs))
    m = logs[k]
    if m == -np.inf:
        return -np.inf
    w = signs * np.exp(logs - m)
    rest = (np.sum(w[:k]) + np.sum(w[k + 1:])) / signs[k]
    if signs[k] < 0 or rest <= -1.0:
        return -np.inf
    return m + math.log1p(rest)


def _log_a_int(q, sigma, alpha):
    k = np.arange(alpha + 1, dtype=np.float64)
    logs = (gammaln(alpha + 1.0) - gammaln(k + 1.0) - gammaln(alpha - k + 1.0)
            + k * math.log(q) + (alpha - k) * math.log1p(-q)
            + (k * k - k) / (2.0 * sigma * sigma))
    return _signed_logsumexp(logs, np.ones_like(logs))


def _log_a_frac(q, sigma, alpha):
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    top = math.ceil(alpha)
    s0, s1, sg = [], [], []
    start = 0
    while True:
        i = np.arange(start, start + 64, dtype=np.float64)
        j = alpha - i
        log_coef = gammaln(alpha + 1.0) - gammaln(i + 1.0) - gammaln(j + 1.0)
        t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        e0 = math.log(0.5) + log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        e1 = math.log(0.5) + log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        ls0 = t0 + (i * i - i) / (2.0 * sigma * sigma) + e0
        ls1 = t1 + (j * j - j) / (2.0 * sigma * sigma) + e1
        sign = np.where(i > top, (-1.0) ** (i - top), 1.0)
        s0.append(ls0)
        s1.append(ls1)
        sg.append(sign)
        # same stopping rule as the sequential kernel: stop after the first
        # index >= ceil(alpha) whose two terms both fall under the cutoff
        idx = np.nonzero((np.maximum(ls0, ls1) < LOG_TERM_CUTOFF) & (i >= top))[0]
        if idx.size:
            stop = int(idx[0]) + 1
            s0[-1], s1[-1], sg[-1] = ls0[:stop], ls1[:stop], sign[:stop]
            break
        start += 64
        if start > 10_000_000:
            raise FloatingPointError("RDP series did not converge")
    ls0 = np.concatenate(s0)
    ls1 = np.concatenate(s1)
    sg = np.concatenate(sg)
    a0 = _signed_logsumexp(ls0, sg)
    a1 = _signed_logsumexp(ls1, sg)
    return np.logaddexp(a0, a1)


def rdp_subsampled_gaussian(q, sigma, orders):
    """Per-step RDP of the Poisson-subsampled Gaussian at each order."""
    orders = np.asarray(orders, dtype=np.float64)
    out = np.empty(orders.shape)
    for n, a in enumerate(orders):
        if q == 0.0:
            out[n] = 0.0
        elif q == 1.0:
            out[n] = a / (2.0 * sigma * sigma)
        elif float(a).is_integer():
            out[n] = _log_a_int(q, sigma, int(a)) / (a - 1.0)
        else:
            out[n] = _log_a_frac(q, sigma, float(a)) / (a - 1.0)
    return np.maximum(out, 0.0)
