"""Per-step privacy loss, subsampling amplification and five composition rules.

All logarithms are natural. Every accountant consumes the per-step noise
scales ``sigma_t`` at a fixed sampling rate ``q`` and a fixed ``delta``:

* ``basec``  - plain sum of the amplified per-step epsilons;
* ``advc``   - advanced composition on the amplified epsilons;
* ``optc``   - the tighter composition with ``log(e + sqrt(sum eps^2)/delta)``;
* ``zcdp``   - ``sum q^2/sigma^2 + 2 sqrt(sum q^2/sigma^2 * log(1/delta))``;
* ``ma``     - Renyi-DP of the subsampled Gaussian summed over steps and
  converted with ``min_alpha [rdp(alpha) + log(1/delta)/(alpha-1)]``.

Totals are always accumulated step by step in index order through
``_Totals``, so a ledger's running totals and a fresh recomputation from
its steps agree bit for bit.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidParameterError

METHODS = ("basec", "advc", "optc", "zcdp", "ma")
METHOD_LABELS = {"basec": "BaseC", "advc": "AdvC", "optc": "OptC", "zcdp": "zCDP", "ma": "MA"}
DEFAULT_DELTA = 1e-5

# Fractional orders 1.25..64 plus a tail of large integer orders whose
# spacing grows geometrically. The tail matters for runs with little total
# privacy loss, where the conversion term log(1/delta)/(alpha-1) dominates
# at alpha <= 64; a relative spacing of ~10% keeps the optimum within a few
# percent of the best order on a dense grid.
BASE_ORDERS = np.arange(1.25, 64.0 + 1e-9, 0.25)
EXTENDED_ORDERS = np.concatenate([np.arange(72.0, 257.0, 8.0), np.arange(288.0, 1025.0, 32.0),
                                  np.arange(1152.0, 4097.0, 128.0)])
DEFAULT_ORDERS = np.concatenate([BASE_ORDERS, EXTENDED_ORDERS])

LEDGER_COLUMNS = ("t", "sigma_t", "eps_t", "eps_amp_t") + METHODS


class PrivacyConditionWarning(UserWarning):
    """q >= 1/(16 sigma): outside the regime where the MA/zCDP bounds are stated."""


def method_key(name):
    """Normalise 'zCDP', 'OptC', ... to the lower-case keys used here."""
    k = str(name).lower()
    if k not in METHODS:
        raise InvalidParameterError(f"unknown accounting method {name!r}; use one of {METHODS}")
    return k


def _check_delta(delta):
    if not 0.0 < delta < 1.0:
        raise InvalidParameterError(f"delta must lie in (0, 1), got {delta}")


def _check_q(q):
    if not 0.0 < q <= 1.0:
        raise InvalidParameterError(f"sampling rate q must lie in (0, 1], got {q}")


def per_step_epsilon(sigma_t, delta):
    """epsilon of one Gaussian-mechanism step with noise multiplier ``sigma_t``."""
    if not sigma_t > 0.0:
        raise InvalidParameterError(f"sigma_t must be positive, got {sigma_t}")
    _check_delta(delta)
    return math.sqrt(2.0 * math.log(1.25 / delta)) / sigma_t


def amplify(eps, delta, q):
    """Amplification by sampling: ``(log(1 + q(e^eps - 1)), q delta)``."""
    _check_q(q)
    if eps < 0.0:
        raise InvalidParameterError("eps must be non-negative")
    return math.log1p(q * math.expm1(eps)), q * delta


def check_condition(q, sigmas, stacklevel=3):
    """Warn when q >= 1/(16 min sigma); returns True when the condition holds."""
    if len(sigmas) == 0:
        return True
    smin = min(sigmas)
    ok = q < 1.0 / (16.0 * smin)
    if not ok:
        warnings.warn(f"q={q} >= 1/(16*sigma_min) = {1.0 / (16.0 * smin):.6g}; "
                      "MA/zCDP bounds are outside their stated regime",
                      PrivacyConditionWarning, stacklevel=stacklevel)
    return ok


_RDP_CACHE: dict = {}


def rdp_per_step(q, sigma, orders=DEFAULT_ORDERS):
    """Per-step RDP of the subsampled Gaussian, cached on (q, sigma, orders)."""
    orders = np.asarray(orders, dtype=np.float64)
    key = (float(q), float(sigma), orders.tobytes())
    v = _RDP_CACHE.get(key)
    if v is None:
        if len(_RDP_CACHE) > 4096:
            _RDP_CACHE.clear()
        v = kernels.rdp_subsampled_gaussian(float(q), float(sigma), orders)
        v.setflags(write=False)
        _RDP_CACHE[key] = v
    return v


def rdp_to_dp(rdp, delta, orders=DEFAULT_ORDERS):
    """(epsilon, best order) from accumulated RDP values."""
    orders = np.asarray(orders, dtype=np.float64)
    eps = np.asarray(rdp) + math.log(1.0 / delta) / (orders - 1.0)
    k = int(np.argmin(eps))
    return max(float(eps[k]), 0.0), float(orders[k])


@dataclass(frozen=True)
class StepRecord:
    t: int
    sigma_t: float
    eps_t: float
    eps_amp_t: float
    delta: float
    delta_amp_t: float = 0.0


class _Totals:
    """Sequential accumulator shared by the ledger and the compose_* functions."""

    def __init__(self, q, delta, orders):
        self.q, self.delta, self.orders = q, delta, orders
        self.n = 0
        self.base = 0.0
        self.adv_first = 0.0
        self.sq = 0.0
        self.zc = 0.0
        self.rdp = np.zeros(len(orders))

    def copy(self):
        c = _Totals(self.q, self.delta, self.orders)
        c.n, c.base, c.adv_first, c.sq, c.zc = self.n, self.base, self.adv_first, self.sq, self.zc
        c.rdp = self.rdp.copy()
        return c

    def add(self, sigma, eps_amp, with_ma=True):
        self.n += 1
        self.base += eps_amp
        self.adv_first += eps_amp * math.tanh(eps_amp / 2.0)   # (e^e - 1) e / (e^e + 1)
        self.sq += eps_amp * eps_amp
        self.zc += self.q * self.q / (sigma * sigma)
        if with_ma:
            self.rdp = self.rdp + rdp_per_step(self.q, sigma, self.orders)

    def basec(self):
        return self.base

    def advc(self):
        return self.adv_first + math.sqrt(2.0 * self.sq * math.log(1.0 / self.delta))

    def optc(self):
        inner = math.log(math.e + math.sqrt(self.sq) / self.delta)
        return self.adv_first + math.sqrt(2.0 * self.sq * inner) if self.n else 0.0

    def zcdp(self):
        return self.zc + 2.0 * math.sqrt(self.zc * math.log(1.0 / self.delta))

    def ma(self):
        if self.n == 0:
            return 0.0
        return rdp_to_dp(self.rdp, self.delta, self.orders)[0]

    def value(self, method):
        return getattr(self, method)()

    def as_dict(self):
        return {m: self.value(m) for m in METHODS}


@dataclass
class BudgetLedger:
    """Ordered per-step records with running totals under every method."""
    q: float
    delta: float = DEFAULT_DELTA
    orders: np.ndarray = field(default_factory=lambda: DEFAULT_ORDERS.copy())
    steps: list = field(default_factory=list)
    history: list = field(default_factory=list)  # running totals after each step

    def __post_init__(self):
        _check_q(self.q)
        _check_delta(self.delta)
        self.orders = np.asarray(self.orders, dtype=np.float64)
        self._acc = _Totals(self.q, self.delta, self.orders)
        self._warned = False
        pending, self.steps, self.history = list(self.steps), [], []
        for s in pending:
            self.append(s.sigma_t)

    def __len__(self):
        return len(self.steps)

    def _record(self, sigma_t):
        eps = per_step_epsilon(sigma_t, self.delta)
        eps_amp, d_amp = amplify(eps, self.delta, self.q)
        return StepRecord(len(self.steps), float(sigma_t), eps, eps_amp, self.delta, d_amp)

    def _maybe_warn(self, sigma_t):
        if not self._warned and not self.q < 1.0 / (16.0 * sigma_t):
            self._warned = True
            check_condition(self.q, [sigma_t], stacklevel=4)

    def append(self, sigma_t) -> StepRecord:
        rec = self._record(sigma_t)
        self._maybe_warn(sigma_t)
        self._acc.add(rec.sigma_t, rec.eps_amp_t)
        self.steps.append(rec)
        self.history.append(self._acc.as_dict())
        return rec

    def totals_if(self, sigma_t) -> dict:
        """Totals after one more step at ``sigma_t``, without recording it."""
        rec = self._record(sigma_t)
        acc = self._acc.copy()
        acc.add(rec.sigma_t, rec.eps_amp_t)
        return acc.as_dict()

    @property
    def totals(self) -> dict:
        return self._acc.as_dict()

    @property
    def sigmas(self):
        return [s.sigma_t for s in self.steps]

    def rows(self):
        for rec, tot in zip(self.steps, self.history):
            yield (rec.t, rec.sigma_t, rec.eps_t, rec.eps_amp_t) + tuple(tot[m] for m in METHODS)

    def write_csv(self, path):
        """Running totals per step; floats written with ``repr`` (full precision)."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LEDGER_COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _from_ledger(ledger, method):
    acc = _Totals(ledger.q, ledger.delta, ledger.orders)
    for s in ledger.steps:
        acc.add(s.sigma_t, s.eps_amp_t, with_ma=(method == "ma"))
    return acc.value(method)


def compose_base(ledger: BudgetLedger) -> float:
    return _from_ledger(ledger, "basec")


def compose_advanced(ledger: BudgetLedger) -> float:
    return _from_ledger(ledger, "advc")


def compose_optimal(ledger: BudgetLedger) -> float:
    return _from_ledger(ledger, "optc")


def _sigma_totals(q, sigma_list, delta, method, orders):
    _check_q(q)
    _check_delta(delta)
    sigmas = [float(s) for s in sigma_list]
    if not sigmas:
        raise InvalidParameterError("empty sigma list")
    if any(not s > 0.0 for s in sigmas):
        raise InvalidParameterError("every sigma_t must be positive")
    check_condition(q, sigmas, stacklevel=4)
    acc = _Totals(q, delta, np.asarray(orders, dtype=np.float64))
    for s in sigmas:
        eps_amp = amplify(per_step_epsilon(s, delta), delta, q)[0]
        acc.add(s, eps_amp, with_ma=(method == "ma"))
    return acc.value(method)


def compose_zcdp(q, sigma_list, delta=DEFAULT_DELTA) -> float:
    return _sigma_totals(q, sigma_list, delta, "zcdp", DEFAULT_ORDERS)


def compose_ma(q, sigma_list, delta=DEFAULT_DELTA, orders=DEFAULT_ORDERS) -> float:
    return _sigma_totals(q, sigma_list, delta, "ma", orders)


def ledger_from_sigmas(q, sigma_list, delta=DEFAULT_DELTA, orders=DEFAULT_ORDERS):
    led = BudgetLedger(q, delta, orders)
    for s in sigma_list:
        led.append(s)
    return led


def compose_all(q, sigma_list, delta=DEFAULT_DELTA, orders=DEFAULT_ORDERS) -> dict:
    """Totals under all five methods; an empty schedule costs nothing."""
    _check_q(q)
    _check_delta(delta)
    if len(sigma_list) == 0:
        return {m: 0.0 for m in METHODS}
    return ledger_from_sigmas(q, sigma_list, delta, orders).totals
