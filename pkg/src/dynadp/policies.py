"""Decay schedules, per-example clipping and sensitivity strategies.

A ``DecaySchedule`` drives either the clipping bound ``C_t`` or the noise
scale ``sigma_t``. Four shapes are available:

* ``constant``    - ``base``;
* ``linear``      - ``max(floor, base * (1 - gamma * t))``;
* ``exponential`` - ``max(floor, base * exp(-gamma * t))``;
* ``cyclic``      - a decaying triangular wave, see ``DecaySchedule.value``.

Clipping treats each layer's weight and bias gradient as a single vector
and rescales it by ``min(1, C / ||g||)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .model import GradientSet
from .ndcore import l2_norm

NOISE_FLOOR = 1.0


class ScheduleKind(str, enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    EXPONENTIAL = "exponential"
    CYCLIC = "cyclic"


@dataclass(frozen=True)
class DecaySchedule:
    """A non-increasing (or, for ``cyclic``, envelope-decaying) schedule.

    ``gamma`` is a float for ``linear``/``exponential`` and a pair
    ``(gamma3, gamma4)`` for ``cyclic``: within a cycle the value drops by
    the fraction ``gamma3 * V`` of its envelope, and the envelope shrinks by
    the factor ``1 - 2 * gamma4 * V`` every full cycle of ``2V`` steps.
    """
    kind: ScheduleKind = ScheduleKind.CONSTANT
    base: float = 1.0
    gamma: object = 0.0
    floor: float = None
    cycle_len: int = None

    def __post_init__(self):
        kind = ScheduleKind(self.kind)
        object.__setattr__(self, "kind", kind)
        base = float(self.base)
        if not (base > 0.0 and math.isfinite(base)):
            raise InvalidParameterError(f"schedule base must be positive, got {self.base}")
        object.__setattr__(self, "base", base)
        floor = base if self.floor is None else float(self.floor)
        if not 0.0 < floor <= base:
            raise InvalidParameterError(f"schedule floor must lie in (0, base], got {self.floor}")
        object.__setattr__(self, "floor", floor)
        if kind is ScheduleKind.CYCLIC:
            try:
                g3, g4 = (float(g) for g in self.gamma)
            except TypeError:
                raise InvalidParameterError("cyclic schedules take gamma=(gamma3, gamma4)") from None
            v = self.cycle_len
            if v is None or int(v) != v or v < 1:
                raise InvalidParameterError("cyclic schedules need a positive integer cycle_len")
            object.__setattr__(self, "cycle_len", int(v))
            if not 0.0 <= g3 * v <= 1.0:
                raise InvalidParameterError("cyclic gamma3 must satisfy 0 <= gamma3*V <= 1")
            if not 0.0 <= 2.0 * g4 * v < 1.0:
                raise InvalidParameterError("cyclic gamma4 must satisfy 0 <= 2*gamma4*V < 1")
            object.__setattr__(self, "gamma", (g3, g4))
        else:
            g = float(self.gamma)
            if not (g >= 0.0 and math.isfinite(g)):
                raise InvalidParameterError(f"decay gamma must be finite and >= 0, got {self.gamma}")
            object.__setattr__(self, "gamma", g)

    def value(self, t) -> float:
        if t < 0:
            raise InvalidParameterError(f"schedule evaluated at negative t={t}")
        k = self.kind
        if k is ScheduleKind.CONSTANT:
            return self.base
        if k is ScheduleKind.LINEAR:
            return max(self.floor, self.base * (1.0 - self.gamma * t))
        if k is ScheduleKind.EXPONENTIAL:
            return max(self.floor, self.base * math.exp(-self.gamma * t))
        return self._cyclic(t)

    def _envelope(self, cycle):
        g4 = self.gamma[1]
        return max(self.floor, self.base * (1.0 - 2.0 * g4 * self.cycle_len) ** cycle)

    def _cyclic(self, t):
        # Half-cycle h: even h descends from the envelope E_k to the trough,
        # odd h climbs back towards the next cycle's (smaller) envelope.
        v = self.cycle_len
        h, r = divmod(int(t), v)
        frac = (r + (t - int(t))) / v
        k = h // 2
        top = self._envelope(k)
        low = max(self.floor, top * (1.0 - self.gamma[0] * v))
        if h % 2 == 0:
            val = top + (low - top) * frac
        else:
            val = low + (self._envelope(k + 1) - low) * frac
        return min(self.base, max(self.floor, val))

    def to_dict(self):
        d = {"kind": self.kind.value, "base": self.base, "floor": self.floor}
        if self.kind is ScheduleKind.CYCLIC:
            d["gamma"] = list(self.gamma)
            d["cycle_len"] = self.cycle_len
        else:
            d["gamma"] = self.gamma
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"kind", "base", "gamma", "floor", "cycle_len"}
        if unknown:
            raise InvalidParameterError(f"unknown schedule keys {sorted(unknown)}")
        return cls(d.get("kind", "constant"), d["base"], d.get("gamma", 0.0),
                   d.get("floor"), d.get("cycle_len"))


def schedule_value(s: DecaySchedule, t) -> float:
    return s.value(t)


def constant(base):
    return DecaySchedule(ScheduleKind.CONSTANT, base)


def linear_to(base, target, T, floor=None):
    """Linear decay reaching ``target`` at ``t = T`` (floor defaults to target)."""
    if not 0.0 < target <= base or T < 1:
        raise InvalidParameterError("linear_to needs 0 < target <= base and T >= 1")
    return DecaySchedule(ScheduleKind.LINEAR, base, (1.0 - target / base) / T,
                         target if floor is None else floor)


def exponential_to(base, target, T, floor=None):
    """Exponential decay reaching ``target`` at ``t = T`` (floor defaults to target)."""
    if not 0.0 < target <= base or T < 1:
        raise InvalidParameterError("exponential_to needs 0 < target <= base and T >= 1")
    return DecaySchedule(ScheduleKind.EXPONENTIAL, base, math.log(base / target) / T,
                         target if floor is None else floor)


def default_floor(base, for_noise):
    """Half the base for clipping bounds; 1.0 (or base, if smaller) for noise scales."""
    return min(base, NOISE_FLOOR) if for_noise else base / 2.0


# ------------------------------------------------------------------ clipping

def clip_per_example(g: GradientSet, C_t) -> GradientSet:
    """Scale each layer by ``min(1, C_t / ||layer||)``.

    Layers already within the bound are returned untouched (same arrays).
    A scaled layer is nudged down ulp by ulp until its recomputed norm is
    ``<= C_t``, which makes clipping exactly idempotent.
    """
    if not C_t > 0.0:
        raise InvalidParameterError(f"clipping bound must be positive, got {C_t}")
    ws, bs = list(g.weights), list(g.biases)
    for l in range(g.num_layers):
        n = l2_norm(g.layer_vector(l))
        if n <= C_t:
            continue
        f = C_t / n
        while True:
            w, b = g.weights[l] * f, g.biases[l] * f
            if l2_norm(np.concatenate([w.ravel(), b])) <= C_t:
                break
            f = math.nextafter(f, 0.0)
        ws[l], bs[l] = w, b
    return GradientSet(tuple(ws), tuple(bs))


def clip_factors(norms, C_t):
    """Vectorised ``min(1, C/norm)`` for an array of layer norms."""
    norms = np.asarray(norms, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(norms > C_t, C_t / np.where(norms > 0, norms, 1.0), 1.0)


# --------------------------------------------------------------- sensitivity

class SensitivityKind(str, enum.Enum):
    FIXED_C = "fixed_C"
    L2_MAX = "l2_max"
    COMBINED = "combined"


class Scope(str, enum.Enum):
    PER_LAYER = "per_layer"
    GLOBAL = "global"


@dataclass(frozen=True)
class SensitivityStrategy:
    """How S_t is chosen. ``combined`` is l2-max under a decaying C_t."""
    kind: SensitivityKind = SensitivityKind.FIXED_C
    scope: Scope = Scope.PER_LAYER

    def __post_init__(self):
        object.__setattr__(self, "kind", SensitivityKind(self.kind))
        object.__setattr__(self, "scope", Scope(self.scope))

    def to_dict(self):
        return {"kind": self.kind.value, "scope": self.scope.value}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "fixed_C"), d.get("scope", "per_layer"))


def sensitivity_from_norms(strategy: SensitivityStrategy, clipped_norms, C_t):
    """S_t from a ``(B, M)`` array of clipped per-example layer norms.

    Returns a length-M vector for ``per_layer`` scope and a float for
    ``global`` scope (the largest per-layer value). Always ``<= C_t``.
    """
    norms = np.atleast_2d(np.asarray(clipped_norms, dtype=np.float64))
    if norms.shape[0] == 0:
        raise InvalidParameterError("sensitivity of an empty batch")
    m = norms.shape[1]
    if strategy.kind is SensitivityKind.FIXED_C:
        per_layer = np.full(m, float(C_t))
    else:
        per_layer = np.minimum(np.max(norms, axis=0), C_t)
    if strategy.scope is Scope.GLOBAL:
        return float(np.max(per_layer))
    return per_layer


def sensitivity(strategy: SensitivityStrategy, clipped_batch, C_t):
    """S_t for a list of clipped ``GradientSet`` objects."""
    if len(clipped_batch) == 0:
        raise InvalidParameterError("sensitivity of an empty batch")
    norms = np.array([g.layer_norms() for g in clipped_batch])
    return sensitivity_from_norms(strategy, norms, C_t)


# ------------------------------------------------------------------- presets

PRESETS = ("baseline", "dynS[C_decay]", "dynS[l2-max]", "dynS", "dynSigma",
           "dyn[S,sigma]", "nonprivate")


def preset(name, C0=4.0, sigma0=6.0, T=10000, sigma_decay="exponential",
           scope=Scope.PER_LAYER):
    """Return ``(C_schedule, sigma_schedule, strategy)`` for a named algorithm.

    Clipping decays linearly from C0 to C0/2 over T steps. Noise decays
    from sigma0 to sigma0/2 over T steps (never below 1.0) with the shape
    given by ``sigma_decay``. ``nonprivate`` returns ``None`` for all three.
    """
    if name == "nonprivate":
        return None, None, None
    if name not in PRESETS:
        raise InvalidParameterError(f"unknown preset {name!r}; choose from {PRESETS}")
    c_const = constant(C0)
    c_decay = linear_to(C0, C0 / 2.0, T)
    s_const = constant(sigma0)
    s_target = max(sigma0 / 2.0, min(sigma0, NOISE_FLOOR))
    if sigma_decay == "linear":
        s_decay = linear_to(sigma0, s_target, T)
    elif sigma_decay == "exponential":
        s_decay = exponential_to(sigma0, s_target, T)
    elif sigma_decay == "cyclic":
        # five full cycles over T; the envelope halves over those cycles and
        # each cycle dips to half its envelope
        v = max(1, T // 10)
        shrink = 1.0 - 0.5 ** (1.0 / 5.0)
        s_decay = DecaySchedule(ScheduleKind.CYCLIC, sigma0, (0.5 / v, shrink / (2.0 * v)),
                                s_target, v)
    else:
        raise InvalidParameterError(f"unknown sigma decay {sigma_decay!r}")
    fixed = SensitivityStrategy(SensitivityKind.FIXED_C, scope)
    l2 = SensitivityStrategy(SensitivityKind.L2_MAX, scope)
    comb = SensitivityStrategy(SensitivityKind.COMBINED, scope)
    return {
        "baseline": (c_const, s_const, fixed),
        "dynS[C_decay]": (c_decay, s_const, fixed),
        "dynS[l2-max]": (c_const, s_const, l2),
        "dynS": (c_decay, s_const, comb),
        "dynSigma": (c_const, s_decay, fixed),
        "dyn[S,sigma]": (c_decay, s_decay, comb),
    }[name]
