"""Dense numeric core: validated float64 tensors, norms and a keyed RNG.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; ``as_tensor``
is the gate through which external data enters and rejects NaN/Inf.

``RngStream`` is counter based: every draw is a pure function of
``(master_seed, purpose, iteration, layer, slot, draw index)``. Nothing is
mutated when sampling, so two equal streams always yield equal numbers and
streams may be derived in any order (or in parallel) without changing what
each one produces.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import InvalidParameterError

Tensor = np.ndarray


def as_tensor(x, name="tensor"):
    """Copy ``x`` into a finite float64 array (1-D or 2-D)."""
    arr = np.array(x, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise InvalidParameterError(f"{name}: expected 1-D or 2-D data, got ndim={arr.ndim}")
    if arr.size == 0:
        raise InvalidParameterError(f"{name}: shape dimensions must be positive")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name}: contains NaN or Inf")
    return arr


def l2_norm(t) -> float:
    """Euclidean norm of all entries.

    Uses a scaled sum of squares so very large or very small entries do not
    overflow/underflow; the sum runs in numpy's fixed pairwise order.
    """
    a = np.asarray(t, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    m = float(np.max(np.abs(a)))
    if m == 0.0:
        return 0.0
    s = a / m
    return m * math.sqrt(float(np.dot(s, s)))


class Purpose(enum.IntEnum):
    """Independent random-number domains; the value is mixed into the key."""
    INIT = 1
    SAMPLING = 2
    NOISE = 3
    ATTACK = 4
    DATA = 5


@dataclass(frozen=True)
class RngStream:
    """A keyed, stateless random stream.

    ``slot`` distinguishes several independent arrays drawn under the same
    ``(iteration, layer)`` counters (e.g. weight vs. bias noise).
    """
    master_seed: int
    purpose: Purpose = Purpose.INIT
    iteration: int = 0
    layer: int = 0
    slot: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise InvalidParameterError("master_seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "purpose", Purpose(self.purpose))

    def child(self, **counters) -> "RngStream":
        """Same seed and purpose with some counters replaced."""
        return replace(self, **counters)

    def with_purpose(self, purpose) -> "RngStream":
        return replace(self, purpose=Purpose(purpose), iteration=0, layer=0, slot=0)

    @property
    def key(self) -> int:
        return kernels.derive_key(self.master_seed, int(self.purpose),
                                  self.iteration, self.layer, self.slot)

    def uniform(self, shape) -> np.ndarray:
        """Doubles in [0, 1)."""
        shape = _shape(shape)
        return kernels.uniform_fill(self.key, _count(shape)).reshape(shape)

    def gaussian(self, stddev, shape) -> np.ndarray:
        """I.i.d. N(0, stddev^2) via Box-Muller."""
        if not stddev >= 0.0 or not math.isfinite(stddev):
            raise InvalidParameterError(f"stddev must be finite and >= 0, got {stddev}")
        shape = _shape(shape)
        return kernels.gaussian_fill(self.key, _count(shape), float(stddev)).reshape(shape)

    def integers(self, low, high, size) -> np.ndarray:
        """Integers in [low, high) by scaling uniforms (bias below 2^-40 for high-low < 2^13)."""
        if high <= low:
            raise InvalidParameterError("integers: need high > low")
        u = self.uniform(size)
        out = low + np.floor(u * (high - low)).astype(np.int64)
        return np.minimum(out, high - 1)


def gaussian(rng: RngStream, stddev, shape) -> np.ndarray:
    return rng.gaussian(stddev, shape)


def _shape(shape):
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise InvalidParameterError(f"invalid shape {shape}")
    return shape


def _count(shape):
    n = 1
    for s in shape:
        n *= s
    return n
