"""Dataset ingestion, synthetic attribute data and batch sampling.

Features are stored as a 2-D float64 array (one flattened example per row)
with ``feature_shape`` remembering the original layout, e.g. ``(28, 28)``.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagicError, CountMismatchError, InvalidParameterError,
                     ParseError, TruncatedPayloadError)
from .ndcore import Purpose, RngStream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
BITFLIP_PROB = 0.1


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray            # (N, d) float64
    labels: np.ndarray              # (N,) int64
    num_classes: int
    feature_range: tuple = (0.0, 1.0)
    feature_shape: tuple = field(default=None)
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise InvalidParameterError(
                f"features {x.shape} and labels {y.shape} do not describe the same examples")
        if self.num_classes < 1:
            raise InvalidParameterError("num_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise InvalidParameterError("label outside [0, num_classes)")
        lo, hi = self.feature_range
        if x.size and (x.min() < lo or x.max() > hi):
            raise InvalidParameterError("features outside feature_range")
        if not np.all(np.isfinite(x)):
            raise InvalidParameterError("features contain NaN or Inf")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if self.feature_shape is None:
            object.__setattr__(self, "feature_shape", (x.shape[1],))

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_features(self):
        return self.features.shape[1]

    def subset(self, indices, name=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes,
                       self.feature_range, self.feature_shape, name or self.name)


@dataclass(frozen=True)
class Batch:
    indices: np.ndarray
    sampling_rate: float

    def __len__(self):
        return len(self.indices)


# ---------------------------------------------------------------- IDX files

def _read_header(buf, n_dims, expected_magic, what):
    need = 4 * (1 + n_dims)
    if len(buf) < 4:
        raise TruncatedPayloadError(f"{what}: file too short for IDX magic ({len(buf)} bytes)")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise BadMagicError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(buf) < need:
        raise TruncatedPayloadError(f"{what}: header truncated")
    return struct.unpack(">" + "I" * n_dims, buf[4:need]), need


def parse_idx_images(buf):
    (count, rows, cols), off = _read_header(buf, 3, IMAGE_MAGIC, "images")
    size = count * rows * cols
    if len(buf) - off < size:
        raise TruncatedPayloadError(
            f"images: expected {size} pixel bytes, found {len(buf) - off}")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=off).reshape(count, rows, cols)


def parse_idx_labels(buf):
    (count,), off = _read_header(buf, 1, LABEL_MAGIC, "labels")
    if len(buf) - off < count:
        raise TruncatedPayloadError(f"labels: expected {count} bytes, found {len(buf) - off}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=off)


def load_idx(images_path, labels_path, num_classes=None, name="idx") -> Dataset:
    """Load an IDX image/label pair; pixels are scaled from 0..255 to [0, 1]."""
    with open(images_path, "rb") as f:
        images = parse_idx_images(f.read())
    with open(labels_path, "rb") as f:
        labels = parse_idx_labels(f.read())
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes, (0.0, 1.0),
                   tuple(images.shape[1:]), name)


def save_idx(ds: Dataset, images_path, labels_path):
    """Write ``ds`` as an IDX pair (features rounded to 0..255 bytes)."""
    if len(ds.feature_shape) != 2:
        raise InvalidParameterError("save_idx needs 2-D example shapes")
    rows, cols = ds.feature_shape
    pix = np.clip(np.rint(ds.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, len(ds), rows, cols))
        f.write(pix.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(ds)))
        f.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- other data

def synth_attributes(n, num_features, num_classes, seed, flip_prob=BITFLIP_PROB) -> Dataset:
    """Binary attribute data drawn around ``num_classes`` random prototypes.

    Labels are balanced (class sizes differ by at most one) and shuffled;
    each feature bit of an example is its prototype's bit flipped with
    probability ``flip_prob``.
    """
    for nm, v in (("n", n), ("num_features", num_features), ("num_classes", num_classes)):
        if int(v) != v or v < 1:
            raise InvalidParameterError(f"{nm} must be a positive integer, got {v}")
    if num_classes > n:
        raise InvalidParameterError("num_classes must not exceed n")
    if not 0.0 <= flip_prob < 0.5:
        raise InvalidParameterError("flip_prob must lie in [0, 0.5)")
    rng = RngStream(int(seed), Purpose.DATA)
    protos = rng.child(slot=0).uniform((num_classes, num_features)) < 0.5
    order = np.argsort(rng.child(slot=1).uniform(n), kind="stable")
    labels = np.empty(n, dtype=np.int64)
    labels[order] = np.arange(n) % num_classes
    flips = rng.child(slot=2).uniform((n, num_features)) < flip_prob
    x = (protos[labels] ^ flips).astype(np.float64)
    return Dataset(x, labels, int(num_classes), (0.0, 1.0), (num_features,),
                   f"synth-{num_classes}")


def load_csv(path, normalize=True, num_classes=None, name="csv") -> Dataset:
    """Header row, numeric feature columns, integer label in the last column.

    With ``normalize`` each feature column is min-max scaled into [0, 1]
    (constant columns map to 0).
    """
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise TruncatedPayloadError(f"{path}: no data rows")
    width = len(rows[0])
    if width < 2:
        raise ParseError(f"{path}: need at least one feature and a label column")
    data = []
    for lineno, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        if len(r) != width:
            raise ParseError(f"{path}:{lineno}: expected {width} fields, got {len(r)}")
        try:
            data.append([float(v) for v in r])
        except ValueError as e:
            raise ParseError(f"{path}:{lineno}: {e}") from None
    arr = np.array(data)
    y = arr[:, -1]
    if np.any(y != np.round(y)) or np.any(y < 0):
        raise ParseError(f"{path}: labels must be non-negative integers")
    x = arr[:, :-1]
    if not np.all(np.isfinite(x)):
        raise ParseError(f"{path}: non-finite feature value")
    if normalize:
        lo, hi = x.min(axis=0), x.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        x = np.clip((x - lo) / span, 0.0, 1.0)
        rng_ = (0.0, 1.0)
    else:
        rng_ = (float(x.min()), float(x.max()))
    y = y.astype(np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(x, y, k, rng_, (x.shape[1],), name)


def sample_batch(ds: Dataset, B, rng: RngStream) -> Batch:
    """Draw ``B`` indices uniformly with replacement; q = B/N."""
    n = len(ds)
    if int(B) != B or not 1 <= B <= n:
        raise InvalidParameterError(f"batch size {B} outside [1, {n}]")
    idx = rng.integers(0, n, int(B))
    return Batch(idx, B / n)


def train_test_split(ds: Dataset, test_ratio, seed):
    """Deterministic shuffled split; returns (train, test)."""
    if not 0.0 < test_ratio < 1.0:
        raise InvalidParameterError("test_ratio must lie in (0, 1)")
    n = len(ds)
    n_test = int(round(n * test_ratio))
    if n_test < 1 or n_test >= n:
        raise InvalidParameterError("split leaves an empty side")
    perm = np.argsort(RngStream(int(seed), Purpose.DATA, slot=7).uniform(n), kind="stable")
    return ds.subset(perm[n_test:], ds.name + "-train"), ds.subset(perm[:n_test], ds.name + "-test")
