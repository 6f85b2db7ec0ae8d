"""Multilayer perceptron with softmax cross-entropy and hand-written backprop.

Weights are stored ``in x out`` so a layer computes ``z = h @ W + b``.
Hidden layers use ReLU by default (derivative at 0 taken as 0); ``sigmoid``
and ``tanh`` are available for experiments that need a twice-differentiable
network, such as gradient-matching reconstruction. The output layer is
linear and feeds a softmax cross-entropy loss.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, ParseError, ShapeMismatchError
from .ndcore import RngStream, as_tensor

CHECKPOINT_FORMAT = "dynadp-mlp"
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "sigmoid", "tanh")


def activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return np.tanh(z)


def activation_derivs(kind, z):
    """First and second derivative of the activation at ``z``."""
    if kind == "relu":
        return (z > 0.0).astype(np.float64), np.zeros_like(z)
    if kind == "sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        d1 = s * (1.0 - s)
        return d1, d1 * (1.0 - 2.0 * s)
    t = np.tanh(z)
    d1 = 1.0 - t * t
    return d1, -2.0 * t * d1


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MlpModel:
    weights: tuple  # W_l, shape (in, out)
    biases: tuple   # b_l, shape (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidParameterError(f"activation must be one of {ACTIVATIONS}")
        ws = tuple(_frozen(w) for w in self.weights)
        bs = tuple(_frozen(b) for b in self.biases)
        if len(ws) < 2 or len(ws) != len(bs):
            raise InvalidParameterError("an MLP needs >= 2 layers with one bias each")
        for l, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatchError(f"layer {l}: weight {w.shape} / bias {b.shape}")
            if l and ws[l - 1].shape[1] != w.shape[0]:
                raise ShapeMismatchError(f"layer {l}: input {w.shape[0]} != previous output "
                                         f"{ws[l - 1].shape[1]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidParameterError(f"layer {l}: non-finite parameters")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def num_layers(self):
        return len(self.weights)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def apply_update(self, grads: "GradientSet", lr):
        """Plain SGD step ``W <- W - lr * g``; returns a new model."""
        grads.check_congruent(self)
        return MlpModel(tuple(w - lr * g for w, g in zip(self.weights, grads.weights)),
                        tuple(b - lr * g for b, g in zip(self.biases, grads.biases)),
                        self.activation)


@dataclass(frozen=True)
class GradientSet:
    """Per-layer (weight, bias) gradients congruent with an ``MlpModel``."""
    weights: tuple
    biases: tuple

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=np.float64) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=np.float64) for b in self.biases))
        if len(self.weights) != len(self.biases):
            raise ShapeMismatchError("weights and biases differ in layer count")

    @property
    def num_layers(self):
        return len(self.weights)

    @classmethod
    def zeros_like(cls, m):
        return cls(tuple(np.zeros_like(w) for w in m.weights),
                   tuple(np.zeros_like(b) for b in m.biases))

    def check_congruent(self, other):
        if len(self.weights) != len(other.weights) or any(
                a.shape != b.shape for a, b in zip(self.weights + self.biases,
                                                   other.weights + other.biases)):
            raise ShapeMismatchError("gradient set is not shape-congruent")

    def layer_vector(self, l):
        """Layer ``l``'s weight and bias gradient as one flat vector."""
        return np.concatenate([self.weights[l].ravel(), self.biases[l]])

    def layer_norms(self):
        from .ndcore import l2_norm
        return np.array([l2_norm(self.layer_vector(l)) for l in range(self.num_layers)])

    def scaled(self, factors):
        """Multiply layer ``l`` by ``factors[l]`` (a scalar scales every layer)."""
        if np.isscalar(factors):
            factors = [factors] * self.num_layers
        return GradientSet(tuple(w * f for w, f in zip(self.weights, factors)),
                           tuple(b * f for b, f in zip(self.biases, factors)))

    def __add__(self, other):
        self.check_congruent(other)
        return GradientSet(tuple(a + b for a, b in zip(self.weights, other.weights)),
                           tuple(a + b for a, b in zip(self.biases, other.biases)))

    def __sub__(self, other):
        self.check_congruent(other)
        return GradientSet(tuple(a - b for a, b in zip(self.weights, other.weights)),
                           tuple(a - b for a, b in zip(self.biases, other.biases)))

    def flat(self):
        return np.concatenate([self.layer_vector(l) for l in range(self.num_layers)])

    def allclose(self, other, rtol=0.0, atol=0.0):
        return all(np.allclose(a, b, rtol=rtol, atol=atol)
                   for a, b in zip(self.weights + self.biases, other.weights + other.biases))

    def to_arrays(self, prefix=""):
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{l}"] = w
            out[f"{prefix}b{l}"] = b
        return out

    @classmethod
    def from_arrays(cls, arrays, num_layers, prefix=""):
        return cls(tuple(arrays[f"{prefix}W{l}"] for l in range(num_layers)),
                   tuple(arrays[f"{prefix}b{l}"] for l in range(num_layers)))


# ------------------------------------------------------------------ building

def init_mlp(layer_sizes, rng: RngStream, activation="relu") -> MlpModel:
    """Glorot-uniform weights, zero biases; layer ``l`` draws from ``rng.child(layer=l)``."""
    sizes = list(layer_sizes)
    if len(sizes) < 3 or any(int(s) != s or s < 1 for s in sizes):
        raise InvalidParameterError(
            f"layer_sizes needs >= 3 positive integers, got {layer_sizes}")
    ws, bs = [], []
    for l, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = math.sqrt(6.0 / (fi + fo))
        u = rng.child(layer=l).uniform((fi, fo))
        ws.append((2.0 * u - 1.0) * lim)
        bs.append(np.zeros(fo))
    return MlpModel(tuple(ws), tuple(bs), activation)


# --------------------------------------------------------------- forward/back

def _check_input(m, x):
    x = np.asarray(x, dtype=np.float64)
    d = m.weights[0].shape[0]
    if x.shape[-1] != d or x.ndim not in (1, 2):
        raise ShapeMismatchError(f"input shape {x.shape} does not match input dimension {d}")
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError("input contains NaN or Inf")
    return x


def forward_trace(m, x):
    """Pre-activations ``zs`` and activations ``hs`` (``hs[0]`` is the input)."""
    hs, zs = [x], []
    h = x
    for l, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ w + b
        zs.append(z)
        h = activate(m.activation, z) if l < m.num_layers - 1 else z
        hs.append(h)
    return zs, hs


def forward(m: MlpModel, x) -> np.ndarray:
    """Logits for one example ``(d,)`` or a stack ``(n, d)``."""
    x = _check_input(m, x)
    return forward_trace(m, x)[1][-1]


def softmax(z):
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Per-row softmax cross-entropy, computed with a stable log-sum-exp."""
    z = np.atleast_2d(logits)
    mx = np.max(z, axis=1)
    lse = mx + np.log(np.sum(np.exp(z - mx[:, None]), axis=1))
    return lse - z[np.arange(z.shape[0]), np.atleast_1d(labels)]


def _check_labels(m, y):
    y = np.atleast_1d(np.asarray(y))
    k = m.weights[-1].shape[1]
    if np.any(y < 0) or np.any(y >= k) or np.any(y != np.round(y)):
        raise InvalidParameterError(f"label outside [0, {k})")
    return y.astype(np.int64)


def _backprop_one(m, x, label, scale):
    zs, hs = forward_trace(m, x)
    delta = softmax(zs[-1])
    delta[label] -= 1.0
    delta *= scale
    gw, gb = [None] * m.num_layers, [None] * m.num_layers
    for l in range(m.num_layers - 1, -1, -1):
        gw[l] = np.outer(hs[l], delta)
        gb[l] = delta.copy()
        if l:
            delta = (m.weights[l] @ delta) * activation_derivs(m.activation, zs[l - 1])[0]
    return GradientSet(tuple(gw), tuple(gb))


def per_example_gradients(m: MlpModel, xs, ys, scale=None):
    """One ``GradientSet`` per example of ``(1/B) * grad loss_i``.

    The ``1/B`` prefactor (``B = len(xs)``) is applied to every example;
    pass ``scale`` to override it (``scale=1`` gives raw per-example grads).
    """
    xs = _check_input(m, np.atleast_2d(xs))
    ys = _check_labels(m, ys)
    if xs.shape[0] == 0:
        raise InvalidParameterError("empty batch")
    if xs.shape[0] != ys.shape[0]:
        raise ShapeMismatchError("features and labels differ in length")
    s = 1.0 / xs.shape[0] if scale is None else float(scale)
    return [_backprop_one(m, xs[i], int(ys[i]), s) for i in range(xs.shape[0])]


def batch_backward(m: MlpModel, xs, ys, scale=None, return_loss=False):
    """Vectorised backward pass returning what the per-example loop needs.

    Returns ``(acts, deltas)``: for each layer ``l`` the layer inputs
    ``acts[l]`` of shape ``(B, in_l)`` and the scaled output errors
    ``deltas[l]`` of shape ``(B, out_l)``. Example ``i``'s gradient for the
    layer is ``(outer(acts[l][i], deltas[l][i]), deltas[l][i])``. With
    ``return_loss`` the mean cross-entropy is appended as a third value.
    """
    xs = _check_input(m, np.atleast_2d(xs))
    ys = _check_labels(m, ys)
    s = 1.0 / xs.shape[0] if scale is None else float(scale)
    zs, hs = forward_trace(m, xs)
    delta = softmax(zs[-1])
    delta[np.arange(xs.shape[0]), ys] -= 1.0
    delta *= s
    deltas = [None] * m.num_layers
    for l in range(m.num_layers - 1, -1, -1):
        deltas[l] = delta
        if l:
            delta = (delta @ m.weights[l].T) * activation_derivs(m.activation, zs[l - 1])[0]
    if return_loss:
        return hs[:-1], deltas, float(np.mean(cross_entropy(zs[-1], ys)))
    return hs[:-1], deltas


def per_example_layer_norms(acts, deltas):
    """Norm of every example's (weight, bias) layer gradient, shape (B, M).

    Uses ``||(a d^T, d)|| = ||d|| * sqrt(||a||^2 + 1)`` so the outer products
    are never formed.
    """
    cols = [np.sqrt(np.einsum("ij,ij->i", d, d)) * np.sqrt(np.einsum("ij,ij->i", a, a) + 1.0)
            for a, d in zip(acts, deltas)]
    return np.stack(cols, axis=1)


def weighted_gradient_sum(acts, deltas, factors):
    """``sum_i factors[i, l] * g_i`` per layer, as a ``GradientSet``."""
    ws, bs = [], []
    for l, (a, d) in enumerate(zip(acts, deltas)):
        fd = d * factors[:, l:l + 1]
        ws.append(a.T @ fd)
        bs.append(np.sum(fd, axis=0))
    return GradientSet(tuple(ws), tuple(bs))


def batch_gradient(m: MlpModel, xs, ys):
    """Gradient of the mean cross-entropy over the batch."""
    acts, deltas = batch_backward(m, xs, ys)
    n = len(acts[0])
    return weighted_gradient_sum(acts, deltas, np.ones((n, m.num_layers)))


def loss(m: MlpModel, xs, ys):
    """Mean softmax cross-entropy."""
    ys = _check_labels(m, ys)
    return float(np.mean(cross_entropy(forward(m, np.atleast_2d(xs)), ys)))


def evaluate(m: MlpModel, ds, chunk=4096):
    """Return ``(accuracy, mean loss)``; argmax ties go to the lowest class index."""
    n = len(ds)
    if n == 0:
        raise InvalidParameterError("cannot evaluate on an empty dataset")
    correct, total_loss = 0, 0.0
    for s in range(0, n, chunk):
        x, y = ds.features[s:s + chunk], ds.labels[s:s + chunk]
        z = forward(m, x)
        correct += int(np.sum(np.argmax(z, axis=1) == y))
        total_loss += float(np.sum(cross_entropy(z, y)))
    return correct / n, total_loss / n


# --------------------------------------------------------------- checkpoints

def model_to_dict(m: MlpModel):
    """JSON-ready checkpoint: layer sizes plus row-major flattened arrays."""
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_sizes": m.layer_sizes,
        "activation": m.activation,
        "layers": [{"weight": w.ravel().tolist(), "bias": b.tolist()}
                   for w, b in zip(m.weights, m.biases)],
    }


def model_from_dict(d) -> MlpModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"not a {CHECKPOINT_FORMAT} checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {d.get('version')}")
    sizes = d["layer_sizes"]
    layers = d["layers"]
    if len(layers) != len(sizes) - 1:
        raise ParseError("layer count does not match layer_sizes")
    ws, bs = [], []
    for l, layer in enumerate(layers):
        w = as_tensor(layer["weight"], f"layers[{l}].weight")
        if w.size != sizes[l] * sizes[l + 1]:
            raise ParseError(f"layers[{l}].weight has {w.size} values")
        ws.append(w.reshape(sizes[l], sizes[l + 1]))
        bs.append(as_tensor(layer["bias"], f"layers[{l}].bias"))
    return MlpModel(tuple(ws), tuple(bs), d.get("activation", "relu"))


def save_checkpoint(m: MlpModel, path):
    with open(path, "w") as f:
        json.dump(model_to_dict(m), f)


def load_checkpoint(path) -> MlpModel:
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON ({e})") from None
    try:
        return model_from_dict(d)
    except (KeyError, TypeError, AttributeError) as e:
        raise ParseError(f"{path}: malformed checkpoint ({e})") from None
