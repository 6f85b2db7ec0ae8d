"""Gradient-leakage reconstruction against the MLP.

Given a frozen model, a known label and a leaked (possibly sanitized)
gradient, the attacker optimizes a dummy input ``x`` so that the gradient
it induces matches the leaked one::

    D(x) = sum_l ||grad_W_l(x) - leaked_W_l||^2 + ||grad_b_l(x) - leaked_b_l||^2

``attack_loss_and_grad`` differentiates ``D`` through the backward pass by
hand. ReLU masks are piecewise constant in ``x`` and are held fixed, which
is exact almost everywhere. The dummy input is optimized with L-BFGS
(two-loop recursion, Armijo backtracking).

Several dummies can be optimized jointly against one summed batch
gradient; each example then moves along its own block of the joint
gradient, i.e. example ``i mod B`` is updated from its own slice.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import (InvalidParameterError, MissingDumpEntryError, NotRecoverableError,
                     ShapeMismatchError)
from .model import GradientSet, MlpModel, activate, activation_derivs, softmax
from .ndcore import Purpose, RngStream

SEED_KINDS = ("patterned_random", "uniform_random")
DEFAULT_TILE = 4


@dataclass(frozen=True)
class AttackConfig:
    max_iters: int = 300
    threshold: float = 0.70
    seed_kind: str = "patterned_random"
    history: int = 10
    c1: float = 1e-4
    max_backtracks: int = 60
    unit_scaling: bool = False
    rel_tol: float = 1e-26

    def __post_init__(self):
        if int(self.max_iters) != self.max_iters or self.max_iters < 0:
            raise InvalidParameterError("max_iters must be a non-negative integer")
        if not self.threshold > 0.0:
            raise InvalidParameterError("threshold must be positive")
        if self.seed_kind not in SEED_KINDS:
            raise InvalidParameterError(f"seed_kind must be one of {SEED_KINDS}")
        if self.history < 1:
            raise InvalidParameterError("L-BFGS history must be >= 1")
        if not 0.0 < self.c1 < 1.0:
            raise InvalidParameterError("Armijo constant must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --------------------------------------------------------------- seeds

def patterned_seed(shape, rng: RngStream, tile=DEFAULT_TILE):
    """Repeating low-frequency tile blended 50/50 with per-pixel uniform noise.

    Works for 1-D and 2-D shapes; values lie in [0, 1).
    """
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape) or len(shape) > 2:
        raise InvalidParameterError(f"invalid seed shape {shape}")
    tshape = tuple(min(tile, s) for s in shape)
    t = rng.child(slot=0).uniform(tshape)
    reps = tuple(-(-s // ts) for s, ts in zip(shape, tshape))
    pattern = np.tile(t, reps)[tuple(slice(0, s) for s in shape)]
    noise = rng.child(slot=1).uniform(shape)
    return 0.5 * pattern + 0.5 * noise


def uniform_seed(shape, rng: RngStream):
    return rng.child(slot=1).uniform(shape)


def make_seed(kind, shape, rng):
    if kind == "patterned_random":
        return patterned_seed(shape, rng)
    if kind == "uniform_random":
        return uniform_seed(shape, rng)
    raise InvalidParameterError(f"unknown seed kind {kind!r}")


# --------------------------------------------------------------- loss

def gradient_distance(g_dummy: GradientSet, g_leaked: GradientSet) -> float:
    """Sum of squared coordinate differences over every layer."""
    g_dummy.check_congruent(g_leaked)
    total = 0.0
    for a, b in zip(g_dummy.weights + g_dummy.biases, g_leaked.weights + g_leaked.biases):
        d = (a - b).ravel()
        total += float(np.dot(d, d))
    return total


def _forward_stack(model, X):
    """Layer inputs ``hs``, pre-activations ``zs`` and per-hidden-layer
    activation derivatives ``(d1, d2)``."""
    hs, zs, derivs = [X], [], []
    h = X
    M = model.num_layers
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        zs.append(z)
        if l < M - 1:
            derivs.append(activation_derivs(model.activation, z))
            h = activate(model.activation, z)
        else:
            h = z
        hs.append(h)
    return hs, zs, derivs


def attack_loss_and_grad(model: MlpModel, X, labels, g_leaked: GradientSet, grad_scale=1.0):
    """Return ``(D, dD/dX)`` for a stack of dummy inputs ``X`` (n, d).

    The dummy gradient is ``grad_scale * sum_i grad loss(x_i, labels[i])``,
    matching how the leaked gradient was formed (``grad_scale = 1/B`` for a
    per-example gradient taken from a batch of size B).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = X.shape[0]
    M = model.num_layers
    Ws = model.weights
    hs, zs, derivs = _forward_stack(model, X)
    p = softmax(zs[-1])
    delta = p.copy()
    delta[np.arange(n), labels] -= 1.0
    delta *= grad_scale
    deltas = [None] * M
    pre = [None] * (M - 1)          # delta_{l+1} @ W_{l+1}^T, before the derivative
    for l in range(M - 1, -1, -1):
        deltas[l] = delta
        if l:
            pre[l - 1] = delta @ Ws[l].T
            delta = pre[l - 1] * derivs[l - 1][0]

    # residuals and direct adjoints of D w.r.t. each layer input and each delta
    D = 0.0
    ad_h = [np.zeros_like(h) for h in hs[:-1]]
    ad_d = [None] * M
    for l in range(M):
        rw = hs[l].T @ deltas[l] - g_leaked.weights[l]
        rb = np.sum(deltas[l], axis=0) - g_leaked.biases[l]
        D += float(np.sum(rw * rw)) + float(np.dot(rb, rb))
        ad_h[l] += 2.0 * (deltas[l] @ rw.T)
        ad_d[l] = 2.0 * (hs[l] @ rw) + 2.0 * rb
    # through delta_l = act'(z_l) * pre_l, pre_l = delta_{l+1} @ W_{l+1}^T;
    # act'' contributes a direct term on z_l (zero for ReLU)
    ad_z_extra = [None] * (M - 1)
    for l in range(M - 1):
        d1, d2 = derivs[l]
        ad_d[l + 1] = ad_d[l + 1] + (ad_d[l] * d1) @ Ws[l + 1]
        ad_z_extra[l] = ad_d[l] * pre[l] * d2
    # through delta_M = s (softmax(z_M) - onehot)
    a = ad_d[M - 1] * grad_scale
    ad_z = p * (a - np.sum(p * a, axis=1, keepdims=True))
    # through the forward pass
    for l in range(M - 1, -1, -1):
        ad_h[l] = ad_h[l] + ad_z @ Ws[l].T
        if l:
            ad_z = ad_h[l] * derivs[l - 1][0] + ad_z_extra[l - 1]
    return D, ad_h[0]


# --------------------------------------------------------------- L-BFGS

@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    iterations: int
    status: str
    history: list = field(default_factory=list)


def lbfgs_minimize(fun, x0, max_iters, history=10, c1=1e-4, max_backtracks=60,
                   unit_scaling=False, f_tol=None, callback=None):
    """Minimize ``fun(x) -> (f, grad)`` with limited-memory BFGS.

    Two-loop recursion over the last ``history`` curvature pairs; the initial
    Hessian guess is ``(s.y / y.y) I`` unless ``unit_scaling``. Steps come
    from Armijo backtracking (``f(x + a d) <= f + c1 a g.d``, halving ``a``).
    Pairs with non-positive curvature are skipped. With ``f_tol`` set, the
    run stops as converged once ``f <= f_tol``. ``callback(k, x, f)`` runs
    after every accepted iteration ``k`` (1-based) and may return True to stop.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    S, Y, rho = [], [], []
    hist = [f]
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return LbfgsResult(x, f, 0, "non-finite", hist)
    status = "max_iters"
    k = 0
    while k < max_iters:
        if f_tol is not None and f <= f_tol:
            status = "converged"
            break
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            status = "stationary"
            break
        # two-loop recursion
        qv = g.ravel().copy()
        alphas = []
        for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
            a = r * float(np.dot(s, qv))
            alphas.append(a)
            qv -= a * y
        if S and not unit_scaling:
            qv *= float(np.dot(S[-1], Y[-1])) / float(np.dot(Y[-1], Y[-1]))
        for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
            b = r * float(np.dot(y, qv))
            qv += (a - b) * s
        d = -qv.reshape(x.shape)
        gd = float(np.sum(g * d))
        if not gd < 0.0:
            S, Y, rho = [], [], []
            d = -g
            gd = -gnorm * gnorm
        step = 1.0
        if not S and not unit_scaling:
            step = min(1.0, 1.0 / gnorm)
        for _ in range(max_backtracks):
            xn = x + step * d
            fn, gn = fun(xn)
            if np.isfinite(fn) and fn <= f + c1 * step * gd:
                break
            step *= 0.5
        else:
            status = "line-search-failed"
            break
        if not np.all(np.isfinite(gn)):
            status = "non-finite"
            break
        s_vec = (xn - x).ravel()
        y_vec = (gn - g).ravel()
        sy = float(np.dot(s_vec, y_vec))
        if sy > 1e-12 * float(np.linalg.norm(s_vec)) * float(np.linalg.norm(y_vec)) and sy > 0.0:
            S.append(s_vec)
            Y.append(y_vec)
            rho.append(1.0 / sy)
            if len(S) > history:
                S.pop(0)
                Y.pop(0)
                rho.pop(0)
        x, f, g = xn, fn, gn
        k += 1
        hist.append(f)
        if callback is not None and callback(k, x, f):
            status = "stopped"
            break
    return LbfgsResult(x, f, k, status, hist)


# --------------------------------------------------------------- attacks

@dataclass
class AttackRow:
    target: int
    label: int
    iterations: int
    distance: float
    mse: float
    success: bool
    status: str
    first_success_iter: int = None
    diagnostic: str = ""
    x_rec: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k != "x_rec"}
        return d


def mse(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.mean((a - b) ** 2))


def _check_snapshot(model, g):
    try:
        g.check_congruent(model)
    except ShapeMismatchError:
        raise ShapeMismatchError("leaked gradients do not match the model snapshot") from None


def reconstruct(model: MlpModel, g_leaked: GradientSet, label, cfg: AttackConfig = AttackConfig(),
                x_true=None, rng: RngStream = None, grad_scale=1.0, seed_shape=None, target=0):
    """Optimize one dummy input against ``g_leaked``; returns an ``AttackRow``.

    The optimizer runs until the gradient distance has dropped by the factor
    ``cfg.rel_tol``, it stalls, or ``cfg.max_iters`` iterations are used;
    ``iterations`` counts the iterations it ran. Success means the final
    reconstruction MSE is below ``cfg.threshold``. ``first_success_iter``
    additionally records when the MSE first dipped below the threshold. With
    ``max_iters == 0`` the attack fails immediately and reports the seed's MSE.
    """
    _check_snapshot(model, g_leaked)
    d = model.weights[0].shape[0]
    rng = rng if rng is not None else RngStream(0, Purpose.ATTACK)
    shape = seed_shape if seed_shape is not None else (d,)
    x0 = make_seed(cfg.seed_kind, shape, rng).reshape(1, d)
    return _run(model, g_leaked, [int(label)], cfg, x0,
                None if x_true is None else np.asarray(x_true).reshape(1, d),
                grad_scale, target)[0]


def reconstruct_batch(model, g_leaked, labels, cfg=AttackConfig(), xs_true=None, rng=None,
                      grad_scale=1.0, seed_shape=None):
    """Joint reconstruction of up to four examples from their summed gradient.

    MSE is reported under the best matching of dummies to ground-truth
    examples (gradients are symmetric under swapping same-label examples).
    """
    labels = [int(v) for v in labels]
    if not 1 <= len(labels) <= 4:
        raise InvalidParameterError("batch reconstruction supports 1 to 4 examples")
    _check_snapshot(model, g_leaked)
    d = model.weights[0].shape[0]
    rng = rng if rng is not None else RngStream(0, Purpose.ATTACK)
    shape = seed_shape if seed_shape is not None else (d,)
    x0 = np.stack([make_seed(cfg.seed_kind, shape, rng.child(layer=i)).reshape(d)
                   for i in range(len(labels))])
    xt = None if xs_true is None else np.asarray(xs_true, dtype=np.float64).reshape(len(labels), d)
    return _run(model, g_leaked, labels, cfg, x0, xt, grad_scale, 0)


def _matched_mse(X, xt):
    n = X.shape[0]
    per = np.array([[mse(X[i], xt[j]) for j in range(n)] for i in range(n)])
    best = min(itertools.permutations(range(n)),
               key=lambda p: sum(per[i, p[i]] for i in range(n)))
    return [float(per[i, best[i]]) for i in range(n)]


def _run(model, g_leaked, labels, cfg, x0, xt, grad_scale, target):
    n, d = x0.shape
    state = {"first": [None] * n}

    def fun(v):
        with np.errstate(over="ignore", invalid="ignore"):
            D, G = attack_loss_and_grad(model, v.reshape(n, d), labels, g_leaked, grad_scale)
        return D, G.reshape(v.shape)

    def cb(k, x, f):
        if xt is not None:
            ms = _matched_mse(x.reshape(n, d), xt)
            for i, m in enumerate(ms):
                if state["first"][i] is None and m < cfg.threshold:
                    state["first"][i] = k
        return False

    f0 = fun(x0.ravel())[0]
    f_tol = cfg.rel_tol * f0 if np.isfinite(f0) else 0.0
    res = lbfgs_minimize(fun, x0.ravel(), cfg.max_iters, cfg.history, cfg.c1,
                         cfg.max_backtracks, cfg.unit_scaling, f_tol, cb)
    X = res.x.reshape(n, d)
    ms = _matched_mse(X, xt) if xt is not None else [float("nan")] * n
    diag = ""
    if res.status in ("non-finite", "line-search-failed") or not np.isfinite(res.f):
        diag = f"optimizer stopped early: {res.status}"
    rows = []
    for i in range(n):
        ok = bool(cfg.max_iters > 0 and xt is not None and np.isfinite(ms[i])
                  and ms[i] < cfg.threshold)
        rows.append(AttackRow(target + i, labels[i], int(res.iterations), float(res.f), ms[i], ok,
                              res.status, state["first"][i], diag, X[i].copy()))
    return rows


# --------------------------------------------------------------- oracle

def analytic_fc_recover(grad_w1, grad_b1, return_info=False):
    """Closed-form input from the first dense layer's gradient.

    For one example ``grad_W1 = outer(x, delta)`` and ``grad_b1 = delta``
    (weights stored in x out), so column ``k`` divided by ``delta_k`` is
    ``x``. ``k`` is the largest-magnitude bias coordinate. With
    ``return_info`` a dict reports ``k`` and the relative rank-one residual;
    ``single_example`` is False when the gradient is visibly not one
    example's (e.g. a batch average), in which case the result is not exact.
    """
    gw = np.asarray(grad_w1, dtype=np.float64)
    gb = np.asarray(grad_b1, dtype=np.float64)
    if gw.ndim != 2 or gb.shape != (gw.shape[1],):
        raise ShapeMismatchError("expected an (in, out) weight gradient and (out,) bias gradient")
    k = int(np.argmax(np.abs(gb)))
    if not abs(gb[k]) > 1e-9:
        raise NotRecoverableError("all bias-gradient coordinates are ~0; input not recoverable")
    x = gw[:, k] / gb[k]
    if not return_info:
        return x
    scale = float(np.linalg.norm(gw))
    resid = float(np.linalg.norm(gw - np.outer(x, gb))) / scale if scale > 0 else 0.0
    return x, {"k": k, "residual": resid, "single_example": resid < 1e-8}


# --------------------------------------------------------------- reports

@dataclass
class AttackReport:
    rows: list
    threshold: float
    max_iters: int
    iteration: int = 0

    @property
    def asr(self):
        if not self.rows:
            return None
        return sum(r.success for r in self.rows) / len(self.rows)

    def _mean(self, vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_iterations(self):
        """Mean attack iterations over successful targets."""
        return self._mean([r.iterations for r in self.rows if r.success])

    @property
    def mean_mse(self):
        """Mean reconstruction MSE over successful targets."""
        return self._mean([r.mse for r in self.rows if r.success])

    def summary(self):
        return {"asr": self.asr, "mean_iterations": self.mean_iterations,
                "mean_mse": self.mean_mse, "threshold": self.threshold,
                "max_iters": self.max_iters, "iteration": self.iteration,
                "num_targets": len(self.rows),
                "targets": [r.to_dict() for r in self.rows]}

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(_clean(self.summary()), f, indent=2)

    def save_reconstructions(self, path):
        arrays = {f"target{r.target}": r.x_rec for r in self.rows if r.x_rec is not None}
        np.savez_compressed(path, **arrays)


def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def evaluate_resilience(dump, targets, cfg: AttackConfig = AttackConfig(), iteration=0,
                        seed=0, seed_shape=None) -> AttackReport:
    """Attack each dumped target's leaked gradient at ``iteration``."""
    targets = list(targets)
    if not targets:
        return AttackReport([], cfg.threshold, cfg.max_iters, iteration)
    entry = dump[iteration]
    rows = []
    for k in targets:
        if not 0 <= k < len(entry.per_example):
            raise MissingDumpEntryError(f"iteration {iteration} has no target {k}")
        rng = RngStream(int(seed), Purpose.ATTACK, iteration=iteration, layer=k)
        rows.append(reconstruct(entry.model, entry.per_example[k], int(entry.ys[k]), cfg,
                                x_true=entry.xs[k], rng=rng, grad_scale=entry.grad_scale,
                                seed_shape=seed_shape, target=k))
    return AttackReport(rows, cfg.threshold, cfg.max_iters, iteration)
