"""DP-SGD training loop with dynamic clipping, sensitivity and noise scale.

One iteration ``t``:

1. draw ``B`` indices with replacement (``q = B/N``);
2. per-example gradients ``g_i = (1/B) grad loss_i``;
3. clip every layer of every ``g_i`` at ``C_t``;
4. sum the clipped ``g_i`` (the 1/B prefactor makes this the batch average);
5. pick the sensitivity ``S_t`` (fixed ``C_t`` or the l2-max of the clipped
   examples, per layer or global);
6. add ``N(0, (sigma_t S_t)^2)`` to each layer, keyed by ``(t, layer)``;
7. SGD step, append ``sigma_t`` to the privacy ledger, check termination.

Because the 1/B prefactor sits inside ``g_i``, replacing one example changes
the summed gradient by at most ``S_t`` per layer, so ``sigma_t`` is the noise
multiplier the accountants see.
"""
from __future__ import annotations

import csv
import json
import math
import zipfile
from dataclasses import dataclass, field, asdict

import numpy as np

from . import accountants
from .accountants import METHODS, BudgetLedger
from .datasets import Dataset, sample_batch
from .errors import (DynaDPError, InvalidParameterError, MissingDumpEntryError, ParseError,
                     TrainingDivergedError)
from .model import (ACTIVATIONS, GradientSet, MlpModel, batch_backward, evaluate, init_mlp,
                    per_example_gradients,
                    per_example_layer_norms, weighted_gradient_sum)
from .ndcore import Purpose, RngStream
from .policies import (DecaySchedule, SensitivityStrategy, clip_factors,
                       clip_per_example, sensitivity_from_norms)

TERMINATIONS = ("max_iters", "target_accuracy", "budget")
# noise slots: 0/1 for the batch gradient's weight/bias noise, then two
# slots per dumped target for that target's individually released gradient
_TARGET_SLOT0 = 16


@dataclass(frozen=True)
class PrivacySpec:
    C_schedule: DecaySchedule
    sigma_schedule: DecaySchedule
    sensitivity: SensitivityStrategy = field(default_factory=SensitivityStrategy)
    delta: float = accountants.DEFAULT_DELTA
    fixed_variance: float = None

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise InvalidParameterError("delta must lie in (0, 1)")
        if self.fixed_variance is not None and not self.fixed_variance > 0.0:
            raise InvalidParameterError("fixed_variance must be positive when given")

    def to_dict(self):
        return {"C_schedule": self.C_schedule.to_dict(),
                "sigma_schedule": self.sigma_schedule.to_dict(),
                "sensitivity": self.sensitivity.to_dict(),
                "delta": self.delta,
                "fixed_variance": self.fixed_variance}

    @classmethod
    def from_dict(cls, d):
        return cls(DecaySchedule.from_dict(d["C_schedule"]),
                   DecaySchedule.from_dict(d["sigma_schedule"]),
                   SensitivityStrategy.from_dict(d.get("sensitivity", {})),
                   d.get("delta", accountants.DEFAULT_DELTA),
                   d.get("fixed_variance"))


@dataclass(frozen=True)
class TrainConfig:
    layer_sizes: tuple
    batch_size: int
    lr: float = 0.1
    max_iters: int = 1000
    eval_every: int = 100
    termination: str = "max_iters"
    target_accuracy: float = None
    budget_method: str = None
    budget_epsilon: float = None
    seed: int = 0
    dump_iterations: tuple = ()
    dump_targets: int = 0
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "dump_iterations", tuple(int(t) for t in self.dump_iterations))
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise InvalidParameterError("max_iters must be an integer >= 1")
        if not self.lr > 0.0:
            raise InvalidParameterError("learning rate must be positive")
        if self.eval_every < 1:
            raise InvalidParameterError("eval_every must be >= 1")
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be >= 1")
        if self.termination not in TERMINATIONS:
            raise InvalidParameterError(f"termination must be one of {TERMINATIONS}")
        if self.termination == "target_accuracy":
            if self.target_accuracy is None or not 0.0 <= self.target_accuracy <= 1.0:
                raise InvalidParameterError("target_accuracy in [0, 1] required")
        if self.termination == "budget":
            if self.budget_epsilon is None or not self.budget_epsilon > 0.0:
                raise InvalidParameterError("budget_epsilon > 0 required")
            object.__setattr__(self, "budget_method",
                               accountants.method_key(self.budget_method or "zcdp"))
        if self.activation not in ACTIVATIONS:
            raise InvalidParameterError(f"activation must be one of {ACTIVATIONS}")
        if not 0 <= self.dump_targets <= self.batch_size:
            raise InvalidParameterError("dump_targets must lie in [0, batch_size]")

    def to_dict(self):
        d = asdict(self)
        d["layer_sizes"] = list(self.layer_sizes)
        d["dump_iterations"] = list(self.dump_iterations)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DumpEntry:
    """What an insider could read at one iteration.

    ``per_example`` holds each target's individually sanitized gradient
    (clipped at ``C_t`` with fresh noise of stddev ``sigma_t * S_t``); in
    non-private runs it is the raw gradient. ``batch_grad`` is the noisy
    batch gradient that was actually applied.
    """
    t: int
    model: MlpModel
    batch_indices: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    per_example: list
    batch_grad: GradientSet
    grad_scale: float
    C_t: float
    sigma_t: float
    noise_std: list


@dataclass
class GradientDump:
    entries: dict = field(default_factory=dict)

    def save(self, path):
        arrays, meta = {}, {"iterations": []}
        for t, e in sorted(self.entries.items()):
            p = f"it{t}_"
            m = e.model
            for l, (w, b) in enumerate(zip(m.weights, m.biases)):
                arrays[f"{p}model_W{l}"] = w
                arrays[f"{p}model_b{l}"] = b
            arrays[f"{p}batch_indices"] = e.batch_indices
            arrays[f"{p}xs"] = e.xs
            arrays[f"{p}ys"] = e.ys
            for k, g in enumerate(e.per_example):
                arrays.update(g.to_arrays(f"{p}target{k}_"))
            arrays.update(e.batch_grad.to_arrays(f"{p}batch_"))
            meta["iterations"].append({
                "t": t, "num_layers": m.num_layers, "activation": m.activation,
                "num_targets": len(e.per_example),
                "grad_scale": e.grad_scale, "C_t": e.C_t, "sigma_t": e.sigma_t,
                "noise_std": list(e.noise_std)})
        arrays["meta"] = np.array(json.dumps(meta))
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path):
        try:
            return cls._load(path)
        except (ValueError, KeyError, zipfile.BadZipFile) as e:
            if isinstance(e, DynaDPError):
                raise
            raise ParseError(f"{path}: not a valid gradient dump ({e})") from None

    @classmethod
    def _load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            entries = {}
            for it in meta["iterations"]:
                t, nl = it["t"], it["num_layers"]
                p = f"it{t}_"
                model = MlpModel(tuple(z[f"{p}model_W{l}"] for l in range(nl)),
                                 tuple(z[f"{p}model_b{l}"] for l in range(nl)),
                                 it.get("activation", "relu"))
                per = [GradientSet.from_arrays(z, nl, f"{p}target{k}_")
                       for k in range(it["num_targets"])]
                entries[t] = DumpEntry(t, model, z[f"{p}batch_indices"], z[f"{p}xs"], z[f"{p}ys"],
                                       per, GradientSet.from_arrays(z, nl, f"{p}batch_"),
                                       it["grad_scale"], it["C_t"], it["sigma_t"], it["noise_std"])
        return cls(entries)

    def __getitem__(self, t):
        try:
            return self.entries[t]
        except KeyError:
            raise MissingDumpEntryError(f"no dumped gradients for iteration {t}") from None


ROW_FIELDS = ("t", "train_loss", "accuracy", "C_t", "sigma_t", "S_t", "varsigma_t") + METHODS


@dataclass
class TrainReport:
    rows: list
    termination_reason: str
    iterations: int
    model: MlpModel
    ledger: BudgetLedger = None
    target_attained: bool = None
    final_accuracy: float = None
    final_loss: float = None
    config: dict = None
    dump: GradientDump = None
    flags: list = field(default_factory=list)

    @property
    def epsilon(self):
        """Totals after the last executed step (empty for non-private runs)."""
        return dict(self.ledger.totals) if self.ledger is not None else {}

    def summary(self):
        return {
            "termination_reason": self.termination_reason,
            "iterations": self.iterations,
            "target_attained": self.target_attained,
            "final_accuracy": self.final_accuracy,
            "final_loss": self.final_loss,
            "epsilon": self.epsilon,
            "flags": list(self.flags),
            "config": self.config,
        }

    def write_json(self, path, model_path=None):
        d = self.summary()
        if model_path is not None:
            d["checkpoint"] = str(model_path)
        with open(path, "w") as f:
            json.dump(d, f, indent=2, sort_keys=True)

    def write_csv(self, path):
        """Per-iteration log; floats at full precision, blanks for missing values."""
        n_layers = self.model.num_layers
        header = list(ROW_FIELDS) + [f"S_t_layer{l}" for l in range(n_layers)]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for r in self.rows:
                per = r.get("S_t_layers") or [None] * n_layers
                w.writerow([_fmt(r.get(k)) for k in ROW_FIELDS] + [_fmt(v) for v in per])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _noise_like(stream, layer, shape_w, shape_b, std, slot0=0):
    nw = stream.child(layer=layer, slot=slot0).gaussian(std, shape_w)
    nb = stream.child(layer=layer, slot=slot0 + 1).gaussian(std, shape_b)
    return nw, nb


def regenerate_noise(seed, t, model, noise_std, slot0=0):
    """The noise the trainer added at iteration ``t`` (white-box test hook)."""
    stream = RngStream(int(seed), Purpose.NOISE, iteration=t)
    ws, bs = [], []
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        nw, nb = _noise_like(stream, l, w.shape, b.shape, noise_std[l], slot0)
        ws.append(nw)
        bs.append(nb)
    return GradientSet(tuple(ws), tuple(bs))


def train_dp(ds: Dataset, cfg: TrainConfig, spec: PrivacySpec = None, eval_ds: Dataset = None,
             noise_hook=None, model: MlpModel = None) -> TrainReport:
    """Run DP-SGD (or plain SGD when ``spec`` is None) and return the report.

    ``noise_hook(t, clipped, noisy, noise_std)`` is called after the noise
    draw of every iteration; it receives the summed clipped gradient, the
    noisy gradient and the per-layer noise stddevs.
    """
    if cfg.layer_sizes[0] != ds.num_features or cfg.layer_sizes[-1] < ds.num_classes:
        raise InvalidParameterError(
            f"layer_sizes {list(cfg.layer_sizes)} incompatible with data "
            f"({ds.num_features} features, {ds.num_classes} classes)")
    n = len(ds)
    B = cfg.batch_size
    if B > n:
        raise InvalidParameterError(f"batch size {B} exceeds dataset size {n}")
    q = B / n
    eval_ds = ds if eval_ds is None else eval_ds
    seed = int(cfg.seed)
    if model is None:
        model = init_mlp(cfg.layer_sizes, RngStream(seed, Purpose.INIT), cfg.activation)
    private = spec is not None
    ledger = BudgetLedger(q, spec.delta) if private else None
    M = model.num_layers
    rows, flags = [], []
    dump = GradientDump() if cfg.dump_iterations else None
    dump_at = set(cfg.dump_iterations)
    reason, attained = "max_iters", None
    if cfg.termination == "target_accuracy":
        attained = False
    last_acc, last_loss, evaluated_at = None, None, None

    t = 0
    while t < cfg.max_iters:
        batch = sample_batch(ds, B, RngStream(seed, Purpose.SAMPLING, iteration=t))
        xs, ys = ds.features[batch.indices], ds.labels[batch.indices]
        with np.errstate(over="ignore", invalid="ignore"):
            acts, deltas, train_loss = batch_backward(model, xs, ys, return_loss=True)
        if not math.isfinite(train_loss):
            raise TrainingDivergedError(
                f"non-finite training loss at iteration {t}; lower the learning rate "
                f"(lr={cfg.lr}) or check the input data")
        row = {"t": t, "train_loss": train_loss}
        if private:
            C_t = spec.C_schedule.value(t)
            norms = per_example_layer_norms(acts, deltas)
            factors = clip_factors(norms, C_t)
            S = sensitivity_from_norms(spec.sensitivity, np.minimum(norms, C_t), C_t)
            S_layers = np.full(M, S) if np.isscalar(S) else np.asarray(S)
            S_glob = float(np.max(S_layers))
            if spec.fixed_variance is not None:
                sigma_t = spec.fixed_variance / max(S_glob, 1e-300)
            else:
                sigma_t = spec.sigma_schedule.value(t)
            if cfg.termination == "budget":
                cost = ledger.totals_if(sigma_t)[cfg.budget_method]
                if cost > cfg.budget_epsilon:
                    reason = "budget_exhausted"
                    if t == 0:
                        flags.append("untrained: budget smaller than one step")
                    break
            clipped = weighted_gradient_sum(acts, deltas, factors)
            noise_std = [sigma_t * float(s) for s in S_layers]
            noise = regenerate_noise(seed, t, model, noise_std)
            noisy = clipped + noise
            if noise_hook is not None:
                noise_hook(t, clipped, noisy, noise_std)
            row.update(C_t=C_t, sigma_t=sigma_t, S_t=S_glob, S_t_layers=list(S_layers),
                       varsigma_t=sigma_t * S_glob)
        else:
            noisy = weighted_gradient_sum(acts, deltas, np.ones((B, M)))
            if noise_hook is not None:
                noise_hook(t, noisy, noisy, [0.0] * M)
            C_t = sigma_t = None
            noise_std = [0.0] * M

        if t in dump_at:
            dump.entries[t] = _dump_entry(t, model, batch.indices, xs, ys, cfg, spec,
                                          C_t, sigma_t, noise_std, S_layers if private else None,
                                          noisy, seed)
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                model = model.apply_update(noisy, cfg.lr)
            except InvalidParameterError:
                raise TrainingDivergedError(
                    f"parameters became non-finite at iteration {t}; lower the learning "
                    f"rate (lr={cfg.lr})") from None
        if private:
            ledger.append(sigma_t)
            row.update(ledger.history[-1])
        t += 1
        if t % cfg.eval_every == 0 or t == cfg.max_iters:
            last_acc, last_loss = evaluate(model, eval_ds)
            evaluated_at = t
            row["accuracy"] = last_acc
            if cfg.termination == "target_accuracy" and last_acc >= cfg.target_accuracy:
                rows.append(row)
                reason, attained = "target_accuracy", True
                break
        rows.append(row)

    if evaluated_at != t:
        last_acc, last_loss = evaluate(model, eval_ds)
    if cfg.termination == "target_accuracy" and not attained:
        flags.append("target accuracy not attained")
    return TrainReport(rows, reason, t, model, ledger, attained, last_acc, last_loss,
                       {"train": cfg.to_dict(), "privacy": spec.to_dict() if private else None,
                        "q": q, "dataset": ds.name},
                       dump, flags)


def _dump_entry(t, model, indices, xs, ys, cfg, spec, C_t, sigma_t, noise_std, S_layers,
                noisy, seed):
    k = cfg.dump_targets
    raw = per_example_gradients(model, xs[:k], ys[:k], scale=1.0 / cfg.batch_size) if k else []
    per = []
    for j, g in enumerate(raw):
        if spec is not None:
            g = clip_per_example(g, C_t)
            g = g + regenerate_noise(seed, t, model, noise_std, slot0=_TARGET_SLOT0 + 2 * j)
        per.append(g)
    return DumpEntry(t, model, np.asarray(indices[:k]), np.asarray(xs[:k]), np.asarray(ys[:k]),
                     per, noisy, 1.0 / cfg.batch_size, C_t if C_t is not None else 0.0,
                     sigma_t if sigma_t is not None else 0.0, list(noise_std))


def _with(cfg, **kw):
    d = cfg.to_dict()
    d.update(kw)
    return TrainConfig.from_dict(d)


def run_until_accuracy(ds, cfg: TrainConfig, spec: PrivacySpec = None, target=None, **kw):
    """Train until the first evaluation with accuracy >= target (else until T)."""
    target = cfg.target_accuracy if target is None else target
    if target is None:
        raise InvalidParameterError("a target accuracy is required")
    return train_dp(ds, _with(cfg, termination="target_accuracy", target_accuracy=target),
                    spec, **kw)


def run_until_budget(ds, cfg: TrainConfig, spec: PrivacySpec, method=None, epsilon=None, **kw):
    """Train until the next step would push ``method``'s total past ``epsilon``."""
    method = method or cfg.budget_method
    epsilon = cfg.budget_epsilon if epsilon is None else epsilon
    if spec is None:
        raise InvalidParameterError("budget termination needs a privacy spec")
    return train_dp(ds, _with(cfg, termination="budget", budget_method=method,
                              budget_epsilon=epsilon), spec, **kw)


__all__ = ["PrivacySpec", "TrainConfig", "TrainReport", "GradientDump", "DumpEntry",
           "train_dp", "run_until_accuracy", "run_until_budget", "regenerate_noise"]
