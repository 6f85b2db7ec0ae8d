"""Config-driven experiments and report emission.

An experiment is described by one JSON document (see ``ExperimentConfig``)
and produces, in its output directory:

* ``report.json``     - config echo, per-seed results and aggregate rows
  (numbers rounded to 6 significant digits);
* ``iterations.csv``  - every training iteration of every (algorithm, seed);
* ``ledger.csv``      - the per-step privacy ledger with running totals;
* ``attack.json``     - reconstruction results (``resilience`` protocol only).

CSV files keep full floating-point precision.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import accountants
from .accountants import LEDGER_COLUMNS, METHOD_LABELS, METHODS
from .attack import AttackConfig, evaluate_resilience
from .datasets import load_csv, load_idx, synth_attributes, train_test_split
from .errors import ConfigError, DynaDPError, InvalidParameterError
from .policies import DecaySchedule, PRESETS, SensitivityStrategy, default_floor, preset
from .trainer import (ROW_FIELDS, PrivacySpec, TrainConfig, run_until_accuracy,
                      run_until_budget, train_dp)

PROTOCOLS = ("train", "acc_at_budget", "privacy_at_acc_fixed_sigma",
             "privacy_at_acc_fixed_variance", "resilience", "accounting")
SIG_DIGITS = 6


def round_sig(v, digits=SIG_DIGITS):
    """Recursively round floats to ``digits`` significant digits (NaN/Inf -> None)."""
    if isinstance(v, dict):
        return {k: round_sig(x, digits) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [round_sig(x, digits) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return None
        return float(f"{v:.{digits}g}")
    return v


# ------------------------------------------------------------------ config

def _req(d, key, path):
    if key not in d:
        raise ConfigError(f"{path}.{key}" if path else key, "required field missing")
    return d[key]


def _wrap(path, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except ConfigError:
        raise
    except (InvalidParameterError, TypeError, ValueError, KeyError) as e:
        raise ConfigError(path, str(e).strip("'\"")) from None


def _check_keys(d, allowed, path):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(path, f"unknown field(s) {sorted(extra)}")


@dataclass(frozen=True)
class AlgorithmSpec:
    """A named training algorithm: a preset name, an explicit privacy spec, or non-private."""
    name: str
    privacy: dict = None         # PrivacySpec.to_dict() form; None = non-private

    def privacy_spec(self, fixed_variance=None):
        if self.privacy is None:
            return None
        d = dict(self.privacy)
        if fixed_variance is not None:
            d["fixed_variance"] = fixed_variance
        return PrivacySpec.from_dict(d)

    def to_dict(self):
        return {"name": self.name, "privacy": copy.deepcopy(self.privacy)}


def _algorithm_from_dict(d, path, T, delta):
    _check_keys(d, {"name", "preset", "privacy", "C0", "sigma0", "sigma_decay", "scope"}, path)
    if "privacy" in d:
        priv = d["privacy"]
        if priv is not None:
            _check_keys(priv, {"C_schedule", "sigma_schedule", "sensitivity", "delta",
                               "fixed_variance"}, f"{path}.privacy")
            _wrap(f"{path}.privacy", PrivacySpec.from_dict, priv)
            priv = PrivacySpec.from_dict(priv).to_dict()
        return AlgorithmSpec(d.get("name", "custom"), priv)
    name = _req(d, "preset", path)
    if name != "nonprivate" and name not in PRESETS:
        raise ConfigError(f"{path}.preset", f"unknown preset {name!r}; choose from "
                          f"{list(PRESETS) + ['nonprivate']}")
    c, s, strat = _wrap(path, preset, name, d.get("C0", 4.0), d.get("sigma0", 6.0), T,
                        d.get("sigma_decay", "exponential"), d.get("scope", "per_layer"))
    if c is None:
        return AlgorithmSpec(d.get("name", name), None)
    return AlgorithmSpec(d.get("name", name), PrivacySpec(c, s, strat, delta).to_dict())


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str
    dataset: dict = None
    train: dict = None
    algorithms: tuple = ()
    budget: dict = None
    target_accuracy: float = None
    fixed_variance: float = None
    attack: dict = None
    accounting: dict = None
    repeats: int = 1
    seed: int = 0
    name: str = "experiment"
    output: dict = None

    def to_dict(self):
        return {
            "name": self.name, "protocol": self.protocol, "seed": self.seed,
            "repeats": self.repeats, "dataset": copy.deepcopy(self.dataset),
            "train": copy.deepcopy(self.train),
            "algorithms": [a.to_dict() for a in self.algorithms],
            "budget": copy.deepcopy(self.budget), "target_accuracy": self.target_accuracy,
            "fixed_variance": self.fixed_variance, "attack": copy.deepcopy(self.attack),
            "accounting": copy.deepcopy(self.accounting), "output": copy.deepcopy(self.output),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("", f"invalid JSON: {e}") from None
        return cls.from_dict(d)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError("", f"cannot read config {path}: {e.strerror}") from None
        return cls.from_json(text)

    @classmethod
    def from_dict(cls, d):
        _check_keys(d, {"name", "protocol", "seed", "repeats", "dataset", "train",
                        "algorithms", "budget", "target_accuracy", "fixed_variance",
                        "attack", "accounting", "output", "delta"}, "")
        protocol = _req(d, "protocol", "")
        if protocol not in PROTOCOLS:
            raise ConfigError("protocol", f"must be one of {PROTOCOLS}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        repeats = d.get("repeats", 1 if protocol == "accounting" else 3)
        if not isinstance(repeats, int) or repeats < 1:
            raise ConfigError("repeats", "must be a positive integer")
        kw = dict(protocol=protocol, seed=seed, repeats=repeats,
                  name=d.get("name", "experiment"), output=d.get("output"))

        if protocol == "accounting":
            acc = _req(d, "accounting", "")
            _check_keys(acc, {"q", "sigma", "sigma_schedule", "T", "delta"}, "accounting")
            _req(acc, "q", "accounting")
            _req(acc, "T", "accounting")
            if "sigma" not in acc and "sigma_schedule" not in acc:
                raise ConfigError("accounting.sigma", "give sigma or sigma_schedule")
            _wrap("accounting", _accounting_inputs, acc)
            return cls(accounting=copy.deepcopy(acc), **kw)

        ds = _req(d, "dataset", "")
        _validate_dataset(ds)
        tr = dict(_req(d, "train", ""))
        _check_keys(tr, {"layer_sizes", "batch_size", "lr", "max_iters", "eval_every",
                         "activation"}, "train")
        for k in ("layer_sizes", "batch_size", "max_iters"):
            _req(tr, k, "train")
        _wrap("train", TrainConfig, tr["layer_sizes"], tr["batch_size"], tr.get("lr", 0.1),
              tr["max_iters"], tr.get("eval_every", 100), activation=tr.get("activation", "relu"))
        T = tr["max_iters"]
        delta = d.get("delta", accountants.DEFAULT_DELTA)
        algs = d.get("algorithms")
        if not algs:
            raise ConfigError("algorithms", "at least one algorithm is required")
        algos = tuple(_algorithm_from_dict(a, f"algorithms[{i}]", T, delta)
                      for i, a in enumerate(algs))
        kw.update(dataset=copy.deepcopy(ds), train=tr, algorithms=algos)

        if protocol == "acc_at_budget":
            b = _req(d, "budget", "")
            _check_keys(b, {"epsilon", "methods"}, "budget")
            eps = _req(b, "epsilon", "budget")
            if not isinstance(eps, (int, float)) or not eps > 0:
                raise ConfigError("budget.epsilon", "must be a positive number")
            methods = b.get("methods", list(METHODS))
            for i, m in enumerate(methods):
                _wrap(f"budget.methods[{i}]", accountants.method_key, m)
            if any(a.privacy is None for a in algos):
                raise ConfigError("algorithms", "budget protocols need private algorithms")
            kw["budget"] = {"epsilon": float(eps),
                            "methods": [accountants.method_key(m) for m in methods]}
        if protocol.startswith("privacy_at_acc"):
            a = _req(d, "target_accuracy", "")
            if not isinstance(a, (int, float)) or not 0.0 <= a <= 1.0:
                raise ConfigError("target_accuracy", "must lie in [0, 1]")
            kw["target_accuracy"] = float(a)
        if protocol == "privacy_at_acc_fixed_variance":
            v = _req(d, "fixed_variance", "")
            if not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError("fixed_variance", "must be a positive number")
            kw["fixed_variance"] = float(v)
        if protocol == "resilience":
            at = dict(d.get("attack") or {})
            _check_keys(at, {"targets", "iteration", "max_iters", "threshold", "seed_kind",
                             "history", "c1", "max_backtracks", "unit_scaling", "rel_tol"},
                        "attack")
            _wrap("attack", AttackConfig.from_dict,
                  {k: v for k, v in at.items() if k not in ("targets", "iteration")})
            if not isinstance(at.get("targets", 20), int) or at.get("targets", 20) < 0:
                raise ConfigError("attack.targets", "must be a non-negative integer")
            if at.get("targets", 20) > tr["batch_size"]:
                raise ConfigError("attack.targets", "cannot exceed the batch size")
            kw["attack"] = at
        return cls(**kw)


def _validate_dataset(ds):
    if not isinstance(ds, dict):
        raise ConfigError("dataset", "expected an object")
    kind = _req(ds, "kind", "dataset")
    common = {"kind", "test_ratio", "limit", "split_seed"}
    if kind == "synthetic":
        _check_keys(ds, common | {"n", "num_features", "num_classes", "seed", "flip_prob"},
                    "dataset")
        for k in ("n", "num_features", "num_classes"):
            _req(ds, k, "dataset")
    elif kind == "idx":
        _check_keys(ds, common | {"images", "labels", "test_images", "test_labels",
                                  "num_classes"}, "dataset")
        _req(ds, "images", "dataset")
        _req(ds, "labels", "dataset")
    elif kind == "csv":
        _check_keys(ds, common | {"path", "num_classes", "normalize"}, "dataset")
        _req(ds, "path", "dataset")
    else:
        raise ConfigError("dataset.kind", "must be synthetic, idx or csv")
    r = ds.get("test_ratio", 0.2)
    if r is not None and not (isinstance(r, (int, float)) and 0.0 <= r < 1.0):
        raise ConfigError("dataset.test_ratio", "must lie in [0, 1)")


def load_dataset(spec, base_dir="."):
    """Return ``(train, test)`` for a dataset spec; ``test`` may equal ``train``."""
    def p(x):
        x = os.path.expandvars(x)
        return x if os.path.isabs(x) else os.path.join(base_dir, x)
    kind = spec["kind"]
    test = None
    if kind == "synthetic":
        ds = synth_attributes(spec["n"], spec["num_features"], spec["num_classes"],
                              spec.get("seed", 0), spec.get("flip_prob", 0.1))
    elif kind == "idx":
        ds = load_idx(p(spec["images"]), p(spec["labels"]), spec.get("num_classes"),
                      name=os.path.basename(spec["images"]))
        if spec.get("test_images"):
            test = load_idx(p(spec["test_images"]), p(spec["test_labels"]), ds.num_classes)
    else:
        ds = load_csv(p(spec["path"]), spec.get("normalize", True), spec.get("num_classes"),
                      name=os.path.basename(spec["path"]))
    if spec.get("limit"):
        ds = ds.subset(np.arange(min(int(spec["limit"]), len(ds))))
    ratio = spec.get("test_ratio", 0.2)
    if test is None and ratio:
        return train_test_split(ds, ratio, spec.get("split_seed", 0))
    return ds, (test if test is not None else ds)


# ------------------------------------------------------------- accounting

def _schedule_from(value):
    if isinstance(value, DecaySchedule):
        return value
    if isinstance(value, dict):
        # a bare noise schedule would otherwise floor at its base and never decay
        if "floor" not in value and value.get("kind", "constant") != "constant" and "base" in value:
            value = {**value, "floor": default_floor(float(value["base"]), for_noise=True)}
        return DecaySchedule.from_dict(value)
    return DecaySchedule("constant", float(value))


def _accounting_inputs(acc):
    sched = _schedule_from(acc.get("sigma_schedule", acc.get("sigma")))
    q, T = float(acc["q"]), int(acc["T"])
    delta = float(acc.get("delta", accountants.DEFAULT_DELTA))
    if T < 0:
        raise InvalidParameterError("T must be >= 0")
    accountants._check_q(q)
    accountants._check_delta(delta)
    return q, sched, delta, T


def compare_accountants(q, sigma_schedule, delta, T, return_ledger=False):
    """Total epsilon under all five methods for ``T`` steps of a sigma schedule."""
    sched = _schedule_from(sigma_schedule)
    if T < 0:
        raise InvalidParameterError("T must be >= 0")
    sigmas = [sched.value(t) for t in range(int(T))]
    ledger = accountants.ledger_from_sigmas(q, sigmas, delta) if T else None
    totals = ledger.totals if ledger else {m: 0.0 for m in METHODS}
    rows = [{"method": METHOD_LABELS[m], "key": m, "epsilon": totals[m]} for m in METHODS]
    return (rows, ledger) if return_ledger else rows


# ------------------------------------------------------------- running

@dataclass
class ExperimentReport:
    config: dict
    runs: list = field(default_factory=list)        # per (algorithm, seed[, method]) records
    aggregate: list = field(default_factory=list)   # mean/std rows
    accounting: list = None
    attack: list = None

    def to_dict(self):
        d = {"config": self.config, "runs": self.runs, "aggregate": self.aggregate}
        if self.accounting is not None:
            d["accounting"] = self.accounting
        if self.attack is not None:
            d["attack"] = self.attack
        return round_sig(d)


def _train_cfg(cfg: ExperimentConfig, seed, **kw):
    tr = cfg.train
    return TrainConfig(tr["layer_sizes"], tr["batch_size"], tr.get("lr", 0.1), tr["max_iters"],
                       tr.get("eval_every", 100), seed=seed,
                       activation=tr.get("activation", "relu"), **kw)


def _summarise(report):
    return {"iterations": report.iterations, "termination": report.termination_reason,
            "accuracy": report.final_accuracy, "loss": report.final_loss,
            "target_attained": report.target_attained, "epsilon": report.epsilon,
            "flags": report.flags}


def _aggregate(runs, keys):
    groups = {}
    for r in runs:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    rows = []
    for gk, rs in groups.items():
        row = dict(zip(keys, gk))
        row["seeds"] = [r["seed"] for r in rs]
        for metric in ("accuracy", "iterations"):
            vals = np.array([r[metric] for r in rs if r.get(metric) is not None], dtype=float)
            if vals.size:
                row[f"{metric}_mean"] = float(np.mean(vals))
                row[f"{metric}_std"] = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        for m in METHODS:
            vals = [r["epsilon"][m] for r in rs if r.get("epsilon")]
            if vals:
                row[f"eps_{m}_mean"] = float(np.mean(vals))
        if "asr" in rs[0]:
            vals = [r["asr"] for r in rs if r["asr"] is not None]
            row["asr_mean"] = float(np.mean(vals)) if vals else None
        rows.append(row)
    return rows


class _Logs:
    """Collects iteration and ledger rows from every run in a stable order."""

    def __init__(self):
        self.iter_rows, self.ledger_rows, self.max_layers = [], [], 0

    def add(self, algorithm, seed, method, report):
        self.max_layers = max(self.max_layers, report.model.num_layers)
        for r in report.rows:
            self.iter_rows.append((algorithm, seed, method, r))
        if report.ledger is not None:
            for row in report.ledger.rows():
                self.ledger_rows.append((algorithm, seed, method) + tuple(row))

    def write(self, out_dir):
        from .trainer import _fmt
        with open(os.path.join(out_dir, "iterations.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["algorithm", "seed", "budget_method"] + list(ROW_FIELDS)
                       + [f"S_t_layer{l}" for l in range(self.max_layers)])
            for alg, seed, method, r in self.iter_rows:
                per = list(r.get("S_t_layers") or [])
                per += [None] * (self.max_layers - len(per))
                w.writerow([alg, seed, method or ""] + [_fmt(r.get(k)) for k in ROW_FIELDS]
                           + [_fmt(v) for v in per])
        with open(os.path.join(out_dir, "ledger.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["algorithm", "seed", "budget_method"] + list(LEDGER_COLUMNS))
            for row in self.ledger_rows:
                alg, seed, method, t = row[:4]
                w.writerow([alg, seed, method or "", t] + [repr(float(v)) for v in row[4:]])


def run_experiment(cfg: ExperimentConfig, out_dir=None, base_dir=".") -> ExperimentReport:
    """Run every (algorithm, seed) required by the protocol and emit reports."""
    report = ExperimentReport(cfg.to_dict())
    logs = _Logs()
    if out_dir is None and cfg.output:
        out_dir = cfg.output.get("dir")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    if cfg.protocol == "accounting":
        q, sched, delta, T = _accounting_inputs(cfg.accounting)
        rows, ledger = compare_accountants(q, sched, delta, T, return_ledger=True)
        report.accounting = rows
        if ledger is not None:
            for row in ledger.rows():
                logs.ledger_rows.append(("accounting", cfg.seed, None) + tuple(row))
        _emit(report, logs, out_dir)
        return report

    train, test = load_dataset(cfg.dataset, base_dir)
    seeds = [cfg.seed + r for r in range(cfg.repeats)]
    attack_rows = []
    for alg in cfg.algorithms:
        for seed in seeds:
            if cfg.protocol == "train":
                rep = train_dp(train, _train_cfg(cfg, seed), alg.privacy_spec(), eval_ds=test)
                logs.add(alg.name, seed, None, rep)
                report.runs.append({"algorithm": alg.name, "seed": seed, **_summarise(rep)})
            elif cfg.protocol == "acc_at_budget":
                for m in cfg.budget["methods"]:
                    rep = run_until_budget(train, _train_cfg(cfg, seed), alg.privacy_spec(),
                                           m, cfg.budget["epsilon"], eval_ds=test)
                    logs.add(alg.name, seed, m, rep)
                    report.runs.append({"algorithm": alg.name, "seed": seed, "method": m,
                                        **_summarise(rep)})
            elif cfg.protocol.startswith("privacy_at_acc"):
                spec = alg.privacy_spec(cfg.fixed_variance)
                rep = run_until_accuracy(train, _train_cfg(cfg, seed), spec,
                                         cfg.target_accuracy, eval_ds=test)
                logs.add(alg.name, seed, None, rep)
                report.runs.append({"algorithm": alg.name, "seed": seed, **_summarise(rep)})
            else:  # resilience
                at = cfg.attack or {}
                it = int(at.get("iteration", 0))
                k = int(at.get("targets", 20))
                tcfg = _train_cfg(cfg, seed)
                tcfg = TrainConfig(**{**tcfg.to_dict(), "max_iters": it + 1,
                                      "dump_iterations": (it,), "dump_targets": k})
                rep = train_dp(train, tcfg, alg.privacy_spec(), eval_ds=test)
                acfg = AttackConfig.from_dict({x: v for x, v in at.items()
                                               if x not in ("targets", "iteration")})
                shape = train.feature_shape if len(train.feature_shape) <= 2 else None
                ar = evaluate_resilience(rep.dump, range(k), acfg, it, seed, shape)
                logs.add(alg.name, seed, None, rep)
                summ = ar.summary()
                report.runs.append({"algorithm": alg.name, "seed": seed, "asr": summ["asr"],
                                    "attack_iterations": summ["mean_iterations"],
                                    "attack_mse": summ["mean_mse"],
                                    "epsilon": rep.epsilon})
                attack_rows.append({"algorithm": alg.name, "seed": seed, **summ})
    keys = ["algorithm", "method"] if cfg.protocol == "acc_at_budget" else ["algorithm"]
    report.aggregate = _aggregate(report.runs, keys)
    if cfg.protocol == "resilience":
        report.attack = attack_rows
    _emit(report, logs, out_dir)
    return report


def _emit(report, logs, out_dir):
    if not out_dir:
        return
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    logs.write(out_dir)
    if report.attack is not None:
        with open(os.path.join(out_dir, "attack.json"), "w") as f:
            json.dump(round_sig(report.attack), f, indent=2, sort_keys=True)


def format_table(rows):
    """Plain-text table for compare_accountants output."""
    lines = [f"{'method':<8}{'epsilon':>14}"]
    for r in rows:
        lines.append(f"{r['method']:<8}{r['epsilon']:>14.6g}")
    return "\n".join(lines)


__all__ = ["ExperimentConfig", "ExperimentReport", "AlgorithmSpec", "run_experiment",
           "compare_accountants", "load_dataset", "round_sig", "format_table",
           "DynaDPError", "SensitivityStrategy"]
