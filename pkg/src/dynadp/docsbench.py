"""Golden-value fixtures: runnable configs paired with expected results.

A fixture file is JSON of the form::

    {"fixtures": [
        {"name": "mnist_accounting",
         "config": "accounting_mnist.json",          # relative to the fixture file
         "provenance": "published", "source": "reference values, MNIST setting",
         "slow": false,
         "expected": [
             {"key": "accounting.zcdp", "value": 1.159, "tol": 0.001, "kind": "abs"},
             {"key": "accounting.ma", "range": [0.70, 0.95], "kind": "range"},
             {"key": "accounting.ma", "kind": "le", "other": "accounting.zcdp"}]}]}

Keys address the experiment report: ``accounting.<method>`` for accounting
runs and ``aggregate[algorithm=<name>].<metric>`` for training protocols.
Check kinds: ``abs`` (|delta| <= tol), ``rel`` (|delta| <= tol * |value|),
``range``, ``min``/``max`` (one-sided bound against ``value``) and
``le``/``ge`` (ordering against another key).
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field

from .errors import ConfigError

DEFAULT_FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures", "golden.json")
PROVENANCE = ("published", "derived", "control")
CHECK_KINDS = ("abs", "rel", "range", "min", "max", "le", "ge")
_SELECTOR = re.compile(r"^(\w+)\[(\w+)=(.+)\]$")


@dataclass(frozen=True)
class GoldenFixture:
    name: str
    config: str                  # absolute path to the experiment config
    expected: tuple
    provenance: str
    source: str = ""
    slow: bool = False

    def __post_init__(self):
        if self.provenance not in PROVENANCE:
            raise ConfigError(f"{self.name}.provenance", f"must be one of {PROVENANCE}")
        if not self.expected:
            raise ConfigError(f"{self.name}.expected", "at least one expectation required")
        for i, e in enumerate(self.expected):
            _validate_check(e, f"{self.name}.expected[{i}]")


def _validate_check(e, path):
    kind = e.get("kind")
    if kind not in CHECK_KINDS:
        raise ConfigError(f"{path}.kind", f"must be one of {CHECK_KINDS}")
    if "key" not in e:
        raise ConfigError(f"{path}.key", "required")
    if kind in ("abs", "rel") and ("value" not in e or "tol" not in e):
        raise ConfigError(path, f"'{kind}' checks need value and tol")
    if kind in ("min", "max") and "value" not in e:
        raise ConfigError(path, f"'{kind}' checks need value")
    if kind == "range" and len(e.get("range", ())) != 2:
        raise ConfigError(f"{path}.range", "need [low, high]")
    if kind in ("le", "ge") and "other" not in e:
        raise ConfigError(f"{path}.other", "ordering checks need another key")


def load_fixtures(path=DEFAULT_FIXTURES):
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError("", f"cannot read fixtures {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("", f"invalid fixture JSON: {e}") from None
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for i, d in enumerate(doc.get("fixtures", [])):
        for k in ("name", "config", "expected", "provenance"):
            if k not in d:
                raise ConfigError(f"fixtures[{i}].{k}", "required")
        cfg = d["config"] if os.path.isabs(d["config"]) else os.path.join(base, d["config"])
        out.append(GoldenFixture(d["name"], cfg, tuple(d["expected"]), d["provenance"],
                                 d.get("source", ""), bool(d.get("slow", False))))
    return out


@dataclass
class CheckResult:
    key: str
    kind: str
    expected: object
    actual: float
    delta: float
    passed: bool

    def describe(self):
        a = "missing" if self.actual is None else f"{self.actual:.6g}"
        d = "" if self.delta is None else f", delta={self.delta:+.3g}"
        return f"{self.key}={a} [{self.kind} {self.expected}{d}]"


@dataclass
class FixtureResult:
    name: str
    status: str                  # "pass" | "fail" | "skipped"
    checks: list = field(default_factory=list)
    reason: str = ""

    @property
    def passed(self):
        return self.status == "pass"

    def line(self):
        head = f"{self.status.upper():<7} {self.name}"
        if self.reason:
            head += f" ({self.reason})"
        return "\n".join([head] + [f"    {'ok ' if c.passed else 'BAD'} {c.describe()}"
                                   for c in self.checks])


def lookup(report: dict, key: str):
    """Resolve a dotted key with optional ``list[field=value]`` selectors."""
    cur = report
    parts = key.split(".")
    if parts[0] == "accounting" and len(parts) == 2:
        for row in report.get("accounting") or []:
            if row["key"] == parts[1]:
                return row["epsilon"]
        return None
    for part in parts:
        m = _SELECTOR.match(part)
        if m:
            lst, fld, val = m.groups()
            rows = cur.get(lst) if isinstance(cur, dict) else None
            cur = next((r for r in rows or [] if str(r.get(fld)) == val), None)
        elif isinstance(cur, dict):
            cur = cur.get(part)
        else:
            return None
        if cur is None:
            return None
    return cur


def _check(e, report):
    kind = e["kind"]
    actual = lookup(report, e["key"])
    if actual is None or not isinstance(actual, (int, float)) or math.isnan(actual):
        return CheckResult(e["key"], kind, e.get("value", e.get("range", e.get("other"))),
                           None, None, False)
    actual = float(actual)
    if kind in ("abs", "rel"):
        delta = actual - e["value"]
        bound = e["tol"] * (abs(e["value"]) if kind == "rel" else 1.0)
        return CheckResult(e["key"], kind, f"{e['value']} +/- {bound:.3g}", actual, delta,
                           abs(delta) <= bound)
    if kind == "range":
        lo, hi = e["range"]
        delta = 0.0 if lo <= actual <= hi else (actual - lo if actual < lo else actual - hi)
        return CheckResult(e["key"], kind, [lo, hi], actual, delta, delta == 0.0)
    if kind in ("min", "max"):
        delta = actual - e["value"]
        ok = delta >= 0 if kind == "min" else delta <= 0
        return CheckResult(e["key"], kind, e["value"], actual, delta, ok)
    other = lookup(report, e["other"])
    if other is None:
        return CheckResult(e["key"], kind, e["other"], actual, None, False)
    delta = actual - float(other)
    ok = delta <= 0 if kind == "le" else delta >= 0
    return CheckResult(e["key"], kind, f"{e['other']}={float(other):.6g}", actual, delta, ok)


def _missing_inputs(cfg_dict, base_dir):
    ds = cfg_dict.get("dataset") or {}
    missing = []
    for k in ("images", "labels", "test_images", "test_labels", "path"):
        if ds.get(k):
            p = os.path.expandvars(ds[k])
            p = p if os.path.isabs(p) else os.path.join(base_dir, p)
            if not os.path.exists(p):
                missing.append(ds[k])
    return missing


def verify_fixture(f: GoldenFixture, include_slow=True, report=None) -> FixtureResult:
    """Run the fixture's config (unless ``report`` is given) and compare."""
    from .harness import ExperimentConfig, run_experiment

    if report is None:
        if not os.path.exists(f.config):
            raise ConfigError(f"{f.name}.config", f"referenced config {f.config} does not exist")
        if f.slow and not include_slow:
            return FixtureResult(f.name, "skipped", reason="slow; pass --slow to run")
        with open(f.config) as fh:
            raw = json.load(fh)
        base = os.path.dirname(f.config)
        missing = _missing_inputs(raw, base)
        if missing:
            return FixtureResult(f.name, "skipped", reason=f"missing data {missing}")
        cfg = ExperimentConfig.from_dict(raw)
        report = run_experiment(cfg, out_dir=None, base_dir=base).to_dict()
    checks = [_check(e, report) for e in f.expected]
    return FixtureResult(f.name, "pass" if all(c.passed for c in checks) else "fail", checks)


__all__ = ["GoldenFixture", "FixtureResult", "CheckResult", "load_fixtures", "verify_fixture",
           "lookup", "DEFAULT_FIXTURES"]
