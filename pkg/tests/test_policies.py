import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynadp.errors import InvalidParameterError
from dynadp.model import GradientSet
from dynadp.policies import (PRESETS, DecaySchedule, Scope, SensitivityKind, SensitivityStrategy,
                             clip_factors, clip_per_example, constant, exponential_to, linear_to,
                             preset, sensitivity, sensitivity_from_norms)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def gradient_sets(draw, max_layers=3):
    m = draw(st.integers(1, max_layers))
    ws, bs = [], []
    for _ in range(m):
        r, c = draw(st.integers(1, 4)), draw(st.integers(1, 4))
        ws.append(draw(arrays(np.float64, (r, c), elements=finite)))
        bs.append(draw(arrays(np.float64, (c,), elements=finite)))
    return GradientSet(tuple(ws), tuple(bs))


def test_schedule_shapes():
    assert constant(3.0).value(10_000) == 3.0
    lin = DecaySchedule("linear", 4.0, 0.001, 2.0)
    assert lin.value(0) == 4.0 and lin.value(250) == pytest.approx(3.0)
    assert lin.value(10_000) == 2.0
    ex = DecaySchedule("exponential", 6.0, 0.01, 1.0)
    assert ex.value(100) == pytest.approx(6.0 * math.exp(-1.0))
    assert ex.value(10_000) == 1.0
    assert linear_to(4.0, 2.0, 100).value(100) == pytest.approx(2.0)
    assert exponential_to(6.0, 3.0, 100).value(100) == pytest.approx(3.0)
    with pytest.raises(InvalidParameterError):
        lin.value(-1)


def test_schedule_validation():
    for bad in [dict(kind="linear", base=0.0), dict(kind="linear", base=1.0, gamma=-1.0),
                dict(kind="linear", base=1.0, floor=2.0), dict(kind="cyclic", base=1.0, gamma=0.1),
                dict(kind="cyclic", base=1.0, gamma=(0.5, 0.0), cycle_len=10),
                dict(kind="cyclic", base=1.0, gamma=(0.0, 0.06), cycle_len=10),
                dict(kind="spiral", base=1.0)]:
        with pytest.raises((InvalidParameterError, ValueError)):
            DecaySchedule(**bad)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["constant", "linear", "exponential"]), st.floats(0.1, 100),
       st.floats(0, 0.01), st.floats(0.05, 1.0), st.integers(0, 5000))
def test_monotone_schedules_never_increase_and_respect_floor(kind, base, gamma, ff, t):
    s = DecaySchedule(kind, base, gamma, base * ff)
    assert s.floor <= s.value(t + 1) <= s.value(t) <= base


def test_cyclic_schedule_shape():
    V = 10
    g3, g4 = 0.5 / V, 0.1 / (2 * V)          # dips to half, envelope shrinks 10% per cycle
    s = DecaySchedule("cyclic", 8.0, (g3, g4), 0.5, V)
    vals = [s.value(t) for t in range(6 * V + 1)]
    assert vals[0] == 8.0
    assert vals[V] == pytest.approx(4.0)               # trough of cycle 0
    assert vals[2 * V] == pytest.approx(8.0 * 0.9)     # next envelope
    assert vals[3 * V] == pytest.approx(8.0 * 0.9 * 0.5)
    assert all(a >= b for a, b in zip(vals[:V], vals[1:V + 1]))             # descending half
    assert all(a <= b for a, b in zip(vals[V:2 * V], vals[V + 1:2 * V + 1]))  # ascending half
    peaks = [s.value(2 * V * k) for k in range(5)]
    assert all(a > b for a, b in zip(peaks, peaks[1:]))


def test_cyclic_roundtrip_and_floor():
    s = DecaySchedule("cyclic", 6.0, (0.05, 0.02), 1.0, 10)
    assert DecaySchedule.from_dict(s.to_dict()) == s
    assert min(s.value(t) for t in range(2000)) >= 1.0
    with pytest.raises(InvalidParameterError):
        DecaySchedule.from_dict({"kind": "linear", "base": 1.0, "bogus": 1})


@settings(max_examples=200, deadline=None)
@given(gradient_sets(), st.floats(1e-3, 1e3))
def test_clipping_properties(g, C):
    c = clip_per_example(g, C)
    # norm cap
    assert np.all(c.layer_norms() <= C)
    # idempotence (bitwise)
    cc = clip_per_example(c, C)
    for a, b in zip(c.weights + c.biases, cc.weights + cc.biases):
        np.testing.assert_array_equal(a, b)
    # direction preservation: each layer is a non-negative multiple of the input
    for l in range(g.num_layers):
        u, v = g.layer_vector(l), c.layer_vector(l)
        nu = math.hypot(*u)          # scaled internally, no underflow
        if nu == 0:
            assert not np.any(v)
            continue
        f = math.hypot(*v) / nu
        assert 0 < f <= 1.0 + 1e-15
        np.testing.assert_allclose(v, f * u, rtol=1e-12, atol=1e-300)
        if nu <= C:
            np.testing.assert_array_equal(u, v)


def test_clip_factors_match_scalar_rule():
    norms = np.array([[0.0, 1.0, 5.0], [2.0, 2.0, 0.5]])
    np.testing.assert_allclose(clip_factors(norms, 2.0), [[1, 1, 0.4], [1, 1, 1]])
    with pytest.raises(InvalidParameterError):
        clip_per_example(GradientSet((np.ones((1, 1)),), (np.ones(1),)), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(gradient_sets(max_layers=1), min_size=1, max_size=8), st.floats(1e-3, 1e3),
       st.sampled_from(list(SensitivityKind)), st.sampled_from(list(Scope)))
def test_sensitivity_bounded_by_C(batch, C, kind, scope):
    shapes = [(g.weights[0].shape, g.biases[0].shape) for g in batch]
    assume(len(set(shapes)) == 1)
    clipped = [clip_per_example(g, C) for g in batch]
    S = sensitivity(SensitivityStrategy(kind, scope), clipped, C)
    assert np.all(np.asarray(S) <= C)
    if kind is SensitivityKind.FIXED_C:
        assert np.all(np.asarray(S) == C)
    else:
        top = max(g.layer_norms()[0] for g in clipped)
        assert np.max(S) == pytest.approx(top, rel=1e-15)


def test_sensitivity_scopes():
    norms = np.array([[0.1, 0.7], [0.3, 0.2]])
    per = sensitivity_from_norms(SensitivityStrategy("l2_max", "per_layer"), norms, 1.0)
    np.testing.assert_array_equal(per, [0.3, 0.7])
    glob = sensitivity_from_norms(SensitivityStrategy("l2_max", "global"), norms, 1.0)
    assert glob == 0.7
    with pytest.raises(InvalidParameterError):
        sensitivity_from_norms(SensitivityStrategy(), np.zeros((0, 2)), 1.0)


def test_presets():
    T = 1000
    for name in PRESETS:
        out = preset(name, 4.0, 6.0, T)
        if name == "nonprivate":
            assert out == (None, None, None)
            continue
        c, s, strat = out
        assert c.value(0) == 4.0 and s.value(0) == 6.0
    c, s, strat = preset("dyn[S,sigma]", 4.0, 6.0, T)
    assert c.value(T) == pytest.approx(2.0)
    assert s.value(T) == pytest.approx(3.0)
    assert strat.kind is SensitivityKind.COMBINED
    _, s, _ = preset("dynSigma", 4.0, 6.0, T, sigma_decay="cyclic")
    assert s.kind.value == "cyclic" and min(s.value(t) for t in range(T)) >= 3.0
    _, s, _ = preset("dynSigma", 4.0, 1.5, T)
    assert s.value(T) == pytest.approx(1.0)                  # noise floor of 1.0
    with pytest.raises(InvalidParameterError):
        preset("fancy")
