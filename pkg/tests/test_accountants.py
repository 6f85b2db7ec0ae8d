import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynadp import accountants as acc
from dynadp.accountants import (DEFAULT_ORDERS, METHODS, BudgetLedger, PrivacyConditionWarning,
                                amplify, compose_advanced, compose_all, compose_base, compose_ma,
                                compose_optimal, compose_zcdp, ledger_from_sigmas,
                                per_step_epsilon, rdp_per_step, rdp_to_dp)
from dynadp.errors import InvalidParameterError
from oracles import composition_oracle, rdp_integer_oracle, rdp_quadrature_oracle


def test_per_step_epsilon_and_amplification():
    eps = per_step_epsilon(6.0, 1e-5)
    assert eps == pytest.approx(math.sqrt(2 * math.log(1.25e5)) / 6.0, rel=1e-15)
    e_amp, d_amp = amplify(eps, 1e-5, 0.01)
    assert e_amp == pytest.approx(math.log(1 + 0.01 * (math.exp(eps) - 1)), rel=1e-14)
    assert d_amp == pytest.approx(1e-7)
    with pytest.raises(InvalidParameterError):
        per_step_epsilon(0.0, 1e-5)
    with pytest.raises(InvalidParameterError):
        amplify(1.0, 1e-5, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.001, 0.05), st.lists(st.floats(2.0, 20.0), min_size=1, max_size=40),
       st.sampled_from([1e-5, 1e-6, 1e-3]))
def test_closed_form_accountants_match_high_precision_oracle(q, sigmas, delta):
    got = ledger_from_sigmas(q, sigmas, delta).totals
    ref = composition_oracle(q, sigmas, delta)
    for m in ("basec", "advc", "optc", "zcdp"):
        assert got[m] == pytest.approx(ref[m], rel=1e-11), m


@pytest.mark.parametrize("q,sigma", [(0.01, 6.0), (0.05, 2.0), (0.001, 20.0), (0.02, 1.1)])
@pytest.mark.parametrize("alpha", [2, 3, 8, 32, 64])
def test_rdp_integer_orders_match_binomial_oracle(q, sigma, alpha):
    got = acc.kernels.rdp_subsampled_gaussian(q, sigma, np.array([float(alpha)]))[0]
    assert got == pytest.approx(rdp_integer_oracle(q, sigma, alpha), rel=1e-9)


@pytest.mark.parametrize("q,sigma", [(0.01, 6.0), (0.05, 2.0), (0.001, 20.0), (0.03, 4.24)])
@pytest.mark.parametrize("alpha", [1.25, 1.5, 2.75, 7.5, 20.25, 63.75])
def test_rdp_fractional_orders_match_quadrature(q, sigma, alpha):
    got = acc.kernels.rdp_subsampled_gaussian(q, sigma, np.array([alpha]))[0]
    assert got == pytest.approx(rdp_quadrature_oracle(q, sigma, alpha), rel=1e-7, abs=1e-15)


def test_quadrature_oracle_refuses_huge_orders():
    with pytest.raises(ValueError):
        rdp_quadrature_oracle(0.01, 6.0, 128.0)


def test_ma_conversion_on_restricted_grid_matches_oracle():
    orders = np.array([2.0, 4.5, 8.0, 16.0, 32.0])
    q, sigma, T, delta = 0.01, 6.0, 1000, 1e-5
    rdp = np.array([rdp_quadrature_oracle(q, sigma, a) for a in orders]) * T
    ref = min(rdp + math.log(1 / delta) / (orders - 1))
    assert compose_ma(q, [sigma] * T, delta, orders) == pytest.approx(ref, rel=1e-6)


def test_rdp_is_monotone_in_order():
    r = rdp_per_step(0.01, 4.0)
    assert np.all(np.diff(r) >= -1e-15)
    assert r.flags.writeable is False


def test_rdp_to_dp_picks_minimising_order():
    eps, order = rdp_to_dp(np.zeros(len(DEFAULT_ORDERS)), 1e-5)
    assert order == DEFAULT_ORDERS[-1]
    assert eps == pytest.approx(math.log(1e5) / (DEFAULT_ORDERS[-1] - 1))


def test_ledger_running_totals_equal_recomputation():
    sigmas = list(np.linspace(6.0, 3.0, 300))
    led = BudgetLedger(0.01)
    for s in sigmas:
        led.append(s)
    assert [h for h in led.history][-1] == led.totals
    again = compose_all(0.01, led.sigmas)
    for m in METHODS:
        assert again[m] == led.totals[m]          # bit-for-bit
    assert compose_base(led) == led.totals["basec"]
    assert compose_advanced(led) == led.totals["advc"]
    assert compose_optimal(led) == led.totals["optc"]
    assert compose_zcdp(0.01, sigmas) == led.totals["zcdp"]
    assert compose_ma(0.01, sigmas) == led.totals["ma"]


def test_totals_if_does_not_mutate():
    led = ledger_from_sigmas(0.01, [6.0] * 10)
    before = dict(led.totals)
    peek = led.totals_if(5.0)
    assert led.totals == before and len(led) == 10
    led.append(5.0)
    assert led.totals == peek


@settings(max_examples=20, deadline=None)
@given(st.floats(0.001, 0.05), st.floats(2.0, 20.0), st.integers(1, 60))
def test_totals_monotone_in_steps_and_noise(q, sigma, T):
    a = compose_all(q, [sigma] * T)
    b = compose_all(q, [sigma] * (T + 1))
    c = compose_all(q, [sigma * 1.5] * T)
    for m in METHODS:
        assert b[m] >= a[m]
        assert c[m] <= a[m] + 1e-12


def test_empty_schedule_costs_nothing():
    assert compose_all(0.01, []) == {m: 0.0 for m in METHODS}
    assert BudgetLedger(0.01).totals == {m: 0.0 for m in METHODS}
    with pytest.raises(InvalidParameterError):
        compose_zcdp(0.01, [])


def test_condition_warning():
    with pytest.warns(PrivacyConditionWarning):
        compose_zcdp(0.1, [1.0])          # 0.1 >= 1/16
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        compose_zcdp(0.01, [6.0])


def test_ledger_csv_full_precision(tmp_path):
    led = ledger_from_sigmas(0.01, [6.0, 5.5, 5.0])
    p = tmp_path / "ledger.csv"
    led.write_csv(p)
    rows = list(csv.reader(open(p)))
    assert tuple(rows[0]) == acc.LEDGER_COLUMNS
    assert float(rows[-1][rows[0].index("zcdp")]) == led.totals["zcdp"]
    assert int(rows[2][0]) == 1


def test_method_key_and_validation():
    assert acc.method_key("zCDP") == "zcdp"
    with pytest.raises(InvalidParameterError):
        acc.method_key("rdp")
    with pytest.raises(InvalidParameterError):
        BudgetLedger(0.01, delta=1.0)
    with pytest.raises(InvalidParameterError):
        BudgetLedger(1.5)
