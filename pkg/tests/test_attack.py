import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize, rosen, rosen_der

from conftest import small_model
from dynadp.attack import (AttackConfig, AttackReport, analytic_fc_recover, attack_loss_and_grad,
                           evaluate_resilience, gradient_distance, lbfgs_minimize, make_seed,
                           mse, patterned_seed, reconstruct, reconstruct_batch)
from dynadp.datasets import synth_attributes
from dynadp.errors import InvalidParameterError, MissingDumpEntryError, NotRecoverableError, ShapeMismatchError
from dynadp.model import ACTIVATIONS, GradientSet, per_example_gradients
from dynadp.ndcore import Purpose, RngStream
from dynadp.policies import preset
from dynadp.trainer import PrivacySpec, TrainConfig, train_dp


def attack_fd_rel_error(model, X, labels, leaked, scale, h=1e-6):
    D, G = attack_loss_and_grad(model, X, labels, leaked, scale)
    fd = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        fd[idx] = (attack_loss_and_grad(model, Xp, labels, leaked, scale)[0]
                   - attack_loss_and_grad(model, Xm, labels, leaked, scale)[0]) / (2 * h)
    return np.linalg.norm(G - fd) / max(np.linalg.norm(G), np.linalg.norm(fd), 1e-300)


@pytest.mark.parametrize("activation", ACTIVATIONS)
@pytest.mark.parametrize("n", [1, 2])
def test_attack_gradient_matches_finite_differences(activation, n):
    g = np.random.default_rng(n)
    for seed in range(3):
        m = small_model((6, 5, 4), seed=seed, activation=activation)
        xt, labels = g.uniform(size=(n, 6)), g.integers(0, 4, n)
        leaked = per_example_gradients(m, xt, labels, scale=1.0)
        total = leaked[0] if n == 1 else leaked[0] + leaked[1]
        X = g.uniform(size=(n, 6))
        D, _ = attack_loss_and_grad(m, X, labels, total, 1.0)
        assert D == pytest.approx(gradient_distance(
            sum(per_example_gradients(m, X, labels, scale=1.0)[1:],
                per_example_gradients(m, X, labels, scale=1.0)[0]), total), rel=1e-12)
        assert attack_fd_rel_error(m, X, labels, total, 1.0) < 1e-5


def test_attack_loss_zero_at_truth():
    m = small_model(activation="sigmoid")
    x = np.linspace(0.1, 0.9, 6)[None]
    leaked = per_example_gradients(m, x, [1], scale=0.5)[0]
    D, G = attack_loss_and_grad(m, x, [1], leaked, 0.5)
    assert D == 0.0 and not np.any(G)


def test_lbfgs_rosenbrock_matches_scipy():
    x0 = np.array([-1.2, 1.0, -0.5, 0.8])
    ours = lbfgs_minimize(lambda x: (rosen(x), rosen_der(x)), x0, 500, f_tol=1e-20)
    ref = minimize(rosen, x0, jac=rosen_der, method="L-BFGS-B", options={"maxiter": 500})
    np.testing.assert_allclose(ours.x, ref.x, atol=1e-4)
    np.testing.assert_allclose(ours.x, np.ones(4), atol=1e-6)
    assert all(a >= b for a, b in zip(ours.history, ours.history[1:]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_lbfgs_quadratic_matches_linear_solve(seed, n):
    g = np.random.default_rng(seed)
    A = g.normal(size=(n, n))
    H = A @ A.T + n * np.eye(n)
    b = g.normal(size=n)
    res = lbfgs_minimize(lambda x: (0.5 * x @ H @ x - b @ x, H @ x - b), np.zeros(n), 200,
                         callback=lambda k, x, f: np.linalg.norm(H @ x - b) < 1e-10)
    np.testing.assert_allclose(res.x, np.linalg.solve(H, b), atol=1e-8)


def test_lbfgs_statuses():
    assert lbfgs_minimize(lambda x: (float(x @ x), 2 * x), np.zeros(3), 10).status == "stationary"
    assert lbfgs_minimize(lambda x: (float(x @ x), 2 * x), np.zeros(3), 10,
                          f_tol=0.0).status == "converged"
    assert lbfgs_minimize(lambda x: (float(x @ x), 2 * x), np.ones(3), 0).status == "max_iters"
    r = lbfgs_minimize(lambda x: (float("nan"), x), np.ones(3), 5)
    assert r.status == "non-finite"
    # an oracle whose gradient points uphill can never satisfy Armijo
    r = lbfgs_minimize(lambda x: (float(x @ x), -2 * x), np.ones(3), 5, max_backtracks=5)
    assert r.status == "line-search-failed"


def test_analytic_recovery_exact_and_refusals():
    m = small_model((8, 6, 3), activation="sigmoid")
    x = np.random.default_rng(0).uniform(size=8)
    g = per_example_gradients(m, x[None], [2], scale=0.02)[0]
    rec, info = analytic_fc_recover(g.weights[0], g.biases[0], return_info=True)
    np.testing.assert_allclose(rec, x, rtol=1e-10)
    assert info["single_example"]
    two = per_example_gradients(m, np.stack([x, 1 - x]), [2, 0], scale=0.02)
    s = two[0] + two[1]
    assert not analytic_fc_recover(s.weights[0], s.biases[0], return_info=True)[1]["single_example"]
    with pytest.raises(NotRecoverableError):
        analytic_fc_recover(np.zeros((8, 6)), np.zeros(6))
    with pytest.raises(ShapeMismatchError):
        analytic_fc_recover(np.zeros((8, 6)), np.zeros(5))


def test_seeds():
    r = RngStream(1, Purpose.ATTACK)
    s = patterned_seed((8, 8), r)
    assert s.shape == (8, 8) and 0 <= s.min() and s.max() < 1
    np.testing.assert_array_equal(s, patterned_seed((8, 8), r))
    # removing the per-pixel noise half leaves an exactly repeating 4x4 tile
    pattern = s - 0.5 * r.child(slot=1).uniform((8, 8))
    np.testing.assert_allclose(pattern[:4, :4], pattern[4:, 4:], atol=1e-15)
    np.testing.assert_allclose(pattern[:4, :4], pattern[:4, 4:], atol=1e-15)
    assert make_seed("uniform_random", 5, r).shape == (5,)
    with pytest.raises(InvalidParameterError):
        make_seed("zeros", 5, r)
    with pytest.raises(InvalidParameterError):
        patterned_seed((2, 2, 2), r)


def test_reconstruct_nonprivate_sigmoid_is_exact():
    m = small_model((16, 12, 4), seed=1, activation="sigmoid")
    x = np.random.default_rng(2).uniform(size=16)
    g = per_example_gradients(m, x[None], [3], scale=0.1)[0]
    row = reconstruct(m, g, 3, AttackConfig(max_iters=300), x_true=x, grad_scale=0.1)
    assert row.success and row.mse < 1e-10 and row.iterations < 300
    zero = reconstruct(m, g, 3, AttackConfig(max_iters=0), x_true=x, grad_scale=0.1)
    assert not zero.success and zero.iterations == 0


def test_reconstruct_rejects_mismatched_snapshot():
    m = small_model((16, 12, 4), activation="sigmoid")
    with pytest.raises(ShapeMismatchError):
        reconstruct(m, GradientSet.zeros_like(small_model((16, 10, 4))), 0)


def test_reconstruct_batch_two_examples():
    m = small_model((10, 16, 4), seed=3, activation="sigmoid")
    xs = np.random.default_rng(4).uniform(size=(2, 10))
    per = per_example_gradients(m, xs, [0, 1], scale=0.5)
    rows = reconstruct_batch(m, per[0] + per[1], [0, 1], AttackConfig(max_iters=500),
                             xs_true=xs, grad_scale=0.5)
    assert len(rows) == 2 and all(r.mse < 1e-6 for r in rows)
    with pytest.raises(InvalidParameterError):
        reconstruct_batch(m, per[0], [0] * 5)


def test_report_aggregates_and_json(tmp_path):
    assert AttackReport([], 0.7, 300).asr is None
    ds = synth_attributes(200, 16, 4, seed=0)
    cfg = TrainConfig((16, 12, 4), 10, max_iters=1, dump_iterations=(0,), dump_targets=3,
                      activation="sigmoid", seed=1)
    rep = train_dp(ds, cfg)
    ar = evaluate_resilience(rep.dump, range(3), AttackConfig(max_iters=200), seed=1)
    assert ar.asr == 1.0 and ar.mean_iterations > 0 and ar.mean_mse < 1e-6
    again = evaluate_resilience(rep.dump, range(3), AttackConfig(max_iters=200), seed=1)
    assert [r.x_rec.tolist() for r in again.rows] == [r.x_rec.tolist() for r in ar.rows]
    ar.write_json(tmp_path / "a.json")
    d = json.loads((tmp_path / "a.json").read_text())
    assert d["num_targets"] == 3 and len(d["targets"]) == 3
    ar.save_reconstructions(tmp_path / "r.npz")
    assert set(np.load(tmp_path / "r.npz").files) == {"target0", "target1", "target2"}
    with pytest.raises(MissingDumpEntryError):
        evaluate_resilience(rep.dump, [5], AttackConfig())
    with pytest.raises(MissingDumpEntryError):
        evaluate_resilience(rep.dump, [0], AttackConfig(), iteration=3)


def test_dp_noise_defeats_attack_on_small_model():
    ds = synth_attributes(200, 16, 4, seed=0)
    c, s, strat = preset("baseline", 0.05, 6.0, 10)
    cfg = TrainConfig((16, 12, 4), 10, max_iters=1, dump_iterations=(0,), dump_targets=3,
                      activation="sigmoid", seed=1)
    rep = train_dp(ds, cfg, PrivacySpec(c, s, strat))
    ar = evaluate_resilience(rep.dump, range(3), AttackConfig(max_iters=100), seed=1)
    assert ar.asr == 0.0 and ar.mean_iterations is None
    assert all(r.mse > 0.7 for r in ar.rows)


def test_mse():
    assert mse([0, 0], [1, 1]) == 1.0
    assert mse(np.ones((2, 2)), np.ones(4)) == 0.0
