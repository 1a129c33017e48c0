import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onnkit.errors import NumericalError, SpecError
from onnkit.net import LayerSpec as L, NetworkSpec, batch_ntk, build_network, forward
from onnkit.ntk import (RegressionSetup, analytic_ntk_fc, check_ntk, conv_jacobian, empirical_ntk, encode_targets,
                        estimate_performance, gram_spectrum, monte_carlo_ntk, ntk_perturbation_experiment,
                        ntk_regress, random_conv_kernel, select_lambda, widen)
from onnkit.presets import fc_reference


def loop_ntk(J):
    n, p = J.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(p):
                s += J[i, k] * J[j, k]
            out[i, j] = s
    return out


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# empirical NTK

def test_identity_jacobian():
    np.testing.assert_array_equal(empirical_ntk(np.eye(5)), np.eye(5))


def test_duplicate_rows():
    J = np.random.default_rng(0).standard_normal((3, 6))
    J = np.vstack([J, J[1]])
    theta = empirical_ntk(J)
    np.testing.assert_array_equal(theta[1], theta[3])
    np.testing.assert_array_equal(theta[:, 1], theta[:, 3])
    assert np.linalg.matrix_rank(theta) == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 10**6))
def test_empirical_matches_loop(n, p, seed):
    J = np.random.default_rng(seed).standard_normal((n, p))
    np.testing.assert_allclose(empirical_ntk(J), loop_ntk(J), rtol=0, atol=1e-12)


def test_check_ntk():
    check_ntk(empirical_ntk(np.random.default_rng(0).standard_normal((4, 10))))
    with pytest.raises(NumericalError):
        check_ntk(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(NumericalError):
        check_ntk(np.array([[1.0, 0.0], [0.0, -1.0]]))


# analytic and Monte Carlo kernels

def test_self_similarity_diagonal_linear_in_depth():
    X = np.random.default_rng(0).standard_normal((3, 5))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    diags = [np.diag(analytic_ntk_fc(X, L)) for L in (1, 2, 3, 4)]
    steps = np.diff(diags, axis=0)
    np.testing.assert_allclose(steps, steps[0:1].repeat(3, 0), rtol=0, atol=1e-14)
    np.testing.assert_allclose(diags[0], 2 / 5, rtol=1e-12)


def test_orthogonal_inputs_depth_one():
    d = 4
    X = math.sqrt(d) * np.eye(d)[:2]
    theta = analytic_ntk_fc(X, 1)
    assert theta[0, 1] == pytest.approx(1 / math.pi, abs=1e-14)


def test_zero_row_rejected():
    with pytest.raises(SpecError):
        analytic_ntk_fc(np.array([[1.0, 0.0], [0.0, 0.0]]), 2)


def test_analytic_exchangeable_and_psd():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((7, 5))
    perm = rng.permutation(7)
    theta = analytic_ntk_fc(X, 3)
    np.testing.assert_allclose(analytic_ntk_fc(X[perm], 3), theta[np.ix_(perm, perm)], rtol=1e-12)
    check_ntk(theta)
    np.testing.assert_allclose(analytic_ntk_fc(X[:3], 3, X), theta[:3], rtol=1e-12)


def test_depth2_analytic_matches_wide_monte_carlo():
    X = np.random.default_rng(4).standard_normal((6, 8))
    spec = fc_reference(8, 2, 64)
    mc = monte_carlo_ntk(spec, X, width_scale=64, n_seeds=8)
    assert rel_fro(mc, analytic_ntk_fc(X, 2)) < 0.1


def test_widen_scales_hidden_only():
    spec = fc_reference(5, 2, 10, outputs=3, parameterization="standard")
    wide = widen(spec, 4)
    assert wide.parameterization == "ntk"
    dense = [layer for layer in wide.layers if layer.kind == "dense"]
    assert [(d.fan_in, d.fan_out) for d in dense] == [(5, 40), (40, 40), (40, 3)]


def test_monte_carlo_single_seed_is_empirical():
    spec = fc_reference(4, 1, 16)
    X = np.random.default_rng(0).standard_normal((5, 4))
    net = build_network(widen(spec, 1), 3)
    np.testing.assert_array_equal(monte_carlo_ntk(spec, X, n_seeds=1, seed=3), batch_ntk(net, X))


def test_monte_carlo_variance_shrinks_with_seeds():
    spec = fc_reference(4, 1, 8)
    X = np.random.default_rng(0).standard_normal((4, 4))
    variances = []
    for n_seeds in (1, 4, 16):
        reps = [monte_carlo_ntk(spec, X, n_seeds=n_seeds, seed=1000 * r) for r in range(12)]
        variances.append(np.var(reps, axis=0).mean())
    assert variances[0] > variances[1] > variances[2]


def test_random_conv_kernel_matches_random_features():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((3, 1, 5, 5))
    m = 20000
    k = rng.standard_normal((m, 1, 3, 3))
    net = build_network(NetworkSpec((L.conv2d(1, m, 3), L.relu())), 0).with_params({"layer0.weight": k})
    feats = forward(net, X).reshape(3, -1)
    assert rel_fro(feats @ feats.T / m, random_conv_kernel(X, 3)) < 0.03
    np.testing.assert_allclose(random_conv_kernel(X[:2], 3, X), random_conv_kernel(X, 3)[:2], rtol=1e-12)


# kernel regression

def test_regress_interpolates():
    X = np.random.default_rng(6).standard_normal((20, 5))
    K = analytic_ntk_fc(X, 2)
    y = encode_targets(np.arange(20) % 10, "centered_one_hot", 10)
    pred = ntk_regress(K, K, y, 1e-12)
    assert np.abs(pred - y).max() < 1e-6


def test_regress_large_lambda_shrinks_to_zero():
    X = np.random.default_rng(6).standard_normal((20, 5))
    K = analytic_ntk_fc(X, 2)
    y = encode_targets(np.arange(20) % 3, "centered_one_hot", 3)
    pred = ntk_regress(K, K, y, 1e20)
    assert np.abs(pred).max() < 1e-15
    assert np.all(np.argmax(np.zeros_like(pred), axis=1) == 0)


def test_separable_blobs():
    rng = np.random.default_rng(7)
    centers = np.array([[3.0, 3.0], [-3.0, -3.0]])
    y_tr, y_te = rng.integers(0, 2, 60), rng.integers(0, 2, 40)
    x_tr = centers[y_tr] + 0.5 * rng.standard_normal((60, 2))
    x_te = centers[y_te] + 0.5 * rng.standard_normal((40, 2))
    pred = ntk_regress(analytic_ntk_fc(x_tr, 1), analytic_ntk_fc(x_te, 1, x_tr),
                       encode_targets(y_tr, "centered_one_hot", 2), 1e-3)
    assert np.mean(pred.argmax(1) == y_te) == 1.0


def test_regress_failure_reports_eigenvalue():
    K = np.array([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NumericalError, match="smallest eigenvalue"):
        ntk_regress(K, K, np.ones((2, 1)), 0.0)


def test_select_lambda_singleton():
    X = np.random.default_rng(0).standard_normal((30, 4))
    lam, _ = select_lambda(analytic_ntk_fc(X, 1), np.arange(30) % 3, RegressionSetup(lambda_grid=(1e-6,), n_classes=3))
    assert lam == 1e-6


GRID = (1e-8, 1e-4, 1e-2, 1.0, 10.0)


def test_select_lambda_noiseless_picks_minimum():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((60, 3))
    K = analytic_ntk_fc(X, 1)
    y = K @ rng.standard_normal(60) / 60  # lies in the kernel's span
    lam, _ = select_lambda(K, y, RegressionSetup(lambda_grid=GRID, target_encoding="raw"))
    assert lam == GRID[0]


def test_select_lambda_noisy_picks_larger():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((80, 3))
    K = analytic_ntk_fc(X, 1)
    y = X[:, 0] + 2.0 * rng.standard_normal(80)
    lam, _ = select_lambda(K, y, RegressionSetup(lambda_grid=GRID, target_encoding="raw"))
    assert lam > GRID[0]


def test_estimate_performance_returns_report():
    rng = np.random.default_rng(10)
    centers = rng.standard_normal((3, 6)) * 3
    y = rng.integers(0, 3, 90)
    x = centers[y] + rng.standard_normal((90, 6))
    rep = estimate_performance(None, x[:60], y[:60], x[60:], y[60:], RegressionSetup(n_classes=3),
                               reference="analytic_fc", depth=2)
    assert rep.reference == "analytic_fc" and rep.test_metric > 0.9
    assert set(rep.to_dict()) == {"lambda_star", "val_metric", "test_metric", "reference"}


def test_estimate_performance_monte_carlo_for_conv_spec():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((30, 1, 6, 6))
    y = rng.integers(0, 2, 30)
    spec = NetworkSpec((L.conv2d(1, 2, 3), L.relu(), L.flatten(), L.dense(32, 2)))
    rep = estimate_performance(spec, x[:20], y[:20], x[20:], y[20:], RegressionSetup(n_classes=2), n_seeds=2)
    assert rep.reference == "monte_carlo"


# spectrum

def test_rank_one_spectrum():
    J = np.outer(np.arange(1.0, 6.0), np.random.default_rng(0).standard_normal(9))
    rep = gram_spectrum(J)
    np.testing.assert_allclose(rep.cumulative_power, 1.0, rtol=1e-12)
    assert rep.count_at(0.95) == 1 and len(rep.eigenvalues) == 9


@pytest.mark.parametrize("n,p", [(10, 30), (30, 30)])
def test_flat_spectrum(n, p):
    q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((p, n)))
    rep = gram_spectrum(2.0 * q.T)
    assert rep.count_at(0.95) == math.ceil(0.95 * n)
    assert rep.counts_at[0.9] == math.ceil(0.9 * n)


def test_spectrum_rotation_invariant_and_monotone(rng):
    J = rng.standard_normal((12, 40)) * np.linspace(0.1, 3, 40)
    q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    a, b = gram_spectrum(J), gram_spectrum(q @ J)
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, atol=1e-8 * a.eigenvalues[0])
    np.testing.assert_allclose(a.cumulative_power, b.cumulative_power, atol=1e-8)
    assert np.all(np.diff(a.cumulative_power) >= 0) and a.cumulative_power[-1] == 1.0


def test_primal_and_dual_agree(rng):
    J = rng.standard_normal((15, 12))
    wide = np.hstack([J, np.zeros((15, 8))])
    np.testing.assert_allclose(gram_spectrum(wide).eigenvalues[:12], gram_spectrum(J).eigenvalues, rtol=1e-10)


def test_conv_jacobian_columns(rng):
    spec = NetworkSpec((L.conv2d(1, 2, 3), L.relu(), L.flatten(), L.dense(8, 2)), frontend_split=1)
    net = build_network(spec, 0)
    x = rng.standard_normal((5, 1, 4, 4))
    from onnkit.net import per_sample_jacobian
    full = per_sample_jacobian(net, x)
    np.testing.assert_allclose(conv_jacobian(net, x, chunk=2), full[:, :18], rtol=1e-12)


# perturbation scaling

def test_zero_delta_gives_zero():
    res = ntk_perturbation_experiment([8, 32], 0.0, n_trials=3)
    assert res.mean_dtheta == [0.0, 0.0]
    assert math.isnan(res.slope)


def test_doubling_delta_doubles_response():
    a = ntk_perturbation_experiment([64, 128], 0.05, n_trials=500, seed=2)
    b = ntk_perturbation_experiment([64, 128], 0.1, n_trials=500, seed=2)
    ratio = np.array(b.mean_dtheta) / np.array(a.mean_dtheta)
    assert np.all((ratio >= 1.6) & (ratio <= 2.4))


def test_needs_two_widths():
    with pytest.raises(SpecError):
        ntk_perturbation_experiment([16], 1.0)
