"""Empirical and infinite-width NTKs, kernel ridge regression, Gram spectra, perturbation scaling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import NumericalError, SpecError
from .metrics import CHUNK_BUDGET, jacobian_chunk
from .net import LayerSpec, Network, NetworkSpec, _im2col, batch_ntk, build_network, jacobian_factors

log = logging.getLogger(__name__)

TARGET_ENCODINGS = ("centered_one_hot", "one_hot", "raw")
DEFAULT_RELATIVE_GRID = (1e-6, 1e-4, 1e-2, 1.0, 1e2)
COS_SNAP = 1e-14


def empirical_ntk(J: np.ndarray) -> np.ndarray:
    J = np.asarray(J, dtype=np.float64)
    theta = J @ J.T
    return 0.5 * (theta + theta.T)


def check_ntk(theta: np.ndarray, rtol: float = 1e-9) -> None:
    """Raise if ``theta`` is not symmetric PSD within tolerance."""
    n = theta.shape[0]
    scale = max(np.abs(theta).max(), 1e-300)
    if np.abs(theta - theta.T).max() > rtol * scale:
        raise NumericalError("NTK matrix is not symmetric")
    floor = -1e-8 * np.trace(theta) / n
    low = np.linalg.eigvalsh(0.5 * (theta + theta.T))[0]
    if low < floor:
        raise NumericalError(f"NTK matrix has eigenvalue {low:.3e} below {floor:.3e}")


# ---------------------------------------------------------------------------
# infinite-width kernels


def _cosine(dots, norm):
    safe = np.where(norm > 0, norm, 1.0)
    cos = np.clip(dots / safe, -1.0, 1.0)
    # arccos has infinite slope at 1: rounding of 1e-16 in cos would move the angle
    # by 1e-8, so parallel pairs are snapped to exactly 1
    return np.where(cos > 1.0 - COS_SNAP, 1.0, cos)


def _arccos_step(s12, s11, s22):
    """One ReLU layer of the arc-cosine recursion (gain-2 convention)."""
    norm = np.sqrt(np.outer(s11, s22))
    cos = _cosine(s12, norm)
    th = np.arccos(cos)
    sig = norm * (np.sin(th) + (np.pi - th) * cos) / np.pi
    dot = (np.pi - th) / np.pi
    return sig, dot


def analytic_ntk_fc(X: np.ndarray, depth: int, X2: np.ndarray | None = None) -> np.ndarray:
    """NTK of an infinitely wide bias-free ReLU MLP with ``depth`` hidden layers.

    Matches the ntk-parameterized ``fc_reference`` of the same depth.
    ``X2`` gives the rectangular cross kernel K(X, X2).
    """
    if depth < 1:
        raise SpecError(f"depth must be >= 1, got {depth}")
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    X2 = X if X2 is None else np.asarray(X2, dtype=np.float64).reshape(len(X2), -1)
    for name, a in (("X", X), ("X2", X2)):
        if np.any(np.einsum("ij,ij->i", a, a) == 0):
            raise SpecError(f"{name} contains a zero-norm row; the arc-cosine kernel is undefined there")
    d = X.shape[1]
    s12 = X @ X2.T / d
    s11 = np.einsum("ij,ij->i", X, X) / d
    s22 = np.einsum("ij,ij->i", X2, X2) / d
    theta = s12
    for _ in range(depth):
        sig, dot = _arccos_step(s12, s11, s22)
        theta = sig + theta * dot
        # diagonal covariances are preserved by the gain-2 ReLU layer
        s12 = sig
    return theta


def random_conv_kernel(X: np.ndarray, kernel_px: int, X2: np.ndarray | None = None,
                       chunk: int | None = None) -> np.ndarray:
    """Readout kernel of infinitely many frozen random conv kernels followed by ReLU.

    K(x, x') = sum over output positions of E_k[relu(<k, patch>) relu(<k, patch'>)]
    for unit-normal kernels, i.e. a patch-wise arc-cosine kernel.
    """
    def patches(a):
        a = np.asarray(a, dtype=np.float64)
        return _im2col(a, kernel_px, 0)[0]

    p1 = patches(X)
    p2 = p1 if X2 is None else patches(X2)
    n1, n2 = len(p1), len(p2)
    n1sq = np.einsum("npk,npk->np", p1, p1)
    n2sq = n1sq if X2 is None else np.einsum("npk,npk->np", p2, p2)
    out = np.zeros((n1, n2))
    if chunk is None:
        # positions per step: each temporary is chunk x n1 x n2
        chunk = max(1, CHUNK_BUDGET // 4 // (n1 * n2))
    for s in range(0, p1.shape[1], chunk):
        sl = slice(s, s + chunk)
        dots = np.einsum("ipk,jpk->pij", p1[:, sl], p2[:, sl])
        norm = np.sqrt(n1sq[:, sl].T[:, :, None] * n2sq[:, sl].T[:, None, :])
        cos = _cosine(dots, norm)
        th = np.arccos(cos)
        out += (norm * (np.sin(th) + (np.pi - th) * cos)).sum(axis=0) / (2 * np.pi)
    return out


def widen(spec: NetworkSpec, width_scale: float) -> NetworkSpec:
    """Scale every hidden width (dense outputs, conv channels) except the final layer's."""
    param_idx = [i for i, layer in enumerate(spec.layers) if layer.kind in ("dense", "conv2d")]
    last = param_idx[-1] if param_idx else -1
    layers = []
    orig, new = None, None  # feature count ratio of the current activation
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            fan_in = layer.fan_in if orig is None else layer.fan_in // orig * new
            fan_out = layer.fan_out if i == last else max(1, round(layer.fan_out * width_scale))
            layers.append(LayerSpec.dense(fan_in, fan_out, layer.has_bias))
            orig, new = layer.fan_out, fan_out
        elif layer.kind == "conv2d":
            cin = layer.channels_in if orig is None else new
            cout = layer.channels_out if i == last else max(1, round(layer.channels_out * width_scale))
            layers.append(LayerSpec.conv2d(cin, cout, layer.kernel_size, layer.padding_mode, layer.has_bias))
            orig, new = layer.channels_out, cout
        else:
            layers.append(layer)
    return NetworkSpec(tuple(layers), "ntk", spec.frontend_split)


def monte_carlo_ntk(spec: NetworkSpec, X: np.ndarray, width_scale: float = 1.0, n_seeds: int = 4,
                    X2: np.ndarray | None = None, seed: int = 0,
                    scalarization: str = "sum_outputs") -> np.ndarray:
    """Average empirical NTK over ``n_seeds`` ntk-parameterized initializations.

    Seeds are ``seed, seed + 1, ...`` and the sum runs in that fixed order.
    """
    wide = widen(spec, width_scale)
    total = None
    for s in range(n_seeds):
        net = build_network(wide, seed + s)
        theta = batch_ntk(net, X, X2, scalarization)
        total = theta if total is None else total + theta
    return total / n_seeds


def is_fc_spec(spec: NetworkSpec) -> bool:
    return all(layer.kind in ("dense", "relu", "flatten") for layer in spec.layers)


# ---------------------------------------------------------------------------
# kernel ridge regression


@dataclass
class RegressionSetup:
    """``lambda_grid=None`` means the default grid scaled by trace(K_tt)/n."""

    lam: float = 0.0
    lambda_grid: tuple | None = None
    target_encoding: str = "centered_one_hot"
    n_classes: int = 10

    def validate(self) -> None:
        if self.lam < 0:
            raise SpecError(f"lambda must be non-negative, got {self.lam}")
        if self.target_encoding not in TARGET_ENCODINGS:
            raise SpecError(f"target_encoding must be one of {TARGET_ENCODINGS}")
        if self.lambda_grid is not None and len(self.lambda_grid) == 0:
            raise SpecError("lambda grid is empty")

    def grid_for(self, K_tt: np.ndarray) -> list[float]:
        if self.lambda_grid is not None:
            return sorted(float(v) for v in self.lambda_grid)
        scale = float(np.trace(K_tt)) / len(K_tt)
        return [g * scale for g in DEFAULT_RELATIVE_GRID]


def encode_targets(y: np.ndarray, encoding: str, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if encoding == "raw":
        return y.astype(np.float64).reshape(len(y), -1)
    onehot = np.eye(n_classes)[y.astype(np.int64)]
    return onehot - 1.0 / n_classes if encoding == "centered_one_hot" else onehot


def ntk_regress(K_tt: np.ndarray, K_st: np.ndarray, y_train: np.ndarray, lam: float) -> np.ndarray:
    """K_st (K_tt + lam I)^-1 y_train through a Cholesky solve; ``y_train`` already encoded."""
    n = len(K_tt)
    if K_st.shape[1] != n:
        raise SpecError(f"cross kernel has {K_st.shape[1]} columns, train kernel has {n} rows")
    A = K_tt + lam * np.eye(n)
    try:
        factor = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        low = np.linalg.eigvalsh(0.5 * (A + A.T))[0]
        raise NumericalError(f"regularized kernel is not positive definite (smallest eigenvalue {low:.3e})")
    coef = linalg.cho_solve(factor, y_train)
    return K_st @ coef


def _score(pred, y, encoding):
    """Higher is better: accuracy for class targets, negative MSE for raw targets."""
    if encoding == "raw":
        return -float(np.mean((pred - np.asarray(y, dtype=np.float64).reshape(pred.shape)) ** 2))
    return float(np.mean(np.argmax(pred, axis=1) == np.asarray(y)))


def select_lambda(K_tt: np.ndarray, y: np.ndarray, setup: RegressionSetup,
                  validation_fraction: float = 0.2, seed: int = 0) -> tuple[float, float]:
    """Grid search on a held-out slice of the training kernel; returns (lambda*, best score).

    Ties go to the smallest lambda.
    """
    setup.validate()
    n = len(K_tt)
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, int(round(validation_fraction * n))))
    val, fit = np.sort(order[:n_val]), np.sort(order[n_val:])
    y = np.asarray(y)
    y_fit = encode_targets(y[fit], setup.target_encoding, setup.n_classes)
    K_ff = K_tt[np.ix_(fit, fit)]
    K_vf = K_tt[np.ix_(val, fit)]
    best, best_score = None, -np.inf
    for lam in setup.grid_for(K_ff):
        try:
            pred = ntk_regress(K_ff, K_vf, y_fit, lam)
        except NumericalError:
            continue
        score = _score(pred, y[val], setup.target_encoding)
        log.debug("lambda %.3e: validation score %.4f", lam, score)
        if score > best_score:
            best, best_score = lam, score
    if best is None:
        raise NumericalError("every lambda on the grid gave a singular system")
    return best, best_score


@dataclass
class EstimateReport:
    lambda_star: float
    val_metric: float
    test_metric: float
    reference: str

    def to_dict(self) -> dict:
        return {"lambda_star": self.lambda_star, "val_metric": self.val_metric,
                "test_metric": self.test_metric, "reference": self.reference}


def reference_kernels(spec: NetworkSpec | None, x_train, x_test, reference: str = "auto",
                      depth: int | None = None, width_scale: float = 1.0, n_seeds: int = 4,
                      kernel_px: int = 7, seed: int = 0):
    """(K_tt, K_st, name) for the chosen reference kernel."""
    if reference == "auto":
        reference = "analytic_fc" if spec is None or is_fc_spec(spec) else "monte_carlo"
    if reference == "analytic_fc":
        if depth is None:
            depth = sum(layer.kind == "relu" for layer in spec.layers)
        flat_tr = x_train.reshape(len(x_train), -1)
        flat_te = x_test.reshape(len(x_test), -1)
        return analytic_ntk_fc(flat_tr, depth), analytic_ntk_fc(flat_te, depth, flat_tr), reference
    if reference == "random_conv":
        return random_conv_kernel(x_train, kernel_px), random_conv_kernel(x_test, kernel_px, x_train), reference
    if reference == "monte_carlo":
        K_tt = monte_carlo_ntk(spec, x_train, width_scale, n_seeds, seed=seed)
        K_st = monte_carlo_ntk(spec, x_test, width_scale, n_seeds, X2=x_train, seed=seed)
        return K_tt, K_st, reference
    raise SpecError(f"unknown reference kernel {reference!r}")


def estimate_performance(spec: NetworkSpec | None, x_train, y_train, x_test, y_test,
                         setup: RegressionSetup | None = None, reference: str = "auto",
                         validation_fraction: float = 0.2, seed: int = 0, **kernel_args) -> EstimateReport:
    """Predict achievable accuracy by kernel regression with a reference network's NTK.

    Lambda is chosen on a validation slice of the training set, then the
    regression is refit on the full training set and scored on the test set.
    """
    setup = setup or RegressionSetup()
    K_tt, K_st, name = reference_kernels(spec, x_train, x_test, reference, seed=seed, **kernel_args)
    lam, val_score = select_lambda(K_tt, y_train, setup, validation_fraction, seed)
    y_enc = encode_targets(y_train, setup.target_encoding, setup.n_classes)
    pred = ntk_regress(K_tt, K_st, y_enc, lam)
    test_score = _score(pred, y_test, setup.target_encoding)
    if setup.target_encoding == "raw":
        val_score, test_score = -val_score, -test_score
    return EstimateReport(lam, val_score, test_score, name)


# ---------------------------------------------------------------------------
# parameter-space spectrum


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    cumulative_power: np.ndarray
    counts_at: dict = field(default_factory=dict)

    def count_at(self, threshold: float) -> int:
        return _count_at(self.cumulative_power, threshold)


def _count_at(cumulative, threshold):
    return int(np.searchsorted(cumulative, threshold - 1e-12) + 1)


def gram_spectrum(J: np.ndarray, thresholds=(0.9, 0.95, 0.99)) -> SpectrumReport:
    """Eigenvalues of the parameter Gram J^T J (through the n x n dual when p > n)."""
    J = np.asarray(J, dtype=np.float64)
    n, p = J.shape
    small = J @ J.T if p > n else J.T @ J
    ev = np.clip(np.linalg.eigvalsh(0.5 * (small + small.T))[::-1], 0.0, None)
    eig = np.zeros(p)
    eig[:min(len(ev), p)] = ev[:p]
    total = eig.sum()
    cum = np.cumsum(eig) / total if total > 0 else np.ones(p)
    cum[-1] = 1.0
    return SpectrumReport(eig, cum, {t: _count_at(cum, t) for t in thresholds})


# ---------------------------------------------------------------------------
# NTK perturbation under first-layer weight errors


def conv_jacobian(net: Network, x: np.ndarray, scalarization="sum_outputs",
                  chunk: int | None = None) -> np.ndarray:
    """Per-sample Jacobian restricted to conv-layer parameters (columns in parameter order).

    ``scalarization`` may be an array of per-sample cotangents (first axis
    over samples); it is sliced along with ``x``.
    """
    if chunk is None:
        chunk = jacobian_chunk(net, x.shape[1:])
    per_sample = isinstance(scalarization, np.ndarray) and scalarization.ndim >= 2
    conv_names = {n for i, layer in enumerate(net.spec.layers) if layer.kind == "conv2d"
                  for n in net._impl[i].params}
    rows = []
    for s in range(0, len(x), chunk):
        scal = scalarization[s:s + chunk] if per_sample else scalarization
        blocks, _ = jacobian_factors(net, x[s:s + chunk], scal)
        rows.append(np.concatenate([b.materialize() for b in blocks if b.name in conv_names], axis=1))
    return np.concatenate(rows)


@dataclass
class ScalingResult:
    widths: list
    mean_dtheta: list
    std_dtheta: list
    slope: float

    def rows(self):
        return list(zip(self.widths, self.mean_dtheta, self.std_dtheta))


def ntk_perturbation_experiment(widths, delta_norm: float, n_trials: int = 20, seed: int = 0,
                                input_dim: int = 16, n_probe: int = 8) -> ScalingResult:
    """Mean ||Theta(W1 + delta) - Theta(W1)||_F for one-hidden-layer ntk-parameterized nets.

    Each trial draws a fresh network and a random first-layer direction
    rescaled to Frobenius norm ``delta_norm``; the probe batch is fixed.
    The slope is a least-squares fit of log mean vs log width.
    """
    widths = [int(m) for m in widths]
    if len(widths) < 2:
        raise SpecError("need at least two widths to fit a slope")
    rng = np.random.default_rng(seed)
    probe = rng.standard_normal((n_probe, input_dim))
    probe /= np.linalg.norm(probe, axis=1, keepdims=True)
    means, stds = [], []
    for m in widths:
        spec = NetworkSpec((LayerSpec.dense(input_dim, m, bias=False), LayerSpec.relu(),
                            LayerSpec.dense(m, 1, bias=False)), "ntk")
        diffs = []
        for t in range(n_trials):
            net = build_network(spec, int(rng.integers(2**31)))
            direction = rng.standard_normal((m, input_dim))
            delta = delta_norm * direction / np.linalg.norm(direction)
            bumped = net.with_params({**net.params, "layer0.weight": net.params["layer0.weight"] + delta})
            d = batch_ntk(bumped, probe) - batch_ntk(net, probe)
            diffs.append(float(np.linalg.norm(d)))
        means.append(float(np.mean(diffs)))
        stds.append(float(np.std(diffs)))
    if all(v > 0 for v in means):
        slope = float(np.polyfit(np.log(widths), np.log(means), 1)[0])
    else:
        slope = math.nan
    return ScalingResult(widths, means, stds, slope)
