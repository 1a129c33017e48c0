"""Optical frontend simulation: ideal and fabricated capture, calibration, compensation, ablation."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeError, SpecError
from .metrics import MetricsReport, evaluate, sigmoid
from .net import Network, _im2col, _layer_scale, build_network, forward
from .presets import random_frontend_classifier
from .train import TeacherHandle, TrainConfig, TeacherKernel, fit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FabricationNoiseSpec:
    """Gain ``alpha_cal * beta_cal``, integer shift (x, y), kernel error and sensor noise.

    ``delta_sigma`` is relative to the kernels' RMS and ``epsilon_sigma`` to
    the RMS of the ideal feature maps.
    """

    alpha_cal: float = 1.0
    shift_px: tuple = (0, 0)
    beta_cal: float = 1.0
    delta_sigma: float = 0.0
    epsilon_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not (self.alpha_cal > 0 and self.beta_cal > 0):
            raise SpecError("alpha_cal and beta_cal must be positive")
        if self.delta_sigma < 0 or self.epsilon_sigma < 0:
            raise SpecError("noise sigmas must be non-negative")
        if len(self.shift_px) != 2 or any(int(s) != s for s in self.shift_px):
            raise SpecError(f"shift_px must be an integer pair, got {self.shift_px}")

    @property
    def gain(self) -> float:
        return self.alpha_cal * self.beta_cal


NEUTRAL = FabricationNoiseSpec()


@dataclass
class FabricatedFrontend:
    ideal_kernels: np.ndarray
    realized_kernels: np.ndarray
    noise: FabricationNoiseSpec = NEUTRAL
    padding_mode: str = "valid"
    _rng: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.ideal_kernels.setflags(write=False)
        self.realized_kernels.setflags(write=False)
        if self._rng is None:
            # sensor noise stream, separate from the fabrication draw
            self._rng = np.random.default_rng([self.noise.seed, 1])

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.realized_kernels).tobytes()).hexdigest()


def _rms(a):
    return float(np.sqrt(np.mean(np.square(a))))


def optical_conv_ideal(images: np.ndarray, kernels: np.ndarray, padding_mode: str = "valid") -> np.ndarray:
    """Incoherent PSF convolution: every kernel holds one plane per colour, summed at the sensor."""
    images = np.asarray(images, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if images.ndim != 4 or kernels.ndim != 4 or images.shape[1] != kernels.shape[1]:
        raise ShapeError(f"images {images.shape} and kernels {kernels.shape} are incompatible")
    k = kernels.shape[-1]
    pad = k // 2 if padding_mode == "same" else 0
    cols, oh, ow = _im2col(images, k, pad)
    n, pp, kk = cols.shape
    out = (cols.reshape(-1, kk) @ kernels.reshape(len(kernels), -1).T).reshape(n, oh, ow, -1)
    return out.transpose(0, 3, 1, 2)


def shift_images(images: np.ndarray, shift) -> np.ndarray:
    """Translate by (dx, dy) pixels with zero fill: out[..., y, x] = in[..., y - dy, x - dx]."""
    dx, dy = int(shift[0]), int(shift[1])
    out = np.zeros_like(images)
    h, w = images.shape[-2:]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = images[..., src_y, src_x]
    return out


def frontend_kernels(net: Network) -> np.ndarray:
    """Effective optical kernels of a network's frontend conv (parameterization scale applied)."""
    if net.spec.frontend_split != 1 or net.spec.layers[0].kind != "conv2d":
        raise SpecError("frontend must be a single conv2d layer")
    return _layer_scale(net.spec, 0) * net.params["layer0.weight"]


def fabricate(kernels: np.ndarray, noise: FabricationNoiseSpec = NEUTRAL, padding_mode: str = "valid") -> FabricatedFrontend:
    """Draw the kernel error once; the realized kernels are read-only from here on."""
    noise.validate()
    ideal = np.array(kernels, dtype=np.float64)
    rng = np.random.default_rng([noise.seed, 0])
    if noise.delta_sigma > 0:
        realized = ideal + rng.normal(0.0, noise.delta_sigma * _rms(ideal), ideal.shape)
    else:
        realized = ideal.copy()
    return FabricatedFrontend(ideal, realized, noise, padding_mode)


def capture(frontend: FabricatedFrontend, images: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Measured feature maps: gain * ((shifted image) * realized kernels) + sensor noise.

    Sensor noise is drawn fresh on every call from the frontend's own stream
    unless ``rng`` is given.
    """
    nz = frontend.noise
    x = shift_images(images, nz.shift_px) if any(nz.shift_px) else images
    out = optical_conv_ideal(x, frontend.realized_kernels, frontend.padding_mode)
    if nz.gain != 1.0:
        out = nz.gain * out
    if nz.epsilon_sigma > 0:
        ideal = optical_conv_ideal(images, frontend.ideal_kernels, frontend.padding_mode)
        rng = frontend._rng if rng is None else rng
        out = out + rng.normal(0.0, nz.epsilon_sigma * _rms(ideal), out.shape)
    return out


@dataclass
class Calibration:
    gain: float
    shift: tuple
    score: float = 1.0

    def to_dict(self) -> dict:
        return {"gain": self.gain, "shift_x": int(self.shift[0]), "shift_y": int(self.shift[1])}


def _overlap(measured, simulated, dx, dy):
    # measured[y, x] pairs with simulated[y - dy, x - dx]
    h, w = measured.shape[-2:]
    ys, yd = slice(max(0, -dy), h - max(0, dy)), slice(max(0, dy), h - max(0, -dy))
    xs, xd = slice(max(0, -dx), w - max(0, dx)), slice(max(0, dx), w - max(0, -dx))
    return measured[..., yd, xd], simulated[..., ys, xs]


def calibrate(measured: np.ndarray, simulated: np.ndarray, max_shift: int = 3) -> Calibration:
    """Shift by peak normalized cross-correlation, then the least-squares gain on the overlap.

    Brightness and misalignment attenuation are not separable from data, so
    only their product is returned.
    """
    measured = np.asarray(measured, dtype=np.float64)
    simulated = np.asarray(simulated, dtype=np.float64)
    if measured.shape != simulated.shape:
        raise ShapeError(f"measured {measured.shape} and simulated {simulated.shape} differ")
    if not np.any(simulated):
        raise SpecError("simulated feature maps are all zero; nothing to calibrate against")
    best = None
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            m, s = _overlap(measured, simulated, dx, dy)
            ss = float(np.vdot(s, s))
            mm = float(np.vdot(m, m))
            if ss == 0 or mm == 0:
                continue
            ms = float(np.vdot(m, s))
            score = ms / np.sqrt(mm * ss)
            # strict comparison keeps the first (smallest |shift| scan order) on ties
            if best is None or score > best[0] + 1e-12:
                best = (score, (dx, dy), ms / ss)
    if best is None:
        raise SpecError("no shift leaves a non-empty overlap")
    score, shift, gain = best
    return Calibration(gain, shift, score)


# ---------------------------------------------------------------------------
# backend-only compensation


def _backend_eval(backend: Network, feats: np.ndarray, y: np.ndarray, task: str, batch: int = 500):
    out = np.concatenate([forward(backend, feats[i:i + batch]) for i in range(0, len(feats), batch)])
    if task == "segmentation":
        out = sigmoid(out)
    return evaluate(out, y, task)


def evaluate_fabricated(net: Network, frontend: FabricatedFrontend, x, y, task: str) -> MetricsReport:
    """Run a student's backend on feature maps captured through ``frontend``."""
    _, backend = net.split()
    return _backend_eval(backend, capture(frontend, x), y, task)


def compensate(net: Network, frontend: FabricatedFrontend, teacher: TeacherHandle | None,
               train_x, train_y, test_x, test_y, task: str, config: TrainConfig,
               dataset_fraction: float = 0.1, teacher_kernel: TeacherKernel | None = None):
    """Retrain only the digital backend on maps captured through the fabricated frontend.

    The teacher sees raw images; the student backend sees the captured maps
    of the same samples. Returns (updated network, report); the frontend
    parameters are carried over untouched.
    """
    if net.spec.frontend_split < 1:
        raise SpecError("compensation needs a network with an optical frontend")
    if not 0 < dataset_fraction <= 1:
        raise SpecError(f"dataset_fraction must be in (0, 1], got {dataset_fraction}")
    n = max(2, int(round(dataset_fraction * len(train_x))))
    idx = np.sort(np.random.default_rng(config.seed).permutation(len(train_x))[:n])
    x_raw, y_sub = train_x[idx], train_y[idx]
    feats = capture(frontend, x_raw)
    test_feats = capture(frontend, test_x)
    _, backend = net.split()
    eval_fn = lambda b: _backend_eval(b, test_feats, test_y, task).metric
    backend, epochs = fit(backend, feats, y_sub, task, config, teacher, x_raw, eval_fn,
                          teacher_kernel=teacher_kernel)
    report = _backend_eval(backend, test_feats, test_y, task)
    report.epochs = epochs
    return net.merge(backend), report


# ---------------------------------------------------------------------------
# random-kernel ablation


def random_frontend(n_kernels: int, kernel_px: int = 7, channels: int = 1, seed: int = 0,
                    nonnegative: bool = False) -> FabricatedFrontend:
    """Frozen i.i.d. normal kernels with std 1/sqrt(fan_in), optionally folded to be nonnegative."""
    if n_kernels < 1:
        raise SpecError(f"need at least one kernel, got {n_kernels}")
    rng = np.random.default_rng(seed)
    k = rng.normal(0.0, 1.0 / np.sqrt(channels * kernel_px ** 2), (n_kernels, channels, kernel_px, kernel_px))
    if nonnegative:
        k = np.abs(k)
    return FabricatedFrontend(k, k.copy(), replace(NEUTRAL, seed=seed))


def install_frontend(net: Network, frontend: FabricatedFrontend) -> Network:
    """Load kernels into the network's frontend conv, undoing its parameterization scale."""
    w = net.params["layer0.weight"]
    if w.shape != frontend.ideal_kernels.shape:
        raise ShapeError(f"frontend kernels {frontend.ideal_kernels.shape} do not fit layer {w.shape}")
    return net.with_params({**net.params, "layer0.weight": frontend.ideal_kernels / _layer_scale(net.spec, 0)})


def train_frozen_frontend(net: Network, frontend: FabricatedFrontend, train_x, train_y, test_x, test_y,
                          task: str, config: TrainConfig, teacher: TeacherHandle | None = None):
    """Backend-only training behind fixed kernels; features are computed per batch."""
    net = install_frontend(net, frontend)
    frozen = tuple(net.split()[0].params)
    eval_fn = lambda m: evaluate(_batched(m, test_x, task), test_y, task).metric
    net, epochs = fit(net, train_x, train_y, task, config, teacher, eval_fn=eval_fn, frozen=frozen)
    report = evaluate(_batched(net, test_x, task), test_y, task)
    report.epochs = epochs
    return net, report


def ablate_random(n_kernels, train_x, train_y, test_x, test_y, config: TrainConfig, lr_grid=(1e-3,),
                  kernel_px: int = 7, val_fraction: float = 0.2, seed: int = 0) -> list[dict]:
    """Random-kernel ablation rows, one per kernel count.

    Adam's step on the readout grows with its fan-in, so one learning rate
    does not suit 8 and 256 kernels alike. Each count picks its rate from
    ``lr_grid`` on a held-out slice of the training data, then retrains on
    all of it and reports the test metric.
    """
    channels, image = train_x.shape[1], train_x.shape[-1]
    n_val = int(round(val_fraction * len(train_x))) if len(lr_grid) > 1 else 0
    fit_x, fit_y, val_x, val_y = train_x[n_val:], train_y[n_val:], train_x[:n_val], train_y[:n_val]
    rows = []
    for n in n_kernels:
        front = random_frontend(n, kernel_px, channels, seed, False)
        spec = random_frontend_classifier(n, kernel_px, channels, image)

        def run(lr, x, y, tx, ty):
            cfg = replace(config, strategy="e2e", optimizer=replace(config.optimizer, lr=lr))
            return train_frozen_frontend(build_network(spec, seed), front, x, y, tx, ty, "classification", cfg)[1]

        scores = {lr: run(lr, fit_x, fit_y, val_x, val_y).metric for lr in lr_grid} if n_val else {}
        best = max(lr_grid, key=lambda lr: scores.get(lr, 0.0))
        rep = run(best, train_x, train_y, test_x, test_y)
        rows.append({"n_kernels": n, "lr": best, "val_scores": {str(k): v for k, v in scores.items()},
                     "accuracy": rep.metric})
        log.info("%d random kernels: lr %g, accuracy %.4f", n, best, rep.metric)
    return rows


def _batched(net, x, task, batch=250):
    out = np.concatenate([forward(net, x[i:i + batch]) for i in range(0, len(x), batch)])
    return sigmoid(out) if task == "segmentation" else out
