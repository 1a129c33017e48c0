"""Evaluation metrics, MAC counting and the capture + compute energy model."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SpecError
from .net import Network, NetworkSpec, forward

# Back-solved from the reported backend figure: 2.01 mJ over 65 MMACs.
PAPER_BACKEND_MACS = 65_000_000
PAPER_BACKEND_ENERGY_J = 2.01e-3
DEFAULT_ENERGY_PER_MAC_J = PAPER_BACKEND_ENERGY_J / PAPER_BACKEND_MACS
# Capture energy of the meta-optic hybrid system, and of a conventional camera.
HYBRID_CAPTURE_ENERGY_J = 3.82e-3
DIGITAL_CAPTURE_ENERGY_J = 2.36e-3


@dataclass
class EpochRecord:
    epoch: int
    loss_e2e: float
    loss_aux: float
    test_metric: float
    wall_seconds: float


@dataclass
class MetricsReport:
    task: str
    metric: float
    accuracy: float
    confusion: np.ndarray
    miou: float | None = None
    class_iou: list = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def metric_name(self) -> str:
        return "miou" if self.task == "segmentation" else "accuracy"

    def summary(self) -> dict:
        out = {"task": self.task, self.metric_name: self.metric, "accuracy": self.accuracy,
               "confusion": self.confusion.tolist()}
        if self.miou is not None:
            out["class_iou"] = self.class_iou
        return out


def predictions(outputs: np.ndarray, task: str) -> np.ndarray:
    outputs = np.asarray(outputs)
    if task == "segmentation":
        return (outputs >= 0.5).astype(np.int64)
    if outputs.ndim == 1:
        return outputs.astype(np.int64)
    return np.argmax(outputs, axis=1)


def evaluate(outputs: np.ndarray, targets: np.ndarray, task: str, n_classes: int | None = None) -> MetricsReport:
    """Accuracy and confusion matrix; for segmentation also per-class IoU and mIoU.

    Segmentation outputs are foreground probabilities, thresholded at 0.5;
    IoU is pooled over all pixels, and classes with an empty union are skipped.
    """
    pred = predictions(outputs, task).reshape(-1)
    true = np.asarray(targets).astype(np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise SpecError(f"prediction count {pred.shape} does not match targets {true.shape}")
    k = 2 if task == "segmentation" else (n_classes or int(max(pred.max(), true.max())) + 1)
    confusion = np.bincount(true * k + pred, minlength=k * k).reshape(k, k)
    accuracy = float(np.trace(confusion) / max(true.size, 1))
    if task != "segmentation":
        return MetricsReport(task, accuracy, accuracy, confusion)
    ious = []
    for c in range(k):
        inter = confusion[c, c]
        union = confusion[c, :].sum() + confusion[:, c].sum() - inter
        if union > 0:
            ious.append(float(inter / union))
    miou = float(np.mean(ious)) if ious else 1.0
    return MetricsReport(task, miou, accuracy, confusion, miou, ious)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def batched_forward(net: Network, x: np.ndarray, batch_size: int | None = None) -> np.ndarray:
    if batch_size is None:
        batch_size = jacobian_chunk(net, x.shape[1:])
    return np.concatenate([forward(net, x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def evaluate_network(net: Network, x: np.ndarray, targets: np.ndarray, task: str,
                     n_classes: int | None = None) -> MetricsReport:
    out = batched_forward(net, x)
    if task == "segmentation":
        out = sigmoid(out)
    return evaluate(out, targets, task, n_classes)


# ---------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class CostModel:
    energy_per_mac_j: float = DEFAULT_ENERGY_PER_MAC_J
    energy_per_capture_j: float = HYBRID_CAPTURE_ENERGY_J

    def __post_init__(self):
        if not (self.energy_per_mac_j > 0 and self.energy_per_capture_j > 0):
            raise SpecError("cost model energies must be positive")


def layer_output_shapes(spec: NetworkSpec, input_shape) -> list[tuple]:
    """Per-sample output shape of every layer, for an input shape without batch axis."""
    shape = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv2d":
            c, h, w = shape
            if c != layer.channels_in:
                raise SpecError(f"layer {i} (conv2d): expected {layer.channels_in} channels, got {c}")
            if layer.padding_mode == "valid":
                h, w = h - layer.kernel_size + 1, w - layer.kernel_size + 1
            shape = (layer.channels_out, h, w)
        elif layer.kind == "dense":
            if shape != (layer.fan_in,):
                raise SpecError(f"layer {i} (dense): expected ({layer.fan_in},), got {shape}")
            shape = (layer.fan_out,)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "upsample2x":
            c, h, w = shape
            shape = (c, 2 * h, 2 * w)
        shapes.append(shape)
    return shapes


# working-set budget (float64 elements) for one chunk of per-sample Jacobian factors
CHUNK_BUDGET = 20_000_000


def jacobian_chunk(net: Network, sample_shape, budget: int = CHUNK_BUDGET, cap: int = 500) -> int:
    """Samples per jacobian_factors call so that im2col patches and activations stay within ``budget``."""
    per_sample, shape = 0, tuple(sample_shape)
    for layer, out in zip(net.spec.layers, layer_output_shapes(net.spec, sample_shape)):
        per_sample += int(np.prod(out))
        if layer.kind == "conv2d":
            per_sample += out[1] * out[2] * shape[0] * layer.kernel_size ** 2
        shape = out
    return int(max(1, min(cap, budget // max(per_sample, 1))))


def mac_count(spec: NetworkSpec, input_shape, scope: str = "full") -> int:
    """Multiply-accumulates per sample; optical frontend layers are free under backend_only."""
    if scope not in ("full", "backend_only"):
        raise SpecError(f"scope must be 'full' or 'backend_only', got {scope!r}")
    shapes = layer_output_shapes(spec, input_shape)
    start = spec.frontend_split if scope == "backend_only" else 0
    total = 0
    for i in range(start, len(spec.layers)):
        layer = spec.layers[i]
        if layer.kind == "conv2d":
            _, oh, ow = shapes[i]
            total += oh * ow * layer.kernel_size ** 2 * layer.channels_in * layer.channels_out
        elif layer.kind == "dense":
            total += layer.fan_in * layer.fan_out
    return int(total)


def energy_estimate(macs: float, n_captures: int, model: CostModel = CostModel()) -> float:
    return macs * model.energy_per_mac_j + n_captures * model.energy_per_capture_j


# ---------------------------------------------------------------------------
# feature export


def penultimate_features(net: Network, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Activations feeding the last parameterized layer."""
    last = max(i for i, layer in enumerate(net.spec.layers) if layer.kind in ("dense", "conv2d"))
    head = net.slice(0, last)
    feats = np.concatenate([forward(head, x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    return feats.reshape(len(x), -1)


def export_features(net: Network, x: np.ndarray, labels: np.ndarray, path) -> int:
    """Write one CSV row per sample: label then penultimate activations. Returns rows written."""
    feats = penultimate_features(net, x)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(feats.shape[1])])
        for lab, row in zip(np.asarray(labels).reshape(len(x), -1)[:, 0], feats):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])
    return len(feats)


def write_epochs_csv(report: MetricsReport, path, include_wall: bool = True) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss_e2e", "loss_aux", "test_metric", "wall_seconds"])
        for r in report.epochs:
            w.writerow([r.epoch, repr(r.loss_e2e), repr(r.loss_aux), repr(r.test_metric),
                        f"{r.wall_seconds:.3f}" if include_wall else ""])
