"""Desk-scale architectures: LeNet-like teacher, Compressed-Meta and segmentation students."""

from __future__ import annotations

from .net import LayerSpec as L
from .net import NetworkSpec


def lenet_teacher(hidden: int = 64, image: int = 28, channels: int = 1, classes: int = 10) -> NetworkSpec:
    """LeNet convolution stack without pooling; conv parameters total 2,572 for mono input."""
    side = image - 8
    return NetworkSpec((
        L.conv2d(channels, 6, 5, bias=True), L.relu(),
        L.conv2d(6, 16, 5, bias=True), L.relu(),
        L.flatten(),
        L.dense(16 * side * side, hidden), L.relu(),
        L.dense(hidden, classes),
    ))


def onn_classifier(n_kernels: int = 8, kernel_px: int = 7, channels: int = 1, image: int = 28,
                   hidden=(32,), classes: int = 10) -> NetworkSpec:
    """Optical conv frontend (no bias) followed by a dense backend.

    ``hidden=(32,)`` gives the two-layer backend of the Compressed Meta ONN;
    three-layer backends (Polychromatic Meta) pass two hidden widths.
    """
    side = image - kernel_px + 1
    layers = [L.conv2d(channels, n_kernels, kernel_px), L.flatten()]
    width = n_kernels * side * side
    for h in hidden:
        layers += [L.dense(width, h), L.relu()]
        width = h
    layers.append(L.dense(width, classes))
    return NetworkSpec(tuple(layers), frontend_split=1)


def random_frontend_classifier(n_kernels: int, kernel_px: int = 7, channels: int = 1, image: int = 28,
                               classes: int = 10) -> NetworkSpec:
    """Ablation model: frozen optical conv, then relu and a single dense readout."""
    side = image - kernel_px + 1
    return NetworkSpec((
        L.conv2d(channels, n_kernels, kernel_px), L.relu(), L.flatten(),
        L.dense(n_kernels * side * side, classes),
    ), frontend_split=1)


def seg_teacher(width: int = 12) -> NetworkSpec:
    """Small encoder/decoder on the binned 32x32 input, producing 64x64 logits."""
    return NetworkSpec((
        L.conv2d(3, width, 3, "same", bias=True), L.relu(),
        L.conv2d(width, width, 3, "same", bias=True), L.relu(),
        L.upsample2x(),
        L.conv2d(width, width, 3, "same", bias=True), L.relu(),
        L.conv2d(width, 1, 3, "same", bias=True),
    ))


def seg_student(n_kernels: int = 8, kernel_px: int = 3, hidden: int = 8) -> NetworkSpec:
    """Polychromatic optical frontend, upsampling digital backend."""
    return NetworkSpec((
        L.conv2d(3, n_kernels, kernel_px, "same"),
        L.relu(),
        L.conv2d(n_kernels, hidden, 3, "same", bias=True), L.relu(),
        L.upsample2x(),
        L.conv2d(hidden, 1, 3, "same", bias=True),
    ), frontend_split=1)


def fc_reference(input_dim: int, depth: int, width: int, outputs: int = 1, bias: bool = False,
                 parameterization: str = "ntk") -> NetworkSpec:
    """``depth`` hidden ReLU layers; matches the analytic FC NTK when bias-free."""
    layers, d = [], input_dim
    for _ in range(depth):
        layers += [L.dense(d, width, bias=bias), L.relu()]
        d = width
    layers.append(L.dense(d, outputs, bias=bias))
    return NetworkSpec(tuple(layers), parameterization)
