"""Placement of square optical kernels on a metasurface, and the resulting network spec."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import SpecError
from .net import LayerSpec, NetworkSpec

CHANNELS = {"mono": 1, "rgb": 3}


@dataclass(frozen=True)
class FrontendDesign:
    surface_h_mm: float
    surface_w_mm: float
    kernel_size_mm: float
    min_spacing_mm: float = 0.0
    kernel_px: int = 7
    channels: int = 1

    def validate(self) -> None:
        if not (self.surface_h_mm > 0 and self.surface_w_mm > 0):
            raise SpecError("surface dimensions must be positive")
        if not self.kernel_size_mm > 0:
            raise SpecError(f"kernel size must be positive, got {self.kernel_size_mm}")
        if self.min_spacing_mm < 0:
            raise SpecError(f"minimum spacing must be non-negative, got {self.min_spacing_mm}")
        if self.kernel_px < 1 or self.kernel_px % 2 == 0:
            raise SpecError(f"kernel_px must be a positive odd integer, got {self.kernel_px}")
        if self.channels not in CHANNELS.values():
            raise SpecError(f"channels must be 1 (mono) or 3 (rgb), got {self.channels}")


@dataclass(frozen=True)
class LayoutResult:
    n_cols: int
    n_rows: int
    centers_mm: tuple

    @property
    def n_kernels(self) -> int:
        return self.n_cols * self.n_rows

    def to_dict(self) -> dict:
        return {"n_cols": self.n_cols, "n_rows": self.n_rows, "n_kernels": self.n_kernels,
                "centers_mm": [list(c) for c in self.centers_mm]}


def _count(extent, k, d):
    # guard against 0.9999 from binary fractions such as 0.1 mm spacing
    return max(0, math.floor((extent - d) / (k + d) + 1e-9))


def _axis(extent, n, k, d):
    pitch = k + d
    span = n * k + (n - 1) * d
    first = (extent - span) / 2 + k / 2
    return [first + i * pitch for i in range(n)]


def compute_layout(design: FrontendDesign) -> LayoutResult:
    """Densest symmetric grid: floor((size - d) / (k + d)) kernels per axis.

    The grid is centred on the surface with pitch k + d, so kernels are d
    apart and every border margin is at least d.
    """
    design.validate()
    k, d = design.kernel_size_mm, design.min_spacing_mm
    n_cols = _count(design.surface_w_mm, k, d)
    n_rows = _count(design.surface_h_mm, k, d)
    xs = _axis(design.surface_w_mm, n_cols, k, d)
    ys = _axis(design.surface_h_mm, n_rows, k, d)
    centers = tuple((x, y) for y in ys for x in xs)
    return LayoutResult(n_cols, n_rows, centers)


def design_to_netspec(design: FrontendDesign, layout: LayoutResult, backend,
                      padding_mode: str = "valid") -> NetworkSpec:
    """Prepend one bias-free conv layer (one output map per kernel) to ``backend``."""
    if layout.n_kernels < 1:
        raise SpecError("layout holds no kernels; use a larger surface or a smaller kernel size or spacing")
    front = LayerSpec.conv2d(design.channels, layout.n_kernels, design.kernel_px, padding_mode)
    spec = NetworkSpec((front,) + tuple(backend), frontend_split=1)
    spec.validate()
    return spec


def dense_backend(n_kernels: int, kernel_px: int, image: int, hidden=(32,), classes: int = 10) -> list:
    """Flatten followed by ReLU dense layers; ``len(hidden) + 1`` dense layers in total."""
    width = n_kernels * (image - kernel_px + 1) ** 2
    layers = [LayerSpec.flatten()]
    for h in hidden:
        layers += [LayerSpec.dense(width, h), LayerSpec.relu()]
        width = h
    layers.append(LayerSpec.dense(width, classes))
    return layers
