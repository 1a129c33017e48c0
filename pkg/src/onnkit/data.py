"""Dataset ingestion (MNIST IDX, CIFAR-10 binary) and the synthetic segmentation set."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, SpecError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 1024

MNIST_ENV = "ONNKIT_MNIST_DIR"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class WrongMagicError(DataFormatError):
    pass


class TruncatedError(DataFormatError):
    pass


class TrailingBytesError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass
class LabeledDataset:
    """Images are (n, c, h, w) floats in [0, 1]; targets are class indices or binary masks."""

    images: np.ndarray
    targets: np.ndarray
    task: str = "classification"
    split: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.targets):
            raise DataFormatError(f"{len(self.images)} images but {len(self.targets)} targets")

    def __len__(self):
        return len(self.images)

    def subset(self, idx, split: str | None = None) -> LabeledDataset:
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx], self.targets[idx], self.task,
                              self.split if split is None else split, dict(self.meta))

    def head(self, n: int, split: str | None = None) -> LabeledDataset:
        return self.subset(np.arange(min(n, len(self))), split)

    @property
    def n_classes(self) -> int:
        if self.task == "segmentation":
            return 2
        return int(self.meta.get("n_classes", int(self.targets.max()) + 1))


def _read_idx(raw: bytes, magic: int, what: str):
    if len(raw) < 4:
        raise TruncatedError(f"{what}: file shorter than the 4-byte magic")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise WrongMagicError(f"{what}: wrong magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    body = len(raw) - header
    if body < size:
        raise TruncatedError(f"{what}: payload has {body} bytes, header promises {size}")
    if body > size:
        raise TrailingBytesError(f"{what}: {body - size} unexpected trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def parse_idx_images(raw: bytes) -> np.ndarray:
    arr = _read_idx(raw, IDX_IMAGES_MAGIC, "IDX images")
    return arr.astype(np.float64)[:, None, :, :] / 255.0


def parse_idx_labels(raw: bytes, n_classes: int = 10) -> np.ndarray:
    labels = _read_idx(raw, IDX_LABELS_MAGIC, "IDX labels").astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        raise DataFormatError(f"IDX labels: label {labels.max()} out of range 0..{n_classes - 1}")
    return labels


def load_mnist_idx(images_path, labels_path) -> LabeledDataset:
    images = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    return LabeledDataset(images, labels, "classification", meta={"n_classes": 10, "source": "mnist"})


def mnist_dir(path=None) -> Path:
    return Path(path or os.environ.get(MNIST_ENV, "/root/data/mnist"))


def load_mnist(split: str, root=None) -> LabeledDataset:
    root = mnist_dir(root)
    img, lab = MNIST_FILES[split]
    ds = load_mnist_idx(root / img, root / lab)
    ds.split = split
    return ds


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data in IDX layout (used for fixtures and exports)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    Path(path).write_bytes(struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes())


def parse_cifar10(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"CIFAR-10 batch size {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"CIFAR-10 label {labels.max()} out of range 0..9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar10_bin(paths) -> LabeledDataset:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    parts = [parse_cifar10(Path(p).read_bytes()) for p in paths]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return LabeledDataset(images, labels, "classification", meta={"n_classes": 10, "source": "cifar10"})


def split_train_val(ds: LabeledDataset, fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_val = max(1, int(round(fraction * len(ds))))
    return ds.subset(np.sort(order[n_val:]), "train"), ds.subset(np.sort(order[:n_val]), "val")


# ---------------------------------------------------------------------------
# synthetic segmentation


def _coverage(dist, aa):
    # signed distance (negative inside) -> fractional coverage over an aa-wide band
    return np.clip(0.5 - dist / aa, 0.0, 1.0)


def shape_masks(kind: str, params: dict, resolution: int, aa: float = 1.0):
    """Soft (anti-aliased) coverage and hard mask for one shape, pixel-centre sampled."""
    yy, xx = np.mgrid[0:resolution, 0:resolution] + 0.5
    cx, cy, a, b, ang = params["cx"], params["cy"], params["a"], params["b"], params["angle"]
    c, s = np.cos(ang), np.sin(ang)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    if kind == "ellipse":
        r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        dist = (r - 1.0) * min(a, b)
    elif kind == "rectangle":
        dist = np.maximum(np.abs(u) - a, np.abs(v) - b)
    else:
        raise SpecError(f"unknown shape {kind!r}")
    return _coverage(dist, aa), dist < 0


def shape_area(kind: str, params: dict) -> float:
    if kind == "ellipse":
        return float(np.pi * params["a"] * params["b"])
    return float(4.0 * params["a"] * params["b"])


def _draw_shapes(rng, resolution):
    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        kind = "ellipse" if rng.random() < 0.5 else "rectangle"
        a = rng.uniform(0.08, 0.22) * resolution
        b = rng.uniform(0.08, 0.22) * resolution
        if kind == "rectangle":
            a, b = 0.8 * a, 0.8 * b
        shapes.append((kind, {
            "cx": rng.uniform(0.2, 0.8) * resolution, "cy": rng.uniform(0.2, 0.8) * resolution,
            "a": a, "b": b, "angle": rng.uniform(0, np.pi)}))
    return shapes


def _texture(rng, resolution):
    # smooth low-frequency colour field plus fine grain
    coarse = rng.uniform(0.0, 1.0, size=(3, 4, 4))
    rep = int(np.ceil(resolution / 4))
    field_ = np.kron(coarse, np.ones((rep, rep)))[:, :resolution, :resolution]
    grain = rng.normal(0.0, 0.08, size=(3, resolution, resolution))
    return 0.35 + 0.3 * field_ + grain


def gen_synthetic_seg(n: int, resolution: int = 64, seed: int = 0) -> LabeledDataset:
    """RGB scenes with 1-3 anti-aliased ellipses/rectangles over a textured background.

    Masks mark pixels whose centre lies inside any shape.
    """
    if resolution < 16:
        raise SpecError(f"resolution must be >= 16, got {resolution}")
    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, resolution, resolution))
    masks = np.zeros((n, 1, resolution, resolution))
    for i in range(n):
        img = _texture(rng, resolution)
        for kind, params in _draw_shapes(rng, resolution):
            soft, hard = shape_masks(kind, params, resolution)
            colour = rng.uniform(0.0, 1.0, size=3)
            shade = colour[:, None, None] + rng.normal(0.0, 0.04, size=(3, resolution, resolution))
            img = img * (1 - soft) + shade * soft
            masks[i, 0] = np.maximum(masks[i, 0], hard)
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, masks, "segmentation", meta={"source": "synthetic", "resolution": resolution})


def bin2x(images: np.ndarray) -> np.ndarray:
    """Average 2x2 pixel blocks (sensor binning)."""
    n, c, h, w = images.shape
    return images.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
