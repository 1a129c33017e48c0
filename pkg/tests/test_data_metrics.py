import csv
import struct

import numpy as np
import pytest

from conftest import needs_mnist
from onnkit.data import (CountMismatchError, TrailingBytesError, TruncatedError, WrongMagicError, bin2x,
                         gen_synthetic_seg, load_cifar10_bin, load_mnist, load_mnist_idx, parse_cifar10,
                         parse_idx_images, parse_idx_labels, shape_area, shape_masks, split_train_val, write_idx)
from onnkit.errors import DataFormatError, SpecError
from onnkit.layout import dense_backend
from onnkit.metrics import (DEFAULT_ENERGY_PER_MAC_J, CostModel, energy_estimate, evaluate, export_features,
                            mac_count, penultimate_features)
from onnkit.net import LayerSpec as L, NetworkSpec, OptimizerHyper, build_network, forward
from onnkit.presets import lenet_teacher, onn_classifier
from onnkit.train import TrainConfig, fit


def idx_images_fixture():
    pixels = np.arange(32, dtype=np.uint8).reshape(2, 4, 4) * 8
    raw = struct.pack(">IIII", 0x00000803, 2, 4, 4) + pixels.tobytes()
    return raw, pixels


def idx_labels_fixture():
    return struct.pack(">II", 0x00000801, 2) + bytes([7, 3])


def cifar_fixture():
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, (2, 3, 32, 32), dtype=np.uint8)
    raw = b"".join(bytes([lab]) + pix[i].tobytes() for i, lab in enumerate([4, 9]))
    return raw, pix


def header_mutations(raw, header_len):
    for i in range(header_len):
        for op in (lambda b: b ^ 0xFF, lambda b: (b + 1) % 256):
            m = bytearray(raw)
            m[i] = op(m[i])
            yield bytes(m)


# IDX

def test_idx_exact_pixels(tmp_path):
    raw, pixels = idx_images_fixture()
    np.testing.assert_array_equal(parse_idx_images(raw)[:, 0], pixels / 255.0)
    (tmp_path / "img").write_bytes(raw)
    (tmp_path / "lab").write_bytes(idx_labels_fixture())
    ds = load_mnist_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.images.shape == (2, 1, 4, 4) and list(ds.targets) == [7, 3]
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_idx_round_trip(tmp_path):
    raw, pixels = idx_images_fixture()
    write_idx(tmp_path / "again", pixels)
    assert (tmp_path / "again").read_bytes() == raw
    back = np.round(parse_idx_images(raw)[:, 0] * 255).astype(np.uint8)
    write_idx(tmp_path / "back", back)
    assert (tmp_path / "back").read_bytes() == raw


def test_idx_wrong_magic():
    raw, _ = idx_images_fixture()
    with pytest.raises(WrongMagicError, match="wrong magic"):
        parse_idx_images(struct.pack(">I", 0x00000802) + raw[4:])


def test_idx_distinct_errors(tmp_path):
    raw, _ = idx_images_fixture()
    with pytest.raises(TruncatedError):
        parse_idx_images(raw[:-1])
    with pytest.raises(TrailingBytesError):
        parse_idx_images(raw + b"\0")
    (tmp_path / "img").write_bytes(raw)
    (tmp_path / "lab").write_bytes(struct.pack(">II", 0x00000801, 3) + bytes([1, 2, 3]))
    with pytest.raises(CountMismatchError):
        load_mnist_idx(tmp_path / "img", tmp_path / "lab")
    with pytest.raises(DataFormatError, match="out of range"):
        parse_idx_labels(struct.pack(">II", 0x00000801, 1) + bytes([12]))


def test_idx_structural_mutations_rejected():
    raw, _ = idx_images_fixture()
    for bad in header_mutations(raw, 16):
        with pytest.raises(DataFormatError):
            parse_idx_images(bad)
    labels = idx_labels_fixture()
    for bad in header_mutations(labels, 8):
        with pytest.raises(DataFormatError):
            parse_idx_labels(bad)


@needs_mnist
def test_real_mnist_test_file():
    ds = load_mnist("test")
    assert len(ds) == 10000 and ds.images.shape[1:] == (1, 28, 28)


# CIFAR-10

def test_cifar_exact(tmp_path):
    raw, pix = cifar_fixture()
    (tmp_path / "b.bin").write_bytes(raw)
    ds = load_cifar10_bin(tmp_path / "b.bin")
    np.testing.assert_array_equal(ds.images, pix / 255.0)
    assert list(ds.targets) == [4, 9]
    again = b"".join(bytes([int(t)]) + np.round(im * 255).astype(np.uint8).tobytes()
                     for t, im in zip(ds.targets, ds.images))
    assert again == raw


def test_cifar_rejections():
    raw, _ = cifar_fixture()
    for bad in (raw[:-1], raw + b"\0", b""):
        with pytest.raises(DataFormatError):
            parse_cifar10(bad)
    m = bytearray(raw)
    m[0] = 10
    with pytest.raises(DataFormatError):
        parse_cifar10(bytes(m))


# synthetic segmentation

def test_seg_determinism_and_ranges():
    a, b = gen_synthetic_seg(5, 32, seed=3), gen_synthetic_seg(5, 32, seed=3)
    assert a.images.tobytes() == b.images.tobytes() and a.targets.tobytes() == b.targets.tobytes()
    assert a.images.shape == (5, 3, 32, 32) and a.targets.shape == (5, 1, 32, 32)
    assert set(np.unique(a.targets)) <= {0.0, 1.0}
    assert a.images.min() >= 0 and a.images.max() <= 1
    with pytest.raises(SpecError):
        gen_synthetic_seg(1, 8)


@pytest.mark.parametrize("kind", ["ellipse", "rectangle"])
def test_mask_area_matches_geometry(kind):
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = {"cx": rng.uniform(25, 39), "cy": rng.uniform(25, 39), "a": rng.uniform(4, 12),
             "b": rng.uniform(4, 12), "angle": rng.uniform(0, np.pi)}
        soft, hard = shape_masks(kind, p, 64)
        perimeter = 2 * np.pi * max(p["a"], p["b"]) if kind == "ellipse" else 4 * (p["a"] + p["b"])
        # pixel-centre sampling can only disagree with the area within one pixel of the boundary
        assert abs(hard.sum() - shape_area(kind, p)) <= perimeter
        assert abs(soft.sum() - shape_area(kind, p)) <= 0.1 * perimeter + 2


def test_foreground_fraction():
    ds = gen_synthetic_seg(1000, 32, seed=0)
    frac = ds.targets.mean(axis=(1, 2, 3))
    assert 0.05 <= frac.mean() <= 0.6


def test_bin2x():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(bin2x(x)[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_split_train_val():
    ds = gen_synthetic_seg(10, 16, 0)
    tr, va = split_train_val(ds, 0.3, 0)
    assert len(tr) == 7 and len(va) == 3 and va.split == "val"


# metrics

def test_perfect_predictions():
    y = np.array([0, 1, 2, 2])
    rep = evaluate(np.eye(3)[y], y, "classification")
    assert rep.metric == 1.0
    np.testing.assert_array_equal(rep.confusion, np.diag([1, 1, 2]))
    mask = (np.random.default_rng(0).random((2, 1, 4, 4)) < 0.5).astype(float)
    seg = evaluate(mask, mask, "segmentation")
    assert seg.miou == 1.0 and seg.accuracy == 1.0


def test_all_background_on_half_mask():
    mask = np.zeros((1, 1, 4, 4))
    mask[..., :2] = 1
    rep = evaluate(np.zeros_like(mask), mask, "segmentation")
    assert rep.class_iou == [0.5, 0.0] and rep.miou == 0.25


def test_random_predictions_near_chance():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(10), 1000)
    acc = evaluate(rng.integers(0, 10, y.size), y, "classification", 10).accuracy
    assert abs(acc - 0.1) <= 0.02


def test_metrics_permutation_invariant(rng):
    out, y = rng.standard_normal((50, 4)), rng.integers(0, 4, 50)
    perm = rng.permutation(50)
    a, b = evaluate(out, y, "classification", 4), evaluate(out[perm], y[perm], "classification", 4)
    assert a.metric == b.metric and (a.confusion == b.confusion).all()


def test_metrics_equal_one_only_if_exact(rng):
    mask = (rng.random((3, 1, 6, 6)) < 0.4).astype(float)
    flipped = mask.copy()
    flipped[0, 0, 0, 0] = 1 - flipped[0, 0, 0, 0]
    rep = evaluate(flipped, mask, "segmentation")
    assert rep.miou < 1 and rep.accuracy < 1


# cost model

def test_mac_counts():
    assert mac_count(NetworkSpec((L.dense(100, 10),)), (100,)) == 1000
    assert mac_count(NetworkSpec((L.conv2d(1, 8, 7),)), (1, 28, 28)) == 22 * 22 * 49 * 8 == 189_728


@pytest.mark.parametrize("spec,shape", [(onn_classifier(), (1, 28, 28)),
                                        (onn_classifier(n_kernels=2, kernel_px=3, hidden=(4,)), (1, 28, 28))])
def test_backend_only_strictly_less(spec, shape):
    assert mac_count(spec, shape, "backend_only") < mac_count(spec, shape, "full")


def test_energy_arithmetic():
    m = CostModel(1e-9, 2e-3)
    assert energy_estimate(0, 1, m) == 2e-3
    assert energy_estimate(2000, 0, m) == pytest.approx(2 * energy_estimate(1000, 0, m), rel=1e-15)
    assert energy_estimate(65e6, 1, CostModel(DEFAULT_ENERGY_PER_MAC_J, 3.82e-3)) == pytest.approx(5.83e-3, rel=0.02)
    with pytest.raises(SpecError):
        CostModel(0, 1)


def test_hybrid_cheaper_when_backend_small():
    model = CostModel()
    digital = mac_count(lenet_teacher(), (1, 28, 28))
    hybrid_spec = NetworkSpec((L.conv2d(1, 8, 7),) + tuple(dense_backend(8, 7, 28, (8,))), frontend_split=1)
    backend = mac_count(hybrid_spec, (1, 28, 28), "backend_only")
    assert backend < 0.3 * digital
    assert energy_estimate(backend, 1, model) < energy_estimate(digital, 1, model)


# feature export

def test_export_features(tmp_path):
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 40)
    x = (2 * y[:, None] - 1) * 2.0 + 0.3 * rng.standard_normal((40, 3))
    net = build_network(NetworkSpec((L.dense(3, 4), L.relu(), L.dense(4, 2))), 0)
    net, _ = fit(net, x, y, "classification", TrainConfig(epochs=30, batch_size=8,
                                                          optimizer=OptimizerHyper("adam", 3e-2)))
    assert evaluate(forward(net, x), y, "classification").metric == 1.0
    n = export_features(net, x, y, tmp_path / "f.csv")
    first = (tmp_path / "f.csv").read_bytes()
    export_features(net, x, y, tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_bytes() == first
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert n == 40 and len(rows) == 41 and rows[0][0] == "label"
    feats = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    labels = np.array([int(r[0]) for r in rows[1:]])
    np.testing.assert_allclose(feats, penultimate_features(net, x), rtol=1e-15)
    # one-pass perceptron repeated to convergence: separable features converge with zero errors
    z = np.hstack([feats, np.ones((40, 1))])
    s = 2 * labels - 1
    w = np.zeros(z.shape[1])
    for _ in range(1000):
        errors = 0
        for zi, si in zip(z, s):
            if si * (zi @ w) <= 0:
                w += si * zi
                errors += 1
        if errors == 0:
            break
    assert errors == 0
