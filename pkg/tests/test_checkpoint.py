import numpy as np
import pytest

from onnkit.checkpoint import (DIGEST_BYTES, decode, encode, file_digest, load_network, load_tensors, save_network,
                               save_tensors, spec_path)
from onnkit.errors import DataFormatError
from onnkit.net import build_network, forward
from onnkit.presets import onn_classifier, seg_student


def sample_tensors():
    rng = np.random.default_rng(0)
    return {"a.weight": rng.standard_normal((2, 3)), "scalar": np.array(1.5), "empty": np.zeros((0, 4)),
            "REALIZED.kernels": rng.standard_normal((1, 1, 3, 3))}


def test_round_trip_exact():
    t = sample_tensors()
    back = decode(encode(t))
    assert list(back) == list(t)
    for k in t:
        assert back[k].shape == t[k].shape and back[k].tobytes() == t[k].tobytes()
    assert encode(back) == encode(t)


def test_file_round_trip_byte_identical(tmp_path):
    save_tensors(tmp_path / "a.ckpt", sample_tensors())
    save_tensors(tmp_path / "b.ckpt", load_tensors(tmp_path / "a.ckpt"))
    assert file_digest(tmp_path / "a.ckpt") == file_digest(tmp_path / "b.ckpt")


def test_every_single_byte_mutation_rejected():
    raw = encode({"w": np.arange(6.0).reshape(2, 3), "b": np.ones(2)})
    for i in range(len(raw)):
        m = bytearray(raw)
        m[i] ^= 0x01
        with pytest.raises(DataFormatError):
            decode(bytes(m))
    for bad in (raw[:-1], raw + b"\0", raw[:DIGEST_BYTES - 1], b""):
        with pytest.raises(DataFormatError):
            decode(bad)


def test_bad_names_rejected():
    with pytest.raises(DataFormatError):
        encode({"has space": np.ones(1)})
    with pytest.raises(DataFormatError):
        encode({"": np.ones(1)})


@pytest.mark.parametrize("spec", [onn_classifier(), seg_student()])
def test_network_round_trip(tmp_path, spec):
    net = build_network(spec, 3)
    save_network(tmp_path / "n.ckpt", net)
    assert spec_path(tmp_path / "n.ckpt").exists()
    back = load_network(tmp_path / "n.ckpt")
    assert back.spec == net.spec
    shape = (2, 1, 28, 28) if spec.layers[0].channels_in == 1 else (2, 3, 16, 16)
    x = np.random.default_rng(0).random(shape)
    assert forward(back, x).tobytes() == forward(net, x).tobytes()
    save_network(tmp_path / "m.ckpt", back)
    assert file_digest(tmp_path / "m.ckpt") == file_digest(tmp_path / "n.ckpt")


def test_missing_sidecar(tmp_path):
    save_tensors(tmp_path / "x.ckpt", {"w": np.ones(1)})
    with pytest.raises(DataFormatError, match="sidecar"):
        load_network(tmp_path / "x.ckpt")
