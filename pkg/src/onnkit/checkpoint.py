"""Checkpoint format: ASCII manifest, blank line, little-endian f64 payloads in manifest order,
then a 32-byte SHA-256 of everything before it."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .net import Network, NetworkSpec, build_network, load_params

MAGIC = "ONNKIT-CKPT v1"
REALIZED_PREFIX = "REALIZED"
DIGEST_BYTES = 32


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    lines = [MAGIC]
    payload = []
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise DataFormatError(f"tensor name {name!r} must be non-empty without whitespace")
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(" ".join([name, str(arr.ndim)] + [str(d) for d in arr.shape]))
        payload.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    body = ("\n".join(lines) + "\n\n").encode("ascii") + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def decode(raw: bytes) -> dict[str, np.ndarray]:
    if len(raw) < DIGEST_BYTES or hashlib.sha256(raw[:-DIGEST_BYTES]).digest() != raw[-DIGEST_BYTES:]:
        raise DataFormatError("checkpoint checksum mismatch (file corrupted or truncated)")
    raw = raw[:-DIGEST_BYTES]
    end = raw.find(b"\n\n")
    if end < 0:
        raise DataFormatError("checkpoint manifest is not terminated by a blank line")
    try:
        lines = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as e:
        raise DataFormatError("checkpoint manifest is not ASCII") from e
    if lines[0] != MAGIC:
        raise DataFormatError(f"bad checkpoint header {lines[0]!r}, expected {MAGIC!r}")
    entries = []
    for line in lines[1:]:
        parts = line.split(" ")
        try:
            ndim = int(parts[1])
            dims = tuple(int(d) for d in parts[2:])
        except (IndexError, ValueError) as e:
            raise DataFormatError(f"malformed manifest line {line!r}") from e
        if len(dims) != ndim or any(d < 0 for d in dims):
            raise DataFormatError(f"manifest line {line!r} declares {ndim} dims but lists {len(dims)}")
        entries.append((parts[0], dims))
    pos = end + 2
    out = {}
    for name, dims in entries:
        size = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + size > len(raw):
            raise DataFormatError(f"checkpoint payload truncated at tensor {name}")
        out[name] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos).astype(np.float64).reshape(dims)
        pos += size
    if pos != len(raw):
        raise DataFormatError(f"checkpoint has {len(raw) - pos} trailing bytes")
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def spec_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".spec.json")


def save_network(path, net: Network) -> None:
    """Parameters go in the checkpoint; the architecture in a JSON sidecar."""
    save_tensors(path, net.params)
    spec_path(path).write_text(json.dumps(net.spec.to_dict(), indent=1) + "\n")


def load_network(path) -> Network:
    sp = spec_path(path)
    if not sp.exists():
        raise DataFormatError(f"missing architecture sidecar {sp}")
    spec = NetworkSpec.from_dict(json.loads(sp.read_text()))
    return load_params(build_network(spec, 0), load_tensors(path))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
