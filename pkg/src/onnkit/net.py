"""Minimal differentiable engine for small sequential networks.

Supports dense, conv2d (stride 1, valid/same padding), relu, flatten and
nearest-neighbour 2x upsampling, all in float64. Besides the usual
forward/backward pass it exposes per-sample parameter Jacobians in factored
form, which is what makes batch NTK matrices (and their parameter gradients)
cheap enough for training loops: a dense layer's per-sample gradient is an
outer product, so its NTK block is a Hadamard product of two small Grams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError, ShapeError, SpecError

KINDS = ("dense", "conv2d", "relu", "upsample2x", "flatten")
PARAMETERIZATIONS = ("standard", "ntk")
SCALARIZATIONS = ("sum_outputs", "mean_outputs", "per_output")
LOSS_KINDS = ("cross_entropy", "mse", "bce")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int | None = None
    fan_out: int | None = None
    kernel_size: int | None = None
    channels_in: int | None = None
    channels_out: int | None = None
    padding_mode: str = "valid"
    bias: bool | None = None

    @classmethod
    def dense(cls, fan_in: int, fan_out: int, bias: bool = True) -> LayerSpec:
        return cls("dense", fan_in=fan_in, fan_out=fan_out, bias=bias)

    @classmethod
    def conv2d(cls, channels_in: int, channels_out: int, kernel_size: int,
               padding_mode: str = "valid", bias: bool = False) -> LayerSpec:
        return cls("conv2d", kernel_size=kernel_size, channels_in=channels_in,
                   channels_out=channels_out, padding_mode=padding_mode, bias=bias)

    @classmethod
    def relu(cls) -> LayerSpec:
        return cls("relu")

    @classmethod
    def flatten(cls) -> LayerSpec:
        return cls("flatten")

    @classmethod
    def upsample2x(cls) -> LayerSpec:
        return cls("upsample2x")

    @property
    def has_bias(self) -> bool:
        if self.bias is not None:
            return self.bias
        return self.kind == "dense"

    @property
    def weight_fan_in(self) -> int:
        if self.kind == "dense":
            return self.fan_in
        return self.channels_in * self.kernel_size ** 2

    def validate(self, index: int) -> None:
        where = f"layer {index} ({self.kind})"
        if self.kind not in KINDS:
            raise SpecError(f"{where}: unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "dense":
            if not (isinstance(self.fan_in, int) and isinstance(self.fan_out, int)
                    and self.fan_in >= 1 and self.fan_out >= 1):
                raise SpecError(f"{where}: dense needs fan_in, fan_out >= 1, got {self.fan_in}, {self.fan_out}")
        if self.kind == "conv2d":
            k = self.kernel_size
            if not isinstance(k, int) or k < 1 or k % 2 == 0:
                raise SpecError(f"{where}: conv2d needs an odd positive kernel_size, got {k}")
            if not (self.channels_in and self.channels_out and self.channels_in >= 1 and self.channels_out >= 1):
                raise SpecError(f"{where}: conv2d needs channels_in, channels_out >= 1")
            if self.padding_mode not in ("valid", "same"):
                raise SpecError(f"{where}: padding_mode must be 'valid' or 'same', got {self.padding_mode!r}")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    parameterization: str = "standard"
    frontend_split: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def validate(self) -> None:
        if self.parameterization not in PARAMETERIZATIONS:
            raise SpecError(f"parameterization must be one of {PARAMETERIZATIONS}, got {self.parameterization!r}")
        if not 0 <= self.frontend_split <= len(self.layers):
            raise SpecError(f"frontend_split {self.frontend_split} outside [0, {len(self.layers)}]")
        for i, layer in enumerate(self.layers):
            layer.validate(i)
        for i, layer in enumerate(self.layers[: self.frontend_split]):
            if layer.kind == "relu":
                raise SpecError(f"layer {i}: optical frontend must be linear, found relu before frontend_split")

    def followed_by_relu(self, index: int) -> bool:
        for layer in self.layers[index + 1:]:
            if layer.kind in ("flatten", "upsample2x"):
                continue
            return layer.kind == "relu"
        return False

    def to_dict(self) -> dict:
        return {"parameterization": self.parameterization, "frontend_split": self.frontend_split,
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(tuple(LayerSpec(**layer) for layer in d["layers"]),
                   d.get("parameterization", "standard"), d.get("frontend_split", 0))


# ---------------------------------------------------------------------------
# convolution helpers


def _im2col(x, k, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * k * k)
    return cols, oh, ow


def _col2im(dcols, xshape, k, pad, oh, ow):
    n, c, h, w = xshape
    g = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    d = dcols.reshape(n, oh, ow, c, k, k)
    for i in range(k):
        for j in range(k):
            g[:, :, i:i + oh, j:j + ow] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        g = g[:, :, pad:pad + h, pad:pad + w]
    return g


# ---------------------------------------------------------------------------
# per-sample Jacobian blocks and parameter tangents


class _OuterBlock:
    """Per-sample gradient left[i] (x) right[i] for one weight matrix."""

    def __init__(self, name, left, right):
        self.name, self.left, self.right = name, left, right

    def gram(self, other):
        return (self.left @ other.left.T) * (self.right @ other.right.T)

    def materialize(self):
        n = self.left.shape[0]
        return (self.left[:, :, None] * self.right[:, None, :]).reshape(n, -1)

    def mix(self, m):
        return _MixedOuter(m, self.left, self.right)


class _FullBlock:
    def __init__(self, name, mat):
        self.name, self.mat = name, mat  # (n, *param_shape-ish)

    def gram(self, other):
        n1, n2 = self.mat.shape[0], other.mat.shape[0]
        return self.mat.reshape(n1, -1) @ other.mat.reshape(n2, -1).T

    def materialize(self):
        return self.mat.reshape(self.mat.shape[0], -1)

    def mix(self, m):
        return np.tensordot(m, self.mat, axes=(1, 0))


class _MixedOuter:
    """Per-sample tangent V_i = sum_j m[i, j] left[j] right[j]^T, never materialized."""

    def __init__(self, m, left, right):
        self.m, self.left, self.right = m, left, right

    def apply(self, x):
        return (self.m * (x @ self.right.T)) @ self.left

    def apply_t(self, g):
        return (self.m * (g @ self.left.T)) @ self.right


# ---------------------------------------------------------------------------
# layer implementations


class _Layer:
    params: tuple = ()

    def __init__(self, index, spec: LayerSpec, scale: float):
        self.index, self.spec, self.scale = index, spec, scale

    def describe(self):
        return f"layer {self.index} ({self.spec.kind})"


class _Dense(_Layer):
    def __init__(self, index, spec, scale):
        super().__init__(index, spec, scale)
        self.w = f"layer{index}.weight"
        self.b = f"layer{index}.bias" if spec.has_bias else None
        self.params = (self.w,) + ((self.b,) if self.b else ())

    def shapes(self):
        s = {self.w: (self.spec.fan_out, self.spec.fan_in)}
        if self.b:
            s[self.b] = (self.spec.fan_out,)
        return s

    def forward(self, p, x):
        if x.ndim != 2 or x.shape[1] != self.spec.fan_in:
            raise ShapeError(f"{self.describe()}: expected input (n, {self.spec.fan_in}), got {x.shape}")
        z = self.scale * (x @ p[self.w].T)
        if self.b:
            z = z + p[self.b]
        return z, x

    def param_grads(self, p, x, gz):
        grads = {self.w: self.scale * (gz.T @ x)}
        if self.b:
            grads[self.b] = gz.sum(axis=0)
        return grads

    def backward(self, p, x, gz):
        return self.input_grad(p, x, gz), self.param_grads(p, x, gz)

    def input_grad(self, p, x, gz):
        return self.scale * (gz @ p[self.w])

    def jac_blocks(self, p, x, gz):
        blocks = [_OuterBlock(self.w, self.scale * gz, x)]
        if self.b:
            blocks.append(_FullBlock(self.b, gz))
        return blocks

    def tangent(self, p, x, xdot, v):
        zdot = self.scale * v[self.w].apply(x)
        if xdot is not None:
            zdot += self.scale * (xdot @ p[self.w].T)
        if self.b:
            zdot += v[self.b]
        return zdot

    def tangent_backward(self, p, x, xdot, v, gz, gzdot):
        w = p[self.w]
        gw = gz.T @ x
        if xdot is not None:
            gw += gzdot.T @ xdot
        grads = {self.w: self.scale * gw}
        if self.b:
            grads[self.b] = gz.sum(axis=0)
        gx = self.scale * (gz @ w + v[self.w].apply_t(gzdot))
        gxdot = self.scale * (gzdot @ w)
        return gx, gxdot, grads


class _Conv2d(_Layer):
    def __init__(self, index, spec, scale):
        super().__init__(index, spec, scale)
        self.w = f"layer{index}.weight"
        self.b = f"layer{index}.bias" if spec.has_bias else None
        self.params = (self.w,) + ((self.b,) if self.b else ())
        self.k = spec.kernel_size
        self.pad = self.k // 2 if spec.padding_mode == "same" else 0

    def shapes(self):
        sp = self.spec
        s = {self.w: (sp.channels_out, sp.channels_in, self.k, self.k)}
        if self.b:
            s[self.b] = (sp.channels_out,)
        return s

    def _check(self, x):
        sp = self.spec
        if x.ndim != 4 or x.shape[1] != sp.channels_in:
            raise ShapeError(f"{self.describe()}: expected input (n, {sp.channels_in}, h, w), got {x.shape}")
        if min(x.shape[2:]) + 2 * self.pad < self.k:
            raise ShapeError(f"{self.describe()}: input {x.shape[2:]} smaller than kernel {self.k}")

    def _wmat(self, p):
        return p[self.w].reshape(self.spec.channels_out, -1)

    def _to_maps(self, zm, oh, ow):
        n = zm.shape[0]
        return zm.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)

    def _from_maps(self, g):
        n, c = g.shape[:2]
        return g.transpose(0, 2, 3, 1).reshape(n, -1, c)

    def forward(self, p, x):
        self._check(x)
        cols, oh, ow = _im2col(x, self.k, self.pad)
        n, pp, kk = cols.shape
        zm = (cols.reshape(-1, kk) @ self._wmat(p).T).reshape(n, pp, -1)
        z = self.scale * self._to_maps(zm, oh, ow)
        if self.b:
            z = z + p[self.b][None, :, None, None]
        return z, (x.shape, cols, oh, ow)

    def param_grads(self, p, cache, gz):
        cols = cache[1]
        gzm = self._from_maps(gz)
        gw = gzm.reshape(-1, gzm.shape[2]).T @ cols.reshape(-1, cols.shape[2])
        grads = {self.w: self.scale * gw.reshape(p[self.w].shape)}
        if self.b:
            grads[self.b] = gz.sum(axis=(0, 2, 3))
        return grads

    def backward(self, p, cache, gz):
        return self.input_grad(p, cache, gz), self.param_grads(p, cache, gz)

    def input_grad(self, p, cache, gz):
        xshape, cols, oh, ow = cache
        gzm = self._from_maps(gz)
        dcols = self.scale * (gzm @ self._wmat(p))
        return _col2im(dcols, xshape, self.k, self.pad, oh, ow)

    def jac_blocks(self, p, cache, gz):
        xshape, cols, oh, ow = cache
        gzm = self._from_maps(gz)
        per = self.scale * np.matmul(gzm.transpose(0, 2, 1), cols)  # (n, cout, K)
        blocks = [_FullBlock(self.w, per)]
        if self.b:
            blocks.append(_FullBlock(self.b, gz.sum(axis=(2, 3))))
        return blocks

    def tangent(self, p, cache, xdot, v):
        xshape, cols, oh, ow = cache
        zm = np.matmul(cols, v[self.w].transpose(0, 2, 1))
        if xdot is not None:
            dcols, _, _ = _im2col(xdot, self.k, self.pad)
            zm += (dcols.reshape(-1, dcols.shape[2]) @ self._wmat(p).T).reshape(zm.shape)
        zdot = self.scale * self._to_maps(zm, oh, ow)
        if self.b:
            zdot = zdot + v[self.b][:, :, None, None]
        return zdot

    def tangent_backward(self, p, cache, xdot, v, gz, gzdot):
        xshape, cols, oh, ow = cache
        wm = self._wmat(p)
        gzm, gzdm = self._from_maps(gz), self._from_maps(gzdot)
        kk = cols.shape[2]
        gw = gzm.reshape(-1, gzm.shape[2]).T @ cols.reshape(-1, kk)
        if xdot is not None:
            dcols, _, _ = _im2col(xdot, self.k, self.pad)
            gw += gzdm.reshape(-1, gzdm.shape[2]).T @ dcols.reshape(-1, kk)
        grads = {self.w: self.scale * gw.reshape(p[self.w].shape)}
        if self.b:
            grads[self.b] = gz.sum(axis=(0, 2, 3))
        gcols = gzm @ wm + np.matmul(gzdm, v[self.w])
        gx = _col2im(self.scale * gcols, xshape, self.k, self.pad, oh, ow)
        gxdot = _col2im(self.scale * (gzdm @ wm), xshape, self.k, self.pad, oh, ow)
        return gx, gxdot, grads


class _ReLU(_Layer):
    def forward(self, p, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, gz):
        return gz * mask, {}

    def input_grad(self, p, mask, gz):
        return gz * mask

    def tangent(self, p, mask, xdot, v):
        return None if xdot is None else xdot * mask

    def tangent_backward(self, p, mask, xdot, v, gz, gzdot):
        return gz * mask, gzdot * mask, {}


class _Flatten(_Layer):
    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, shape, gz):
        return gz.reshape(shape), {}

    def input_grad(self, p, shape, gz):
        return gz.reshape(shape)

    def tangent(self, p, shape, xdot, v):
        return None if xdot is None else xdot.reshape(xdot.shape[0], -1)

    def tangent_backward(self, p, shape, xdot, v, gz, gzdot):
        return gz.reshape(shape), gzdot.reshape(shape), {}


class _Upsample2x(_Layer):
    def forward(self, p, x):
        if x.ndim != 4:
            raise ShapeError(f"{self.describe()}: expected (n, c, h, w) input, got {x.shape}")
        return x.repeat(2, axis=2).repeat(2, axis=3), None

    @staticmethod
    def _pool(g):
        n, c, h, w = g.shape
        return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))

    def backward(self, p, cache, gz):
        return self._pool(gz), {}

    def input_grad(self, p, cache, gz):
        return self._pool(gz)

    def tangent(self, p, cache, xdot, v):
        return None if xdot is None else xdot.repeat(2, axis=2).repeat(2, axis=3)

    def tangent_backward(self, p, cache, xdot, v, gz, gzdot):
        return self._pool(gz), self._pool(gzdot), {}


_IMPL = {"dense": _Dense, "conv2d": _Conv2d, "relu": _ReLU, "flatten": _Flatten, "upsample2x": _Upsample2x}


def _layer_scale(spec: NetworkSpec, i: int) -> float:
    layer = spec.layers[i]
    if spec.parameterization != "ntk" or layer.kind not in ("dense", "conv2d"):
        return 1.0
    gain = 2.0 if spec.followed_by_relu(i) else 1.0
    return math.sqrt(gain / layer.weight_fan_in)


# ---------------------------------------------------------------------------
# networks


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    first_layer: int = 0
    _impl: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._impl is None:
            self._impl = [_IMPL[layer.kind](self.first_layer + i, layer, _layer_scale(self.spec, i))
                          for i, layer in enumerate(self.spec.layers)]

    @property
    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def param_names(self) -> list[str]:
        return list(self.params)

    def with_params(self, params: dict[str, np.ndarray]) -> Network:
        return Network(self.spec, dict(params), self.first_layer, self._impl)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def from_flat(self, flat: np.ndarray) -> Network:
        out, pos = {}, 0
        for name, v in self.params.items():
            out[name] = flat[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size
        return self.with_params(out)

    def split(self) -> tuple[Network, Network]:
        """Return (frontend, backend) sub-networks sharing parameter arrays."""
        k = self.spec.frontend_split
        return self.slice(0, k), self.slice(k, len(self.spec.layers))

    def slice(self, start: int, stop: int) -> Network:
        impl = self._impl[start:stop]
        names = [n for layer in impl for n in layer.params]
        spec = NetworkSpec(self.spec.layers[start:stop], self.spec.parameterization, 0)
        return Network(spec, {n: self.params[n] for n in names}, self.first_layer + start, impl)

    def merge(self, part: Network) -> Network:
        params = dict(self.params)
        for name, v in part.params.items():
            if name not in params:
                raise SpecError(f"parameter {name} does not belong to this network")
            params[name] = v
        return self.with_params(params)


def build_network(spec: NetworkSpec, seed: int) -> Network:
    """Materialize parameters for ``spec`` deterministically from ``seed``.

    Standard parameterization draws He-normal weights (std sqrt(2/fan_in))
    for layers feeding a ReLU and sqrt(1/fan_in) otherwise. The ntk
    parameterization draws unit normals and applies the same factors in the
    forward pass instead. Biases start at zero.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    net = Network(spec, {})
    params = {}
    for i, (layer, obj) in enumerate(zip(spec.layers, net._impl)):
        if not obj.params:
            continue
        shapes = obj.shapes()
        wshape = shapes[obj.w]
        if spec.parameterization == "ntk":
            params[obj.w] = rng.standard_normal(wshape)
        else:
            gain = 2.0 if spec.followed_by_relu(i) else 1.0
            params[obj.w] = rng.normal(0.0, math.sqrt(gain / layer.weight_fan_in), wshape)
        if obj.b:
            params[obj.b] = np.zeros(shapes[obj.b])
    net.params = params
    return net


def load_params(net: Network, tensors: dict[str, np.ndarray]) -> Network:
    """Replace parameters with checkpoint tensors after checking names and shapes."""
    missing = [n for n in net.params if n not in tensors]
    if missing:
        raise SpecError(f"checkpoint lacks parameters {missing}")
    out = {}
    for name, v in net.params.items():
        t = np.asarray(tensors[name], dtype=np.float64)
        if t.shape != v.shape:
            raise SpecError(f"checkpoint tensor {name} has shape {t.shape}, network expects {v.shape}")
        out[name] = t
    return net.with_params(out)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Trace:
    inputs: list
    caches: list
    output: np.ndarray


def _run(net: Network, x: np.ndarray, checked: bool = False) -> Trace:
    x = np.asarray(x, dtype=np.float64)
    inputs, caches = [], []
    for layer in net._impl:
        inputs.append(x)
        x, cache = layer.forward(net.params, x)
        caches.append(cache)
        if checked and not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite values produced by {layer.describe()}", layer=layer.index)
    return Trace(inputs, caches, x)


def forward(net: Network, batch: np.ndarray, checked: bool = False) -> np.ndarray:
    """Outputs for each sample of ``batch``; a pure function of (params, batch)."""
    return _run(net, batch, checked).output


def _backward(net: Network, trace: Trace, gout: np.ndarray, need_input: bool = False):
    grads = {}
    g = gout
    last = len(net._impl) - 1
    for i in range(last, -1, -1):
        layer = net._impl[i]
        if layer.params:
            grads.update(layer.param_grads(net.params, trace.caches[i], g))
        if i == 0 and not need_input:
            break
        g = layer.input_grad(net.params, trace.caches[i], g)
    ordered = {name: grads.get(name, np.zeros_like(v)) for name, v in net.params.items()}
    return ordered, (g if need_input else None)


def input_gradient(net: Network, batch: np.ndarray, gout: np.ndarray) -> np.ndarray:
    trace = _run(net, batch)
    return _backward(net, trace, gout, need_input=True)[1]


def loss_value(out: np.ndarray, targets: np.ndarray, loss_kind: str):
    """Batch-mean loss and its gradient w.r.t. ``out``."""
    n = out.shape[0]
    if loss_kind == "cross_entropy":
        t = np.asarray(targets).astype(np.int64).reshape(-1)
        if out.ndim != 2 or t.shape[0] != n:
            raise ShapeError(f"cross_entropy expects logits (n, K) and n class indices, got {out.shape}, {t.shape}")
        shifted = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logz - shifted[np.arange(n), t]))
        grad = np.exp(shifted - logz[:, None])
        grad[np.arange(n), t] -= 1.0
        return loss, grad / n
    t = np.asarray(targets, dtype=np.float64).reshape(out.shape)
    if loss_kind == "mse":
        diff = out - t
        return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
    if loss_kind == "bce":
        # log(1 + e^z) - t z, written to stay finite for large |z|
        loss = np.logaddexp(0.0, out) - t * out
        sig = 0.5 * (1.0 + np.tanh(0.5 * out))
        return float(np.mean(loss)), (sig - t) / out.size
    raise SpecError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def loss_and_grad(net: Network, batch: np.ndarray, targets: np.ndarray, loss_kind: str):
    """Mean loss over the batch and its gradient dict (same names/shapes as params)."""
    trace = _run(net, batch)
    loss, gout = loss_value(trace.output, targets, loss_kind)
    if not math.isfinite(loss):
        _run(net, batch, checked=True)
        raise NumericalError("non-finite loss with finite activations", layer="loss")
    grads, _ = _backward(net, trace, gout)
    return loss, grads


def scalarization_weights(out: np.ndarray, scalarization) -> np.ndarray:
    """Cotangent w with g(x_i) = <w_i, f(x_i)>; an array is taken as explicit weights."""
    if isinstance(scalarization, np.ndarray):
        return np.broadcast_to(scalarization, out.shape)
    per_sample = out[0].size
    if scalarization == "sum_outputs":
        return np.ones_like(out)
    if scalarization == "mean_outputs":
        return np.full_like(out, 1.0 / per_sample)
    raise SpecError(f"scalarization {scalarization!r} has no single cotangent")


def _jac_blocks(net: Network, trace: Trace, gout: np.ndarray) -> list:
    blocks = {}
    g = gout
    for i in range(len(net._impl) - 1, -1, -1):
        layer = net._impl[i]
        if layer.params:
            for blk in layer.jac_blocks(net.params, trace.caches[i], g):
                blocks[blk.name] = blk
        if i > 0:
            g = layer.input_grad(net.params, trace.caches[i], g)
    return [blocks[name] for name in net.params]


def jacobian_factors(net: Network, batch: np.ndarray, scalarization: str = "sum_outputs"):
    """Factored per-sample Jacobian of the scalarized output, plus the trace."""
    trace = _run(net, batch)
    w = scalarization_weights(trace.output, scalarization)
    return _jac_blocks(net, trace, w), trace


def per_sample_jacobian(net: Network, batch: np.ndarray, scalarization: str = "sum_outputs") -> np.ndarray:
    """Dense Jacobian: (n, p) for scalarized outputs, (n*K, p) for per_output.

    Row ``i*K + c`` of the per_output form is the gradient of output ``c``
    on sample ``i``; columns follow ``net.params`` order, each tensor
    flattened row-major.
    """
    if scalarization not in SCALARIZATIONS:
        raise SpecError(f"unknown scalarization {scalarization!r}")
    trace = _run(net, batch)
    if scalarization != "per_output":
        w = scalarization_weights(trace.output, scalarization)
        return np.concatenate([b.materialize() for b in _jac_blocks(net, trace, w)], axis=1)
    out = trace.output
    n, k = out.shape[0], out[0].size
    rows = np.empty((n, k, net.param_count))
    for c in range(k):
        onehot = np.zeros((n, k))
        onehot[:, c] = 1.0
        blocks = _jac_blocks(net, trace, onehot.reshape(out.shape))
        rows[:, c, :] = np.concatenate([b.materialize() for b in blocks], axis=1)
    return rows.reshape(n * k, -1)


def gram_from_blocks(blocks_a: list, blocks_b: list | None = None) -> np.ndarray:
    if blocks_b is None:
        blocks_b = blocks_a
    return sum(a.gram(b) for a, b in zip(blocks_a, blocks_b))


def batch_ntk(net: Network, x1: np.ndarray, x2: np.ndarray | None = None,
              scalarization: str = "sum_outputs") -> np.ndarray:
    """Empirical NTK J(x1) J(x2)^T without materializing J."""
    b1, _ = jacobian_factors(net, x1, scalarization)
    b2 = b1 if x2 is None else jacobian_factors(net, x2, scalarization)[0]
    return gram_from_blocks(b1, b2)


def ntk_param_gradient(net: Network, trace: Trace, blocks: list, coeff: np.ndarray,
                       scalarization: str = "sum_outputs") -> dict[str, np.ndarray]:
    """Gradient of sum_ij coeff[i, j] * Theta[i, j] w.r.t. the parameters.

    ``coeff`` must be symmetric. Uses d Theta_ij = H_i J_j + H_j J_i, so the
    result is 2 * sum_i H_i (coeff J)_i: a Hessian-vector product per sample,
    evaluated by pushing per-sample parameter tangents forward and
    differentiating that tangent pass in reverse.
    """
    m = 2.0 * coeff
    tangents = {b.name: b.mix(m) for b in blocks}
    impl = net._impl
    xdots = []
    xdot = None
    for i, layer in enumerate(impl):
        xdots.append(xdot)
        xdot = layer.tangent(net.params, trace.caches[i], xdot, tangents) if layer.params \
            else layer.tangent(net.params, trace.caches[i], xdot, None)
    out = trace.output
    if xdot is None:
        return {name: np.zeros_like(v) for name, v in net.params.items()}
    gz = np.zeros_like(out)
    gzdot = scalarization_weights(out, scalarization)
    grads = {}
    for i in range(len(impl) - 1, -1, -1):
        layer = impl[i]
        gz, gzdot, gl = layer.tangent_backward(net.params, trace.caches[i], xdots[i],
                                               tangents if layer.params else None, gz, gzdot)
        grads.update(gl)
        if not any(earlier.params for earlier in impl[:i]):
            break
    return {name: grads.get(name, np.zeros_like(v)) for name, v in net.params.items()}


# ---------------------------------------------------------------------------
# optimizers


@dataclass(frozen=True)
class OptimizerHyper:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(net: Network, grads: dict, state: OptimizerState | None, hyper: OptimizerHyper):
    """Return (updated network, updated state); inputs are left untouched."""
    state = state or OptimizerState()
    new, m_new, v_new = {}, dict(state.m), dict(state.v)
    t = state.step + 1
    for name, p in net.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if hyper.kind == "sgd":
            new[name] = p - hyper.lr * g
        elif hyper.kind == "adam":
            m = hyper.beta1 * state.m.get(name, 0.0) + (1 - hyper.beta1) * g
            v = hyper.beta2 * state.v.get(name, 0.0) + (1 - hyper.beta2) * g * g
            m_new[name], v_new[name] = m, v
            mhat = m / (1 - hyper.beta1 ** t)
            vhat = v / (1 - hyper.beta2 ** t)
            new[name] = p - hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps)
        else:
            raise SpecError(f"unknown optimizer {hyper.kind!r}")
    return net.with_params(new), OptimizerState(t, m_new, v_new)
