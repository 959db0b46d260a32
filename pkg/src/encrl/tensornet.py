"""A small numpy neural-network engine with manual backpropagation.

Layers are stacked in a ``Sequential``; each layer caches what it needs in
``forward`` and consumes it in ``backward``. The batch dimension always
leads. Parameters default to float64 (gradient checking); training code
builds float32 networks for speed.
"""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from encrl.errors import ConfigError, DataError, ShapeError

DTYPE = np.float64


class Layer:
    """Base layer: no parameters, identity shape."""

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, dtype=DTYPE):
        self.W = he_uniform(rng, (n_in, n_out), n_in, dtype) if rng is not None else np.zeros((n_in, n_out), dtype)
        self.b = np.zeros(n_out, dtype)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self.needs_input_grad = True
        self._x = None

    def params(self):
        return [self.W, self.b]

    def grads(self):
        return [self.dW, self.db]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.W.shape[0]:
            raise ShapeError(f"Dense expects (N, {self.W.shape[0]}), got {x.shape}")
        self._x = x
        out = x @ self.W
        out += self.b
        return out

    def backward(self, dout):
        self.dW[...] = self._x.T @ dout
        self.db[...] = dout.sum(axis=0)
        if not self.needs_input_grad:
            return None
        return dout @ self.W.T

    def output_shape(self, input_shape):
        return (self.W.shape[1],)


class Conv2D(Layer):
    """2-D cross-correlation over (N, C, H, W) with zero padding.

    im2col is a single gather through a flat index table built once per
    input shape; the backward scatter walks the k*k kernel offsets.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, dtype=DTYPE):
        if kernel < 1 or stride < 1 or padding < 0:
            raise ConfigError("kernel and stride must be >= 1, padding >= 0")
        fan_in = in_ch * kernel * kernel
        shape = (out_ch, in_ch, kernel, kernel)
        self.W = he_uniform(rng, shape, fan_in, dtype) if rng is not None else np.zeros(shape, dtype)
        self.b = np.zeros(out_ch, dtype)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self.stride = stride
        self.padding = padding
        self.needs_input_grad = True
        self._index: dict[tuple[int, int, int], np.ndarray] = {}
        self._cache = None

    def params(self):
        return [self.W, self.b]

    def grads(self):
        return [self.dW, self.db]

    def output_shape(self, input_shape):
        c, h, w = input_shape
        k, s, p = self.W.shape[2], self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {k} does not fit a {h}x{w} input with padding {p}")
        return (self.W.shape[0], ho, wo)

    def _gather_index(self, c: int, h: int, w: int) -> np.ndarray:
        key = (c, h, w)
        if key not in self._index:
            k, s, p = self.W.shape[2], self.stride, self.padding
            _, ho, wo = self.output_shape(key)
            hp, wp = h + 2 * p, w + 2 * p
            oy, ox = np.meshgrid(np.arange(ho) * s, np.arange(wo) * s, indexing="ij")
            ch, ky, kx = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
            idx = (ch.ravel()[None] * hp * wp
                   + (oy.ravel()[:, None] + ky.ravel()[None]) * wp
                   + (ox.ravel()[:, None] + kx.ravel()[None]))
            self._index[key] = idx  # (ho*wo, c*k*k)
        return self._index[key]

    def forward(self, x):
        n, c, h, w = x.shape
        o, ci, k, _ = self.W.shape
        if c != ci:
            raise ShapeError(f"Conv2D expects {ci} channels, got {c}")
        _, ho, wo = self.output_shape((c, h, w))
        p = self.padding
        if p:
            xp = np.zeros((n, c, h + 2 * p, w + 2 * p), x.dtype)
            xp[:, :, p:p + h, p:p + w] = x
        else:
            xp = x
        cols = xp.reshape(n, -1)[:, self._gather_index(c, h, w)].reshape(n * ho * wo, c * k * k)
        out = cols @ self.W.reshape(o, -1).T
        out += self.b
        self._cache = (x.shape, xp.shape, cols, ho, wo)
        return out.reshape(n, ho * wo, o).transpose(0, 2, 1).reshape(n, o, ho, wo)

    def backward(self, dout):
        xshape, xpshape, cols, ho, wo = self._cache
        n, c, h, w = xshape
        o, _, k, _ = self.W.shape
        p, s = self.padding, self.stride
        d2 = dout.reshape(n, o, ho * wo).transpose(0, 2, 1).reshape(-1, o)
        self.dW[...] = (d2.T @ cols).reshape(self.W.shape)
        self.db[...] = d2.sum(axis=0)
        if not self.needs_input_grad:
            return None
        dcols = (d2 @ self.W.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros(xpshape, dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


class Sequential:
    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...], dtype=DTYPE):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        # nothing upstream of the first parametrized layer needs a gradient
        for layer in layers:
            if hasattr(layer, "needs_input_grad"):
                layer.needs_input_grad = False
                break
        shape = self.input_shape
        for layer in layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        self._consolidate()

    def _consolidate(self) -> None:
        """Re-home every parameter and gradient as a view into one flat buffer each."""
        params = self.params()
        self.flat_params = np.concatenate([p.ravel() for p in params]) if params else np.zeros(0, self.dtype)
        self.flat_grads = np.zeros_like(self.flat_params)
        off = 0
        for layer in self.layers:
            if not layer.params():
                continue
            for pname, gname in (("W", "dW"), ("b", "db")):
                arr = getattr(layer, pname)
                n = arr.size
                setattr(layer, pname, self.flat_params[off:off + n].reshape(arr.shape))
                setattr(layer, gname, self.flat_grads[off:off + n].reshape(arr.shape))
                off += n

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Batched forward; ``x`` is (N, *input_shape)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"network expects input {self.input_shape}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x)
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite network output")
        return x

    def backward(self, dout: np.ndarray) -> list[np.ndarray]:
        """Backprop ``dL/d(output)`` from the last ``forward``; returns the parameter gradients."""
        dout = np.asarray(dout, dtype=self.dtype)
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
            if dout is None:
                break
        return self.grads()

    def copy(self) -> Sequential:
        twin = copy.deepcopy(self)
        twin._consolidate()
        return twin

    def load_params_from(self, other: Sequential) -> None:
        if self.flat_params.shape != other.flat_params.shape:
            raise ShapeError("networks have different parameter counts")
        self.flat_params[...] = other.flat_params

    def __call__(self, x):
        return self.forward(x)


@dataclass
class QNetworkSpec:
    kind: str
    input_shape: tuple[int, ...]
    n_actions: int
    conv: list[tuple[int, int, int]] = field(default_factory=lambda: [(16, 3, 1), (32, 3, 1)])
    conv_padding: int = 1
    hidden: list[int] = field(default_factory=lambda: [64])
    dtype: str = "float64"

    def __post_init__(self):
        if self.kind not in ("cnn", "mlp"):
            raise ConfigError(f"unknown network kind {self.kind!r}")
        if self.n_actions < 1:
            raise ConfigError("n_actions must be >= 1")
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.conv = [tuple(int(v) for v in c) for c in self.conv]
        self.hidden = [int(h) for h in self.hidden]
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def default_cnn(cls, input_shape, n_actions: int) -> QNetworkSpec:
        return cls("cnn", tuple(input_shape), n_actions)

    @classmethod
    def default_mlp(cls, input_shape, n_actions: int) -> QNetworkSpec:
        return cls("mlp", tuple(input_shape), n_actions, conv=[], hidden=[64, 64])


def build_qnetwork(spec: QNetworkSpec, rng: np.random.Generator) -> Sequential:
    """CNN: conv+ReLU stack, flatten, hidden dense+ReLU, linear head. MLP: dense+ReLU stack, linear head."""
    layers: list[Layer] = []
    dtype = np.dtype(spec.dtype)
    shape = spec.input_shape
    if spec.kind == "cnn":
        if len(shape) != 3:
            raise ShapeError("cnn input_shape must be (channels, rows, cols)")
        for ch, k, s in spec.conv:
            conv = Conv2D(shape[0], ch, k, s, spec.conv_padding, rng, dtype)
            layers += [conv, ReLU()]
            shape = conv.output_shape(shape)
        layers.append(Flatten())
        shape = (int(np.prod(shape)),)
    elif len(shape) != 1:
        raise ShapeError("mlp input_shape must be (features,)")
    width = shape[0]
    for h in spec.hidden:
        layers += [Dense(width, h, rng, dtype), ReLU()]
        width = h
    layers.append(Dense(width, spec.n_actions, rng, dtype))
    return Sequential(layers, spec.input_shape, dtype)


def forward(net: Sequential, x: np.ndarray) -> np.ndarray:
    """Q-values for one input (shape ``input_shape``) or a batch."""
    x = np.asarray(x, dtype=net.dtype)
    if x.shape == net.input_shape:
        return net.forward(x[None])[0]
    return net.forward(x)


def backward(net: Sequential, dout: np.ndarray) -> list[np.ndarray]:
    return net.backward(dout)


# -- loss and optimizer --------------------------------------------------------

def huber_loss(pred: np.ndarray, target: np.ndarray, delta: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean Huber loss and its gradient with respect to ``pred``."""
    e = np.asarray(pred, DTYPE) - np.asarray(target, DTYPE)
    a = np.abs(e)
    per = np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))
    n = max(e.size, 1)
    return float(per.sum() / n), np.clip(e, -delta, delta) / n


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v, strict=True):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} and grad {g.shape} disagree")
        tmp = np.multiply(g, 1.0 - beta1)
        m *= beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - beta2
        v *= beta2
        v += tmp
        # tmp <- sqrt(v / c2) + eps ; p -= (lr / c1) * m / tmp
        np.multiply(v, 1.0 / c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        p -= tmp


# -- persistence ---------------------------------------------------------------

_MAGIC = b"ENCRLNET1\n"


def save_params(net: Sequential, spec: QNetworkSpec, fh) -> None:
    """Header line (JSON spec) followed by every parameter as little-endian float32, declaration order."""
    header = json.dumps(asdict(spec), sort_keys=True).encode()
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)
    for p in net.params():
        fh.write(p.astype("<f4").tobytes())


def load_params(fh, rng: np.random.Generator | None = None) -> tuple[Sequential, QNetworkSpec]:
    if fh.read(len(_MAGIC)) != _MAGIC:
        raise DataError("not a parameter file")
    (n,) = struct.unpack("<I", fh.read(4))
    raw = json.loads(fh.read(n))
    spec = QNetworkSpec(**raw)
    net = build_qnetwork(spec, rng or np.random.default_rng(0))
    for p in net.params():
        nbytes = p.size * 4
        buf = fh.read(nbytes)
        if len(buf) != nbytes:
            raise DataError("truncated parameter file")
        p[...] = np.frombuffer(buf, dtype="<f4").reshape(p.shape)
    return net, spec


def params_to_bytes(net: Sequential, spec: QNetworkSpec) -> bytes:
    buf = io.BytesIO()
    save_params(net, spec, buf)
    return buf.getvalue()
