"""Small numpy neural-network engine: layers with exact backward passes, BCE
loss, Adam and binary checkpoints.

Tensors are float64 arrays with a leading batch axis and channels last:
images are ``(N, H, W, C)``, sequences ``(N, L, C)``.  Layers hold only
their hyperparameters; parameters live in per-layer dicts so that the
optimizer and checkpoint code can treat them as one flat list.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import FormatError, ShapeError, TruncatedFileError, VersionError

EPS = 1e-12


class Layer:
    kind = ""

    def spec(self) -> dict:
        """Canonical hyperparameters, used in checkpoint headers."""
        return {"kind": self.kind}

    def param_shapes(self, in_shape) -> dict:
        return {}

    def out_shape(self, in_shape) -> tuple:
        return tuple(in_shape)

    def init_params(self, in_shape, rng) -> dict:
        return {}

    def forward(self, params, x):
        raise NotImplementedError

    def backward(self, params, cache, dy, need_dx=True):
        """Return ``(dx, grads)``; ``dx`` is None when ``need_dx`` is false."""
        raise NotImplementedError


def _he_uniform(shape, fan_in, rng):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def conv_out(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


class Conv2d(Layer):
    """Valid 2-D convolution (cross-correlation), weights ``(out, k, k, in)``."""

    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1):
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride}

    def out_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.in_ch:
            raise ShapeError(f"conv2d expects {self.in_ch} channels, got {c}")
        ho, wo = conv_out(h, self.kernel, self.stride), conv_out(w, self.kernel, self.stride)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {self.kernel} does not fit input {h}x{w}")
        return (ho, wo, self.out_ch)

    def param_shapes(self, in_shape):
        k = self.kernel
        return {"W": (self.out_ch, k, k, self.in_ch), "b": (self.out_ch,)}

    def init_params(self, in_shape, rng):
        shapes = self.param_shapes(in_shape)
        return {"W": _he_uniform(shapes["W"], self.in_ch * self.kernel ** 2, rng),
                "b": np.zeros(self.out_ch)}

    def forward(self, params, x):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise ShapeError(f"conv2d expects (N, H, W, {self.in_ch}), got {x.shape}")
        k, s = self.kernel, self.stride
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]  # N, Ho, Wo, C, k, k
        n, ho, wo = win.shape[:3]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)
        y = cols @ params["W"].reshape(self.out_ch, -1).T + params["b"]
        return y.reshape(n, ho, wo, self.out_ch), (x.shape, cols)

    def backward(self, params, cache, dy, need_dx=True):
        x_shape, cols = cache
        k, s = self.kernel, self.stride
        W = params["W"]
        dym = dy.reshape(-1, self.out_ch)
        grads = {"W": (dym.T @ cols).reshape(W.shape), "b": dym.sum(axis=0)}
        if not need_dx:
            return None, grads
        dx = np.zeros(x_shape)
        ho, wo = dy.shape[1], dy.shape[2]
        for i in range(k):
            for j in range(k):
                dx[:, i:i + s * ho:s, j:j + s * wo:s, :] += dy @ W[:, i, j, :]
        return dx, grads


class Conv1d(Layer):
    """Valid 1-D convolution over ``(N, L, C)``, weights ``(out, k, in)``."""

    kind = "conv1d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1):
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride}

    def out_shape(self, in_shape):
        n, c = in_shape
        if c != self.in_ch:
            raise ShapeError(f"conv1d expects {self.in_ch} channels, got {c}")
        no = conv_out(n, self.kernel, self.stride)
        if no < 1:
            raise ShapeError(f"conv1d kernel {self.kernel} does not fit length {n}")
        return (no, self.out_ch)

    def param_shapes(self, in_shape):
        return {"W": (self.out_ch, self.kernel, self.in_ch), "b": (self.out_ch,)}

    def init_params(self, in_shape, rng):
        shapes = self.param_shapes(in_shape)
        return {"W": _he_uniform(shapes["W"], self.in_ch * self.kernel, rng),
                "b": np.zeros(self.out_ch)}

    def forward(self, params, x):
        if x.ndim != 3 or x.shape[2] != self.in_ch:
            raise ShapeError(f"conv1d expects (N, L, {self.in_ch}), got {x.shape}")
        k, s = self.kernel, self.stride
        win = sliding_window_view(x, k, axis=1)[:, ::s]  # N, Lo, C, k
        n, lo = win.shape[:2]
        cols = win.transpose(0, 1, 3, 2).reshape(n * lo, -1)
        y = cols @ params["W"].reshape(self.out_ch, -1).T + params["b"]
        return y.reshape(n, lo, self.out_ch), (x.shape, cols)

    def backward(self, params, cache, dy, need_dx=True):
        x_shape, cols = cache
        k, s = self.kernel, self.stride
        W = params["W"]
        dym = dy.reshape(-1, self.out_ch)
        grads = {"W": (dym.T @ cols).reshape(W.shape), "b": dym.sum(axis=0)}
        if not need_dx:
            return None, grads
        dx = np.zeros(x_shape)
        lo = dy.shape[1]
        for i in range(k):
            dx[:, i:i + s * lo:s, :] += dy @ W[:, i, :]
        return dx, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, params, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, dy, need_dx=True):
        return (dy * cache if need_dx else None), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, params, x):
        y = expit(x)
        return y, y

    def backward(self, params, cache, dy, need_dx=True):
        return (dy * cache * (1.0 - cache) if need_dx else None), {}


class _MaxPool(Layer):
    """Non-overlapping max pooling over the spatial axes; ragged edges are
    dropped.  Gradient goes to the first maximal element of each block."""

    ndim = 0

    def __init__(self, size: int = 2):
        self.size = size

    def spec(self):
        return {"kind": self.kind, "size": self.size}

    def out_shape(self, in_shape):
        *spatial, c = in_shape
        if len(spatial) != self.ndim or min(spatial) < self.size:
            raise ShapeError(f"{self.kind} of {self.size} does not fit {tuple(in_shape)}")
        return (*(n // self.size for n in spatial), c)

    def _offsets(self, shape):
        k = self.size
        spans = [n // k * k for n in shape[1:1 + self.ndim]]
        grids = np.ndindex(*([k] * self.ndim))
        return [(slice(None),) + tuple(slice(o, span, k) for o, span in zip(off, spans))
                for off in grids]

    def forward(self, params, x):
        if x.ndim != self.ndim + 2:
            raise ShapeError(f"{self.kind} got input of rank {x.ndim}")
        offs = self._offsets(x.shape)
        y = x[offs[0]].copy()
        for sl in offs[1:]:
            np.maximum(y, x[sl], out=y)
        return y, (x, y)

    def backward(self, params, cache, dy, need_dx=True):
        if not need_dx:
            return None, {}
        x, y = cache
        dx = np.zeros_like(x)
        taken = np.zeros(y.shape, dtype=bool)
        for sl in self._offsets(x.shape):
            hit = (x[sl] == y) & ~taken
            dx[sl] = dy * hit
            taken |= hit
        return dx, {}


class MaxPool2d(_MaxPool):
    kind = "maxpool2d"
    ndim = 2


class MaxPool1d(_MaxPool):
    kind = "maxpool1d"
    ndim = 1


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dy, need_dx=True):
        return (dy.reshape(cache) if need_dx else None), {}


class Dense(Layer):
    """``y = x @ W.T + b`` with ``W`` of shape (units, in_features)."""

    kind = "dense"

    def __init__(self, in_features: int, units: int):
        self.in_features, self.units = in_features, units

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features, "units": self.units}

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.units,)

    def param_shapes(self, in_shape):
        return {"W": (self.units, self.in_features), "b": (self.units,)}

    def init_params(self, in_shape, rng):
        return {"W": _he_uniform((self.units, self.in_features), self.in_features, rng),
                "b": np.zeros(self.units)}

    def forward(self, params, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects (N, {self.in_features}), got {x.shape}")
        return x @ params["W"].T + params["b"], x

    def backward(self, params, cache, dy, need_dx=True):
        x = cache
        grads = {"W": dy.T @ x, "b": dy.sum(axis=0)}
        return (dy @ params["W"] if need_dx else None), grads


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, Conv1d, ReLU, Sigmoid, MaxPool2d,
                                         MaxPool1d, Flatten, Dense)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    try:
        cls = LAYER_KINDS[spec.pop("kind")]
    except KeyError as exc:
        raise ShapeError(f"unknown layer kind {exc}") from None
    return cls(**spec)


def infer_shapes(layers, in_shape) -> list[tuple]:
    """Per-sample shapes after each layer (input first); raises on incompatibility."""
    shapes = [tuple(in_shape)]
    for layer in layers:
        shapes.append(tuple(layer.out_shape(shapes[-1])))
    return shapes


def init_params(layers, in_shape, rng) -> list[dict]:
    shapes = infer_shapes(layers, in_shape)
    return [layer.init_params(s, rng) for layer, s in zip(layers, shapes)]


@dataclass
class ForwardCache:
    caches: list
    in_shape: tuple


def forward(layers, params, x):
    """Run ``x`` through the stack; returns ``(output, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    in_shape = x.shape
    caches = []
    for layer, p in zip(layers, params):
        x, c = layer.forward(p, x)
        caches.append(c)
    return x, ForwardCache(caches, in_shape)


def backward(layers, params, cache: ForwardCache, dout, need_input_grad=True):
    """Exact gradients; returns ``(dinput, grads)`` with grads mirroring params."""
    if not isinstance(cache, ForwardCache) or len(cache.caches) != len(layers):
        raise ShapeError("cache does not match this layer stack")
    grads = [None] * len(layers)
    d = np.asarray(dout, dtype=np.float64)
    for i in range(len(layers) - 1, -1, -1):
        d, grads[i] = layers[i].backward(params[i], cache.caches[i], d,
                                         need_dx=need_input_grad or i > 0)
    if d is not None and d.shape != cache.in_shape:
        raise ShapeError("stale cache: input gradient shape differs from forward input")
    return d, grads


# -- loss ---------------------------------------------------------------------


def bce_loss(p, y, pos_weight: float = 1.0) -> float:
    """Mean binary cross-entropy ``-[w y ln p + (1-y) ln(1-p)]``, p clamped to [eps, 1-eps]."""
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(pos_weight * y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def bce_grad(p, y, pos_weight: float = 1.0) -> np.ndarray:
    """Derivative of :func:`bce_loss` with respect to each probability."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (p >= EPS) & (p <= 1.0 - EPS)
    pc = np.clip(p, EPS, 1.0 - EPS)
    g = (-(pos_weight * y) / pc + (1.0 - y) / (1.0 - pc)) / p.size
    return np.where(inside, g, 0.0)


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        return cls(**hyper, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``;
    the inputs are not modified."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)


# -- checkpoints --------------------------------------------------------------
#
# Layout (little-endian):
#   magic b"SDBANDCK", uint32 version
#   uint32 n, n bytes utf-8 architecture/config text
#   uint32 n_arrays, then per array: uint32 ndim, ndim x uint32 dims, float64 data
#   uint8 has_adam; if 1: uint64 step, 4 x float64 (lr, beta1, beta2, eps),
#   then the m arrays and the v arrays in parameter order (same array layout)

CKPT_MAGIC = b"SDBANDCK"
CKPT_VERSION = 1


def _pack_array(a: np.ndarray) -> bytes:
    head = struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data, self.pos, self.name = data, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.name}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self) -> np.ndarray:
        (ndim,) = self.unpack("<I")
        if ndim > 8:
            raise FormatError(f"{self.name}: implausible array rank {ndim}")
        shape = self.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def save_checkpoint(path, config_text: str, params, adam: AdamState | None = None) -> None:
    text = config_text.encode("utf-8")
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<II", CKPT_VERSION, len(text)) + text
    out += struct.pack("<I", len(params))
    for p in params:
        out += _pack_array(p)
    if adam is None:
        out += b"\x00"
    else:
        out += b"\x01" + struct.pack("<Q4d", adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps)
        for a in list(adam.m) + list(adam.v):
            out += _pack_array(a)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path):
    """Returns ``(config_text, params, adam_state_or_None)``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), str(path))
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, n_text = r.unpack("<II")
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    try:
        text = r.take(n_text).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: config text is not utf-8") from None
    (n_arrays,) = r.unpack("<I")
    params = [r.array() for _ in range(n_arrays)]
    (flag,) = r.unpack("<B")
    adam = None
    if flag == 1:
        step, lr, b1, b2, eps = r.unpack("<Q4d")
        m = [r.array() for _ in range(n_arrays)]
        v = [r.array() for _ in range(n_arrays)]
        adam = AdamState(lr, b1, b2, eps, step, m, v)
    elif flag != 0:
        raise FormatError(f"{path}: bad optimizer-state flag {flag}")
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    return text, params, adam
