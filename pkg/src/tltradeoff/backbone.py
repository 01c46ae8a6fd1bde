"""Sequential conv/dense networks with prefix freezing and activation capture.

Conv layers are NHWC with weights (kh, kw, c_in, c_out); dense and logits
layers hold (fan_in, fan_out) matrices, so Keras-exported VGG16 kernels can be
written into the weight container without transposition. A conv layer may
use ``same`` padding and a trailing 2x2 max-pool, which is enough to describe
VGG16 exactly.

Weight container, all little-endian::

    u32 entry count
    per entry:  u8 kind, u8 ndim, ndim x u32 dims
    payload:    per entry, f32 values row-major; layer entries
                (conv/dense/logits) are followed by dims[-1] f32 bias values
    u64 checksum (blake2b, 8-byte digest, of every preceding byte)
"""
from __future__ import annotations

import copy
import enum
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError, WeightImportError


class LayerKind(str, enum.Enum):
    CONV = "conv"
    DENSE = "dense"
    LOGITS = "logits"


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"
    SOFTMAX = "softmax"


class SelectionMode(str, enum.Enum):
    FREEZE_PREFIX = "freeze_prefix"
    EXTRACT_SUFFIX = "extract_suffix"


SOURCE_TAGS = ("IN", "P2", "other")

_KIND_CODES = {LayerKind.CONV: 0, LayerKind.DENSE: 1, LayerKind.LOGITS: 2}
TENSOR_KIND = 3
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class WeightLayer:
    kind: LayerKind
    weight: np.ndarray
    bias: np.ndarray
    activation_fn: Activation = Activation.RELU
    frozen: bool = False
    stride: int = 1
    padding: str = "valid"
    pool: int = 1

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        self.activation_fn = Activation(self.activation_fn)
        want = 4 if self.kind == LayerKind.CONV else 2
        if self.weight.ndim != want:
            raise ShapeError(f"{self.kind.value} weight must be rank {want}, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[-1],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")
        if self.padding not in ("valid", "same"):
            raise ConfigError(f"unknown padding {self.padding!r}")

    @property
    def fan_in(self):
        return int(np.prod(self.weight.shape[:-1]))

    @property
    def width(self):
        return self.weight.shape[-1]

    @property
    def n_params(self):
        return self.weight.size + self.bias.size


@dataclass(frozen=True)
class LayerSelection:
    mode: SelectionMode
    fraction: float
    resolved_count: int

    @classmethod
    def resolve(cls, total_weight_layers, mode, fraction):
        mode = SelectionMode(mode)
        return cls(mode, fraction, layers_for_fraction(total_weight_layers, mode, fraction))


@dataclass
class LayeredBackbone:
    id: str
    layers: list
    input_shape: tuple
    source_tag: str = "other"
    initializer: str = "he_uniform"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.source_tag not in SOURCE_TAGS:
            raise ConfigError(f"source_tag must be one of {SOURCE_TAGS}, got {self.source_tag!r}")
        self.validate()

    def validate(self):
        if len(self.layers) < 3:
            raise ShapeError("a backbone needs at least 3 weight layers")
        kinds = [layer.kind for layer in self.layers]
        if kinds.count(LayerKind.LOGITS) != 1 or kinds[-1] != LayerKind.LOGITS:
            raise ShapeError("exactly one logits layer is required, in last position")
        self.output_shapes()

    def output_shapes(self):
        """Activation shape of each layer (before any max-pool)."""
        shapes = []
        shape = self.input_shape
        for idx, layer in enumerate(self.layers):
            if layer.kind == LayerKind.CONV:
                if len(shape) != 3:
                    raise ShapeError(f"layer {idx}: conv after a flat activation")
                kh, kw, c_in, c_out = layer.weight.shape
                if c_in != shape[2]:
                    raise ShapeError(f"layer {idx}: expects {c_in} channels, receives {shape[2]}")
                if layer.padding == "same":
                    h, w = -(-shape[0] // layer.stride), -(-shape[1] // layer.stride)
                else:
                    h = kernels.conv_output_size(shape[0], kh, layer.stride)
                    w = kernels.conv_output_size(shape[1], kw, layer.stride)
                if h < 1 or w < 1:
                    raise ShapeError(f"layer {idx}: spatial size collapses to {h}x{w}")
                shapes.append((h, w, c_out))
                if layer.pool > 1:
                    h, w = h // layer.pool, w // layer.pool
                shape = (h, w, c_out)
            else:
                fan_in = int(np.prod(shape))
                if layer.weight.shape[0] != fan_in:
                    raise ShapeError(f"layer {idx}: expects {layer.weight.shape[0]} inputs, receives {fan_in}")
                shape = (layer.weight.shape[1],)
                shapes.append(shape)
        return shapes

    @property
    def n_classes(self):
        return self.layers[-1].width

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    @property
    def n_params(self):
        return sum(layer.n_params for layer in self.layers)

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        out = self.copy()
        for layer in out.layers:
            layer.weight = layer.weight.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
        return out

    def parameters(self):
        return [(layer.weight, layer.bias) for layer in self.layers]


# --------------------------------------------------------------------------
# layer selection


def layers_for_fraction(total_weight_layers, mode, fraction):
    """Number of layers a fraction selects.

    Freezing rounds ``fraction * total`` half-up. Extraction counts backwards
    from the last layer before the logits and floors ``fraction * (total - 1)``.
    Both results are at least 1.
    """
    mode = SelectionMode(mode)
    if not (0 < fraction <= 1):
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if total_weight_layers < 2:
        raise ConfigError("need at least 2 weight layers")
    if mode == SelectionMode.FREEZE_PREFIX:
        count = int(math.floor(fraction * total_weight_layers + 0.5))
    else:
        extractable = total_weight_layers - 1
        count = extractable if fraction == 1 else int(math.floor(fraction * extractable + 1e-9))
    return max(1, count)


def freeze_prefix(b, fraction):
    n = layers_for_fraction(len(b.layers), SelectionMode.FREEZE_PREFIX, fraction)
    out = b.copy()
    for idx, layer in enumerate(out.layers):
        layer.frozen = idx < n
    return out


def _init_uniform(rng, shape, fan_in, fan_out, scheme):
    if scheme == "he_uniform":
        limit = math.sqrt(6.0 / fan_in)
    elif scheme == "lecun_uniform":
        limit = math.sqrt(3.0 / fan_in)
    elif scheme == "glorot_uniform":
        limit = math.sqrt(6.0 / (fan_in + fan_out))
    else:
        raise ConfigError(f"unknown initializer {scheme!r}")
    return rng.uniform(-limit, limit, size=shape)


def reinit_last_two(b, n_classes, seed, initializer=None):
    """Resample the last hidden layer and the logits layer; resize logits to ``n_classes``."""
    if n_classes < 2:
        raise ConfigError("n_classes must be >= 2")
    scheme = initializer or b.initializer
    rng = np.random.default_rng(seed)
    out = b.copy()
    out.initializer = scheme
    dtype = b.dtype
    hidden = out.layers[-2]
    hidden.weight = _init_uniform(rng, hidden.weight.shape, hidden.fan_in, hidden.width, scheme).astype(dtype)
    hidden.bias = np.zeros_like(hidden.bias)
    logits = out.layers[-1]
    shape = (logits.weight.shape[0], n_classes)
    logits.weight = _init_uniform(rng, shape, shape[0], n_classes, scheme).astype(dtype)
    logits.bias = np.zeros(n_classes, dtype=dtype)
    return out


# --------------------------------------------------------------------------
# forward / backward


def _same_pad(h, layer):
    kh, kw = layer.weight.shape[:2]
    s = layer.stride
    pads = []
    for size, k in ((h.shape[1], kh), (h.shape[2], kw)):
        total = max((-(-size // s) - 1) * s + k - size, 0)
        pads.append((total // 2, total - total // 2))
    return pads


def _maxpool(a, p):
    n, h, w, c = a.shape
    ho, wo = h // p, w // p
    win = a[:, :ho * p, :wo * p].reshape(n, ho, p, wo, p, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, ho, wo, c, p * p)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool_backward(g, arg, shape, p):
    n, h, w, c = shape
    ho, wo = g.shape[1:3]
    onehot = np.zeros((n, ho, wo, c, p * p), dtype=g.dtype)
    np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
    onehot = onehot.reshape(n, ho, wo, c, p, p).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * p, wo * p, c)
    out = np.zeros(shape, dtype=g.dtype)
    out[:, :ho * p, :wo * p] = onehot
    return out


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _activate(z, fn):
    if fn == Activation.RELU:
        return np.maximum(z, 0)
    if fn == Activation.SOFTMAX:
        return _softmax(z)
    return z


@dataclass
class _Cache:
    x_in: np.ndarray
    z: np.ndarray
    a: np.ndarray
    in_shape: tuple
    pads: list | None = None
    pool_arg: np.ndarray | None = None


def _check_batch(b, batch):
    batch = np.asarray(batch)
    if batch.ndim != len(b.input_shape) + 1 or tuple(batch.shape[1:]) != b.input_shape:
        raise ShapeError(f"batch shape {batch.shape[1:]} does not match backbone input {b.input_shape}")
    return np.ascontiguousarray(batch, dtype=b.dtype)


def _forward(b, batch, stop_after=None, keep=False):
    h = _check_batch(b, batch)
    caches = []
    last = len(b.layers) - 1 if stop_after is None else stop_after
    for idx in range(last + 1):
        layer = b.layers[idx]
        in_shape = h.shape
        pads = None
        if layer.kind == LayerKind.CONV:
            x_in = h
            if layer.padding == "same":
                pads = _same_pad(h, layer)
                x_in = np.pad(h, [(0, 0), *pads, (0, 0)])
            z = kernels.conv2d_forward(x_in, layer.weight, layer.bias, layer.stride)
        else:
            x_in = h.reshape(len(h), -1)
            z = x_in @ layer.weight + layer.bias
        a = _activate(z, layer.activation_fn)
        out, arg = a, None
        if layer.kind == LayerKind.CONV and layer.pool > 1:
            out, arg = _maxpool(a, layer.pool)
        caches.append(_Cache(x_in if keep else None, z if keep else None, a, in_shape, pads, arg))
        h = out
    return h, caches


def forward(b, batch):
    """Output of the logits layer after its activation (class probabilities for softmax)."""
    out, _ = _forward(b, batch)
    return out


def logits(b, batch):
    _, caches = _forward(b, batch, keep=True)
    return caches[-1].z


def selected_layers(b, selection):
    """Indices of the layers a suffix selection captures, in network order."""
    count = selection.resolved_count
    last = len(b.layers) - 2
    if count > last + 1:
        raise ConfigError(f"selection of {count} layers exceeds the {last + 1} extractable layers")
    return list(range(last - count + 1, last + 1))


def forward_collect(b, batch, selection):
    """Activations of the selected suffix layers (logits excluded).

    Order is network order, shallowest selected layer first. One forward pass
    serves every capture and stops at the last layer before the logits.
    """
    idx = selected_layers(b, selection)
    _, caches = _forward(b, batch, stop_after=idx[-1])
    return [caches[i].a for i in idx]


def cross_entropy(z, y):
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def loss_and_grads(b, batch, y):
    """Mean softmax cross-entropy and its gradients for every non-frozen layer.

    Returns ``(loss, probs, grads)`` where ``grads`` maps layer index to
    ``(grad_weight, grad_bias)``. Backpropagation stops at the first
    trainable layer.
    """
    y = np.asarray(y)
    _, caches = _forward(b, batch, keep=True)
    z = caches[-1].z
    loss = cross_entropy(z.astype(np.float64), y)
    probs = _softmax(z)
    trainable = [i for i, layer in enumerate(b.layers) if not layer.frozen]
    grads = {}
    if not trainable:
        return loss, probs, grads
    first = trainable[0]
    g = probs.copy()
    g[np.arange(len(y)), y] -= 1
    g /= len(y)
    last = len(b.layers) - 1
    for idx in range(last, first - 1, -1):
        layer = b.layers[idx]
        cache = caches[idx]
        if idx != last:
            if cache.pool_arg is not None:
                g = _maxpool_backward(g, cache.pool_arg, cache.a.shape, layer.pool)
            if layer.activation_fn == Activation.RELU:
                g = g * (cache.z > 0)
        need_input = idx > first
        if layer.kind == LayerKind.CONV:
            gx, gw, gb = kernels.conv2d_backward(cache.x_in, layer.weight, g, layer.stride, need_input)
            if need_input and cache.pads is not None:
                (t, _), (lft, _) = cache.pads
                gx = gx[:, t:t + cache.in_shape[1], lft:lft + cache.in_shape[2]]
        else:
            gw = cache.x_in.T @ g
            gb = g.sum(axis=0)
            gx = (g @ layer.weight.T).reshape(cache.in_shape) if need_input else None
        if not layer.frozen:
            grads[idx] = (gw.astype(layer.weight.dtype, copy=False), gb.astype(layer.bias.dtype, copy=False))
        g = gx
    return loss, probs, grads


# --------------------------------------------------------------------------
# builders


def toy_backbone(input_side=14, channels=3, n_classes=10, seed=0, source_tag="other",
                 initializer="he_uniform", dtype=np.float32):
    """conv 3x3/8 stride 2 -> conv 3x3/16 -> dense 32 -> logits; about 10k parameters at 14x14x3."""
    rng = np.random.default_rng(seed)
    h1 = kernels.conv_output_size(input_side, 3, 2)
    h2 = kernels.conv_output_size(h1, 3, 1)
    if h2 < 1:
        raise ConfigError(f"input side {input_side} too small for the toy backbone")
    specs = [
        (LayerKind.CONV, (3, 3, channels, 8), 2),
        (LayerKind.CONV, (3, 3, 8, 16), 1),
        (LayerKind.DENSE, (h2 * h2 * 16, 32), 1),
        (LayerKind.LOGITS, (32, n_classes), 1),
    ]
    layers = []
    for kind, shape, stride in specs:
        fan_in = int(np.prod(shape[:-1]))
        w = _init_uniform(rng, shape, fan_in, shape[-1], initializer).astype(dtype)
        act = Activation.SOFTMAX if kind == LayerKind.LOGITS else Activation.RELU
        layers.append(WeightLayer(kind, w, np.zeros(shape[-1], dtype=dtype), act, stride=stride))
    return LayeredBackbone(f"toy-{seed}", layers, (input_side, input_side, channels), source_tag, initializer)


VGG16_BLOCKS = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))


def vgg16_backbone(n_classes=1000, input_side=224, source_tag="IN", dtype=np.float32, allocate=True):
    """VGG16 layout (13 conv + 3 dense) ready for ``import_weights``.

    With ``allocate=False`` the parameters are zero-strided views, which is
    enough to count layers or validate a container without 500 MB of memory.
    """
    layers = []
    c_in = 3

    def zeros(shape):
        if allocate:
            return np.zeros(shape, dtype=dtype)
        return np.broadcast_to(np.zeros((), dtype=dtype), shape)

    for width, reps in VGG16_BLOCKS:
        for r in range(reps):
            pool = 2 if r == reps - 1 else 1
            layers.append(WeightLayer(LayerKind.CONV, zeros((3, 3, c_in, width)), zeros((width,)),
                                      Activation.RELU, padding="same", pool=pool))
            c_in = width
    side = input_side // 32
    layers.append(WeightLayer(LayerKind.DENSE, zeros((side * side * 512, 4096)), zeros((4096,))))
    layers.append(WeightLayer(LayerKind.DENSE, zeros((4096, 4096)), zeros((4096,))))
    layers.append(WeightLayer(LayerKind.LOGITS, zeros((4096, n_classes)), zeros((n_classes,)),
                              Activation.SOFTMAX))
    return LayeredBackbone("vgg16", layers, (input_side, input_side, 3), source_tag)


# --------------------------------------------------------------------------
# weight container


def _checksum(data):
    return struct.unpack("<Q", hashlib.blake2b(data, digest_size=8).digest())[0]


def encode_container(entries):
    """``entries`` is a list of ``(kind_code, tensor, bias_or_None)``."""
    header = [struct.pack("<I", len(entries))]
    payload = []
    for kind, tensor, bias in entries:
        tensor = np.asarray(tensor)
        if tensor.ndim > 255:
            raise ShapeError("tensor rank above 255")
        header.append(struct.pack("<BB", kind, tensor.ndim))
        header.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        payload.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
        if kind != TENSOR_KIND:
            payload.append(np.ascontiguousarray(bias, dtype="<f4").tobytes())
    body = b"".join(header + payload)
    return body + struct.pack("<Q", _checksum(body))


def decode_container(data):
    """Inverse of ``encode_container``; returns ``(entries, checksum)``."""
    if len(data) < 12:
        raise WeightImportError("container truncated")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if _checksum(body) != stored:
        raise WeightImportError("container checksum mismatch")
    (count,) = struct.unpack_from("<I", body, 0)
    off = 4
    shapes = []
    for _ in range(count):
        kind, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        shapes.append((kind, dims))
    entries = []
    for kind, dims in shapes:
        n = int(np.prod(dims)) if dims else 1
        tensor = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
        off += 4 * n
        bias = None
        if kind != TENSOR_KIND:
            nb = dims[-1]
            bias = np.frombuffer(body, dtype="<f4", count=nb, offset=off).astype(np.float32)
            off += 4 * nb
        entries.append((kind, tensor, bias))
    if off != len(body):
        raise WeightImportError("container payload length does not match its header")
    return entries, stored


def write_tensors(path, tensors):
    """Store bare tensors (exported activations, embeddings) in the container format."""
    data = encode_container([(TENSOR_KIND, t, None) for t in tensors])
    Path(path).write_bytes(data)
    return _checksum(data[:-8])


def read_tensors(path):
    entries, _ = decode_container(Path(path).read_bytes())
    return [t for _, t, _ in entries]


def export_weights(b, path):
    data = encode_container([(_KIND_CODES[layer.kind], layer.weight, layer.bias) for layer in b.layers])
    Path(path).write_bytes(data)
    return struct.unpack("<Q", data[-8:])[0]


def import_weights(b, container):
    entries, checksum = decode_container(Path(container).read_bytes())
    if len(entries) != len(b.layers):
        raise WeightImportError(f"container holds {len(entries)} layers, backbone has {len(b.layers)}")
    out = b.copy()
    for idx, ((kind, w, bias), layer) in enumerate(zip(entries, out.layers)):
        if kind not in _CODE_KINDS or _CODE_KINDS[kind] != layer.kind:
            raise WeightImportError(f"layer {idx}: container kind {kind} does not match {layer.kind.value}")
        if w.shape != layer.weight.shape:
            raise WeightImportError(
                f"layer {idx} ({layer.kind.value}): container shape {w.shape} != backbone shape {layer.weight.shape}"
            )
        layer.weight = w.astype(b.dtype)
        layer.bias = bias.astype(b.dtype)
    out.id = f"{b.id.split('@')[0]}@{checksum:016x}"
    return out
