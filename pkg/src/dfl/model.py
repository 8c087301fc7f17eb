"""Sequential classifiers split into a trainable body and a swappable head."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

KINDS = ("dense", "conv", "relu", "maxpool", "flatten")
PARAM_KINDS = ("dense", "conv")


class BuildError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    pool: int = 0

    @property
    def has_params(self):
        return self.kind in PARAM_KINDS

    def ints(self):
        return (self.in_features, self.out_features, self.in_channels, self.out_channels,
                self.kernel, self.stride, self.pad, self.pool)


def dense(n_in, n_out):
    return LayerSpec("dense", in_features=n_in, out_features=n_out)


def conv(c_in, c_out, kernel=3, stride=1, pad=1):
    return LayerSpec("conv", in_channels=c_in, out_channels=c_out, kernel=kernel, stride=stride, pad=pad)


def relu():
    return LayerSpec("relu")


def maxpool(k=2):
    return LayerSpec("maxpool", pool=k)


def flatten():
    return LayerSpec("flatten")


def tiny_cnn(classes, channels=3, image_size=32):
    side = image_size // 4
    return [
        conv(channels, 16), relu(), maxpool(2),
        conv(16, 32), relu(), maxpool(2),
        flatten(),
        dense(32 * side * side, 128), relu(),
        dense(128, classes),
    ]


def tiny_mlp(in_features, classes, hidden=32):
    return [dense(in_features, hidden), relu(), dense(hidden, hidden), relu(), dense(hidden, classes)]


def param_shapes(spec):
    if spec.kind == "dense":
        return [(spec.in_features, spec.out_features), (spec.out_features,)]
    if spec.kind == "conv":
        return [(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), (spec.out_channels,)]
    return []


def propagate_shape(spec, shape):
    """Output shape (without batch axis) of ``spec`` applied to ``shape``; None if incompatible."""
    k = spec.kind
    if k == "dense":
        return (spec.out_features,) if shape == (spec.in_features,) else None
    if k == "conv":
        if len(shape) != 3 or shape[0] != spec.in_channels:
            return None
        try:
            h = tc.conv_output_size(shape[1], spec.kernel, spec.stride, spec.pad)
            w = tc.conv_output_size(shape[2], spec.kernel, spec.stride, spec.pad)
        except tc.ConfigurationError:
            return None
        return (spec.out_channels, h, w)
    if k == "maxpool":
        if len(shape) != 3 or spec.pool > min(shape[1:]):
            return None
        return (shape[0], shape[1] // spec.pool, shape[2] // spec.pool)
    if k == "flatten":
        return (int(np.prod(shape)),)
    return shape


def check_shapes(specs, input_shape=None):
    """Propagate shapes through ``specs``; raises BuildError naming the first bad pair.

    Without ``input_shape`` a dense-first stack infers it; a conv-first stack is
    checked on channels only until the spatial size is known.
    """
    for s in specs:
        if s.kind not in KINDS:
            raise BuildError(f"unknown layer kind {s.kind!r}")
    shape = input_shape
    channels = None
    flat = False
    if shape is None and specs and specs[0].kind == "dense":
        shape = (specs[0].in_features,)
    for i, s in enumerate(specs):
        prev = f"{i - 1} ({specs[i - 1].kind})" if i else "input"
        if shape is None:
            if s.kind == "conv":
                if channels is not None and channels != s.in_channels:
                    raise BuildError(f"incompatible layers {prev} -> {i} (conv): {channels} channels")
                channels = s.out_channels
            elif s.kind == "flatten":
                flat = True
            elif s.kind == "dense":
                if channels is not None and not flat:
                    raise BuildError(f"incompatible layers {prev} -> {i} (dense): image input")
                shape = (s.out_features,)
            continue
        out = propagate_shape(s, tuple(shape))
        if out is None:
            raise BuildError(f"incompatible layers {prev} -> {i} ({s.kind}): input shape {tuple(shape)}")
        shape = out
    return shape


# ---------------------------------------------------------------- initialization


def init_params(shape, scheme="kaiming_uniform", rng=None, a=0.05):
    """Weights ~ U(-bound, bound); 1-d shapes are biases and come back zero."""
    rng = rng if rng is not None else np.random.default_rng()
    if len(shape) == 1:
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 2 else shape[0]
    if fan_in == 0:
        raise BuildError(f"zero fan_in for parameter of shape {shape}")
    if scheme == "kaiming_uniform":
        bound = np.sqrt(6.0 / fan_in)
    elif scheme == "uniform":
        bound = a
    else:
        raise BuildError(f"unknown init scheme {scheme!r}")
    return rng.uniform(-bound, bound, size=shape)


def kaiming_bound(fan_in):
    return float(np.sqrt(6.0 / fan_in))


# ---------------------------------------------------------------- layers


def run_layer(spec, x, params):
    k = spec.kind
    if k == "dense":
        return tc.add(tc.matmul(x, params[0]), params[1])
    if k == "conv":
        return tc.conv2d(x, params[0], params[1], stride=spec.stride, pad=spec.pad)
    if k == "relu":
        return tc.relu(x)
    if k == "maxpool":
        return tc.maxpool2d(x, spec.pool)
    if k == "flatten":
        return tc.flatten(x)
    raise BuildError(f"unknown layer kind {k!r}")


@dataclass(frozen=True)
class HeadSnapshot:
    """Read-only copy of head parameters, one array per parameter tensor."""

    params: tuple
    manifest: tuple

    def digest(self):
        h = hashlib.sha256(repr(self.manifest).encode())
        for p in self.params:
            h.update(p.tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        return (isinstance(other, HeadSnapshot) and self.manifest == other.manifest
                and all(np.array_equal(a, b) for a, b in zip(self.params, other.params)))

    __hash__ = None


def make_snapshot(arrays, manifest):
    frozen = []
    for a in arrays:
        a = np.array(a, dtype=np.float64, copy=True)
        a.setflags(write=False)
        frozen.append(a)
    return HeadSnapshot(tuple(frozen), manifest)


@dataclass(eq=False)
class Model:
    specs: list
    head_len: int
    params: list = field(default_factory=list)  # per layer: list of Tensors
    init: str = "kaiming_uniform"

    def __post_init__(self):
        idx = [i for i, s in enumerate(self.specs) if s.has_params]
        if not 1 <= self.head_len <= len(idx):
            raise BuildError(f"head_len {self.head_len} outside [1, {len(idx)}]")
        self.head_start = idx[-self.head_len]

    @property
    def body_specs(self):
        return self.specs[:self.head_start]

    @property
    def head_specs(self):
        return self.specs[self.head_start:]

    @property
    def body_params(self):
        return [p for ps in self.params[:self.head_start] for p in ps]

    @property
    def head_params(self):
        return [p for ps in self.params[self.head_start:] for p in ps]

    @property
    def parameters(self):
        return [p for ps in self.params for p in ps]

    def head_manifest(self):
        return tuple((s.kind, s.ints(), tuple(tuple(sh) for sh in param_shapes(s)))
                     for s in self.head_specs)

    def body_forward(self, x):
        for spec, ps in zip(self.body_specs, self.params[:self.head_start]):
            x = run_layer(spec, x, ps)
        return x

    def forward(self, x):
        return apply_head(self, self.body_forward(x))

    def body_digest(self):
        h = hashlib.sha256()
        for p in self.body_params:
            h.update(p.data.tobytes())
        return h.hexdigest()

    def fresh_head(self, rng):
        """Newly initialized head parameter arrays in layer order."""
        return [init_params(sh, self.init, rng) for s in self.head_specs for sh in param_shapes(s)]


def build_model(specs, head_len, init="kaiming_uniform", rng_seed=0, input_shape=None):
    check_shapes(specs, input_shape)
    rng = np.random.default_rng(rng_seed)
    params = []
    for spec in specs:
        params.append([Tensor(init_params(sh, init, rng), requires_grad=True) for sh in param_shapes(spec)])
    return Model(list(specs), head_len, params, init)


def apply_head(model, body_out, head=None):
    """Logits from the student head (``head=None``) or from a teacher snapshot.

    A teacher's output is computed from a detached copy of ``body_out`` with
    constant parameters, so nothing it produces is recorded for backward.
    """
    if head is None:
        x = body_out
        for spec, ps in zip(model.head_specs, model.params[model.head_start:]):
            x = run_layer(spec, x, ps)
        return x
    if head.manifest != model.head_manifest():
        raise ShapeError("head snapshot manifest does not match the model head")
    arrays = iter(head.params)
    x = body_out.detach()
    with tc.no_grad():
        for spec in model.head_specs:
            ps = [Tensor(next(arrays)) for _ in param_shapes(spec)]
            x = run_layer(spec, x, ps)
    return x.detach()


def snapshot_head(model):
    return make_snapshot([p.data for p in model.head_params], model.head_manifest())


def load_head(model, snap, optimizer=None):
    """Overwrite the student head with ``snap``; zero its momentum when an optimizer is given."""
    if snap.manifest != model.head_manifest():
        raise ShapeError("head snapshot manifest does not match the model head")
    for p, v in zip(model.head_params, snap.params):
        np.copyto(p.data, v)
        p.grad = None
    if optimizer is not None:
        optimizer.zero_momentum(model.head_params)


# ---------------------------------------------------------------- checkpoint

MAGIC = b"DFLM"
FORMAT_VERSION = 1


def save_checkpoint(model, path):
    """Layout: magic, u32 version, u32 head_len, u32 n_layers, per layer (u8 kind, 8 x i64 sizes),
    then every parameter as (u32 ndim, ndim x u32 dims, little-endian f64 data) in layer order."""
    out = [MAGIC, struct.pack("<III", FORMAT_VERSION, model.head_len, len(model.specs))]
    for s in model.specs:
        out.append(struct.pack("<B8q", KINDS.index(s.kind), *s.ints()))
    for p in model.parameters:
        out.append(struct.pack("<I", p.data.ndim))
        out.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.append(p.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise BuildError(f"{path}: not a model checkpoint")
    version, head_len, n = struct.unpack_from("<III", buf, 4)
    if version != FORMAT_VERSION:
        raise BuildError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    specs = []
    for _ in range(n):
        kind, *ints = struct.unpack_from("<B8q", buf, off)
        off += struct.calcsize("<B8q")
        specs.append(LayerSpec(KINDS[kind], *ints))
    params = []
    for spec in specs:
        layer = []
        for _ in param_shapes(spec):
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            count = int(np.prod(shape))
            data = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            layer.append(Tensor(data.astype(np.float64), requires_grad=True))
        params.append(layer)
    return Model(specs, head_len, params)
