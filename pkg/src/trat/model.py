"""Layer-stack networks, He initialisation and the binary checkpoint format.

Architectures are described by a small grammar::

    dense(in,out) | conv(ic,oc,k,s,p) | relu | tanh | flatten

joined by commas, e.g. ``dense(2,64),tanh,dense(64,2)``.  Dense weights are
stored ``(out, in)`` so row ``j`` of the final matrix feeds logit ``j``.
"""

from __future__ import annotations

import os
import re
import struct
import tempfile
import zlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import forward as fw
from .ndarray import Rng

ARCH_PRESETS = {
    "mlp-moons": "dense(2,64),tanh,dense(64,64),tanh,dense(64,2)",
    # 28x28 single-channel input -> 26x26x8 -> 12x12x16
    "cnn-tiny": "conv(1,8,3,1,0),relu,conv(8,16,3,2,0),relu,flatten,dense(2304,10)",
}


class ArchParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Activation:
    kind: str  # "relu" | "tanh"


@dataclass(frozen=True)
class Flatten:
    pass


_TOKEN = re.compile(r"\s*(?:(dense|conv)\s*\(([^()]*)\)|(relu|tanh|flatten))\s*(,|$)")


def parse_arch(descriptor: str) -> list:
    descriptor = ARCH_PRESETS.get(descriptor, descriptor)
    layers = []
    pos = 0
    while pos < len(descriptor):
        m = _TOKEN.match(descriptor, pos)
        if not m:
            raise ArchParseError(f"unexpected text {descriptor[pos:pos + 12]!r}", pos)
        kind, args, simple, sep = m.groups()
        if simple:
            layers.append(Flatten() if simple == "flatten" else Activation(simple))
        else:
            try:
                nums = [int(a) for a in args.split(",")]
            except ValueError:
                raise ArchParseError(f"non-integer argument in {kind}({args})", m.start(2)) from None
            want = (2,) if kind == "dense" else (3, 4, 5)
            if len(nums) not in want or any(n < 0 for n in nums) or any(n == 0 for n in nums[:3]):
                raise ArchParseError(f"bad arguments for {kind}({args})", m.start(2))
            layers.append(Dense(*nums) if kind == "dense" else Conv(*nums))
        pos = m.end()
        if not sep and pos < len(descriptor):
            raise ArchParseError("expected ','", pos)
        if sep == "," and pos >= len(descriptor):
            raise ArchParseError("trailing ','", pos)
    if not layers:
        raise ArchParseError("empty architecture", 0)
    _check_composition(layers)
    return layers


def _check_composition(layers: list) -> None:
    width = None  # features of a flat activation
    channels = None
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if channels is not None:
                raise ValueError(f"layer {i}: dense after conv needs a flatten")
            if width is not None and width != layer.in_features:
                raise ValueError(f"layer {i}: dense expects {layer.in_features} inputs, previous layer gives {width}")
            width = layer.out_features
        elif isinstance(layer, Conv):
            if width is not None:
                raise ValueError(f"layer {i}: conv after a flat layer")
            if channels is not None and channels != layer.in_channels:
                raise ValueError(f"layer {i}: conv expects {layer.in_channels} channels, got {channels}")
            channels = layer.out_channels
        elif isinstance(layer, Flatten):
            channels = None
    if not isinstance(layers[-1], Dense):
        raise ValueError("final layer must be dense")


def param_shapes(layers: list) -> dict[str, tuple]:
    shapes = {}
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            shapes[f"l{i}.weight"] = (layer.out_features, layer.in_features)
            shapes[f"l{i}.bias"] = (layer.out_features,)
        elif isinstance(layer, Conv):
            k = layer.kernel
            shapes[f"l{i}.weight"] = (layer.out_channels, layer.in_channels, k, k)
            shapes[f"l{i}.bias"] = (layer.out_channels,)
    return shapes


# ---------------------------------------------------------------------------
# layer maths, polymorphic over Var and Jet


def _dense(x, weight, bias):
    out = fw.bilinear(lambda a, w: ad.matmul(a, ad.transpose(w)), x, weight)
    shape = out.shape
    return fw.add(out, fw.linear(lambda b: ad.broadcast_to(b, shape), bias))


def _dense_per_sample(x, weight_b, bias):
    out = fw.bilinear(lambda a, w: ad.einsum("bh,bnh->bn", a, w), x, weight_b)
    shape = out.shape
    return fw.add(out, fw.linear(lambda b: ad.broadcast_to(b, shape), bias))


def _conv(x, weight, bias, layer: Conv):
    b, c, h, w = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv kernel {k} does not fit input {h}x{w}")
    ki = np.arange(k)[:, None, None, None]
    kj = np.arange(k)[None, :, None, None]
    rows, cols = np.broadcast_arrays(ki + s * np.arange(oh)[None, None, :, None],
                                     kj + s * np.arange(ow)[None, None, None, :])
    idx = (slice(None), slice(None), rows, cols)

    def patches(v):
        if p:
            v = ad.pad(v, ((0, 0), (0, 0), (p, p), (p, p)))
        return ad.getitem(v, idx)

    cols_ = fw.linear(patches, x)
    out = fw.bilinear(lambda a, kw: ad.einsum("bcijhw,ocij->bohw", a, kw), cols_, weight)
    shape = out.shape
    return fw.add(out, fw.linear(
        lambda bb: ad.broadcast_to(ad.reshape(bb, (1, -1, 1, 1)), shape), bias))


def _flatten(x):
    return fw.linear(lambda v: ad.reshape(v, (v.shape[0], -1)), x)


class Network:
    """Ordered layer stack with named float64 parameters."""

    def __init__(self, arch: str, params: Mapping[str, np.ndarray] | None = None):
        self.arch = ARCH_PRESETS.get(arch, arch)
        self.layers = parse_arch(self.arch)
        self.shapes = param_shapes(self.layers)
        self.final_layer = len(self.layers) - 1
        if params is None:
            params = {k: np.zeros(s) for k, s in self.shapes.items()}
        self.params = {}
        for k, s in self.shapes.items():
            if k not in params:
                raise ValueError(f"missing parameter {k!r}")
            v = np.asarray(params[k], dtype=np.float64)
            if v.shape != s:
                raise ValueError(f"parameter {k!r} has shape {v.shape}, architecture needs {s}")
            self.params[k] = np.array(v)
        extra = set(params) - set(self.shapes)
        if extra:
            raise ValueError(f"unexpected parameters {sorted(extra)}")

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_features

    @property
    def final_weight(self) -> str:
        return f"l{self.final_layer}.weight"

    @property
    def input_ndim(self) -> int:
        return 1 if isinstance(self.layers[0], Dense) else 3

    def copy(self) -> "Network":
        return Network(self.arch, self.params)

    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())

    def forward(self, x, params: Mapping[str, object] | None = None, per_sample_final: bool = False):
        """Logits for a batch ``x`` (or a single unbatched input).

        ``params`` maps names to arrays, Vars or Jets; defaults to the stored
        weights.  With ``per_sample_final=True`` the final weight matrix is
        broadcast to one copy per sample and ``(logits, expanded_weight)`` is
        returned so per-sample derivatives w.r.t. that matrix can be taken.
        """
        params = self.params if params is None else params
        xv = x.c0.value if isinstance(x, fw.Jet) else (x.value if isinstance(x, ad.Var) else np.asarray(x))
        single = xv.ndim == self.input_ndim
        if single:
            x = fw.linear(lambda v: ad.reshape(v, (1,) + v.shape), x if isinstance(x, (ad.Var, fw.Jet)) else ad.const(xv))
        elif not isinstance(x, (ad.Var, fw.Jet)):
            x = ad.const(xv)
        self._check_input(x.shape)

        expanded = None
        h = x
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                w, b = params[f"l{i}.weight"], params[f"l{i}.bias"]
                if per_sample_final and i == self.final_layer:
                    n = h.shape[0]
                    expanded = fw.linear(lambda v: ad.broadcast_to(v, (n,) + v.shape), w)
                    h = _dense_per_sample(h, expanded, b)
                else:
                    h = _dense(h, w, b)
            elif isinstance(layer, Conv):
                h = _conv(h, params[f"l{i}.weight"], params[f"l{i}.bias"], layer)
            elif isinstance(layer, Flatten):
                h = _flatten(h)
            elif layer.kind == "relu":
                h = fw.relu(h)
            else:
                h = fw.tanh(h)
        if single:
            h = fw.linear(lambda v: ad.reshape(v, v.shape[1:]), h)
        if per_sample_final:
            return h, expanded
        return h

    def _check_input(self, shape) -> None:
        first = self.layers[0]
        if isinstance(first, Dense):
            ok = len(shape) == 2 and shape[1] == first.in_features
            want = f"(batch, {first.in_features})"
        else:
            ok = len(shape) == 4 and shape[1] == first.in_channels
            want = f"(batch, {first.in_channels}, H, W)"
        if not ok:
            raise ValueError(f"input shape {tuple(shape)} does not match network input {want}")
        if isinstance(first, Dense):
            return
        # flatten width must agree with the dense layer that follows it
        c, h, w = shape[1:]
        for layer in self.layers:
            if isinstance(layer, Conv):
                h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                c = layer.out_channels
            elif isinstance(layer, Dense):
                if c * h * w != layer.in_features:
                    raise ValueError(f"input shape {tuple(shape)} flattens to {c * h * w} features, "
                                     f"dense layer expects {layer.in_features}")
                break

    def logits(self, x, params: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        with ad.no_grad():
            return self.forward(x, params).value

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)


def init(arch: str, rng: Rng) -> Network:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    layers = parse_arch(arch)
    params = {}
    for name, shape in param_shapes(layers).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.gaussian(shape, 0.0, float(np.sqrt(2.0 / fan_in)))
    return Network(arch, params)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"TRAT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCRCError(CheckpointError):
    pass


def to_bytes(net: Network) -> bytes:
    arch = net.arch.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(arch)), arch,
             struct.pack("<I", len(net.params))]
    for name, value in net.params.items():
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", value.ndim),
                  struct.pack(f"<{value.ndim}I", *value.shape),
                  np.ascontiguousarray(value, dtype="<f8").tobytes()]
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"undecodable string before byte {self.pos}") from None


def from_bytes(buf: bytes) -> Network:
    if len(buf) < 4:
        raise CheckpointTruncatedError("checkpoint shorter than its magic")
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf, max(len(buf) - 4, 0))
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    arch = r.text()
    params = {}
    for _ in range(r.u32()):
        name = r.text()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != r.end or len(buf) < r.pos + 4:
        raise CheckpointTruncatedError("checkpoint length does not match its contents")
    stored = struct.unpack("<I", buf[r.pos:r.pos + 4])[0]
    if zlib.crc32(buf[:r.pos]) != stored:
        raise CheckpointCRCError("checkpoint CRC mismatch")
    try:
        return Network(arch, params)
    except ValueError as exc:
        raise CheckpointFormatError(f"checkpoint parameters disagree with architecture: {exc}") from exc


def save(net: Network, path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(to_bytes(net))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Network:
    with open(path, "rb") as f:
        return from_bytes(f.read())
