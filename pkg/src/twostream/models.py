"""Network descriptions, parameter stores and forward passes.

Four architectures share one declarative description (:class:`NetworkSpec`):

* ``TwoStreamCAE2D``: per-frame (time-distributed) 2-D encoders for the gray
  and flow streams, fused at the bottleneck by channel concatenation and a
  1x1 mixing convolution, then split into two decoders fed the same code.
* ``TwoStreamRAE3D``: the same fusion scheme with volumetric convolutions and
  residual blocks in both encoders and decoders.
* ``SingleStreamCAE``: the CAE gray encoder/decoder alone.
* ``SupervisedClassifier``: the CAE gray encoder, global average pooling and
  a small fully connected head producing one probability per clip.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

LEAKY_SLOPE = 0.2


class ModelKind(str, enum.Enum):
    TWO_STREAM_RAE3D = "TwoStreamRAE3D"
    TWO_STREAM_CAE2D = "TwoStreamCAE2D"
    SINGLE_STREAM_CAE = "SingleStreamCAE"
    SUPERVISED = "SupervisedClassifier"

    @property
    def streams(self) -> tuple[str, ...]:
        if self in (ModelKind.TWO_STREAM_RAE3D, ModelKind.TWO_STREAM_CAE2D):
            return ("gray", "flow")
        return ("gray",)

    @property
    def is_autoencoder(self) -> bool:
        return self is not ModelKind.SUPERVISED

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if value in (kind.value, kind.name):
                return kind
        raise ValueError(f"unknown model kind {value!r}; choose from {[k.value for k in cls]}")


STREAM_CHANNELS = {"gray": 1, "flow": 2}


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # conv | upconv | residual | dense
    kernel: tuple[int, ...] = ()
    stride: tuple[int, ...] = ()
    dilation: tuple[int, ...] = ()
    in_channels: int = 0
    out_channels: int = 0
    activation: str | None = "leaky"
    upsample: tuple[int, ...] = ()

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "dense":
            return {"weight": (self.in_channels, self.out_channels), "bias": (self.out_channels,)}
        if self.kind == "residual":
            k = self.kernel + (self.in_channels, self.in_channels)
            c = (self.in_channels,)
            return {"conv1/kernel": k, "conv1/bias": c, "conv2/kernel": k, "conv2/bias": c}
        return {"kernel": self.kernel + (self.in_channels, self.out_channels),
                "bias": (self.out_channels,)}


@dataclass(frozen=True)
class NetworkSpec:
    kind: ModelKind
    rank: int  # 2: per-frame 2-D convolutions; 3: volumetric
    encoders: dict[str, tuple[Layer, ...]]
    fusion: Layer | None = None
    decoders: dict[str, tuple[Layer, ...]] = field(default_factory=dict)
    head: tuple[Layer, ...] = ()

    @property
    def streams(self) -> tuple[str, ...]:
        return tuple(self.encoders)

    @property
    def fusion_points(self) -> int:
        return 0 if self.fusion is None else 1

    @property
    def split_points(self) -> int:
        return 1 if self.fusion is not None and len(self.decoders) > 1 else 0

    def layers(self) -> Iterator[tuple[str, Layer]]:
        """(group, layer) pairs in parameter order; groups are stream names, 'shared' or 'head'."""
        for stream, layers in self.encoders.items():
            for layer in layers:
                yield stream, layer
        if self.fusion is not None:
            yield "shared", self.fusion
        for stream, layers in self.decoders.items():
            for layer in layers:
                yield stream, layer
        for layer in self.head:
            yield "head", layer

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for group, layer in self.layers():
            for pname, shape in layer.param_shapes().items():
                out[f"{group}/{layer.name}/{pname}"] = shape
        return out

    def validate(self) -> None:
        two = len(self.kind.streams) == 2
        if two and (self.fusion_points != 1 or self.split_points != 1):
            raise ValueError(f"{self.kind.value} needs exactly one fusion and one split point")
        if not two and (self.fusion_points or self.split_points):
            raise ValueError(f"{self.kind.value} must not fuse or split streams")
        if tuple(self.encoders) != self.kind.streams:
            raise ValueError(f"{self.kind.value} expects streams {self.kind.streams}")
        for stream, layers in self.encoders.items():
            code = layers[-1].out_channels
            entry = self.fusion.out_channels if self.fusion is not None else code
            dec = self.decoders.get(stream)
            if dec and dec[0].in_channels != entry:
                raise ValueError(f"{stream}: decoder input {dec[0].in_channels} != code {entry}")


@dataclass
class ParameterStore:
    values: dict[str, np.ndarray]
    seed: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def count(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.values.items() if k.startswith(prefix))

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.values.items()}

    def replace(self, values: Mapping[str, np.ndarray]) -> "ParameterStore":
        return ParameterStore({k: values[k] for k in self.values}, self.seed)


# ---------------------------------------------------------------------------
# reference architectures


def _conv(name, k, cin, cout, stride=1, dilation=1, act="leaky", rank=2) -> Layer:
    return Layer(name, "conv", (k,) * rank, _rep(stride, rank), _rep(dilation, rank), cin, cout, act)


def _rep(v, rank):
    return tuple(v) if isinstance(v, tuple) else (v,) * rank


def _cae_encoder() -> tuple[Layer, ...]:
    return (
        _conv("enc1", 3, None, 32, stride=2),
        _conv("enc2", 5, 32, 64, stride=2),
        _conv("enc3", 3, 64, 64, dilation=2),
        _conv("enc4", 3, 64, 64, dilation=2),
    )


def _cae_decoder(channels: int) -> tuple[Layer, ...]:
    return (
        _conv("dec1", 3, 64, 64, dilation=2),
        _conv("dec2", 3, 64, 64, dilation=2),
        Layer("dec3", "upconv", (5, 5), (1, 1), (1, 1), 64, 32, "leaky", (2, 2)),
        Layer("out", "upconv", (3, 3), (1, 1), (1, 1), 32, channels, "sigmoid", (2, 2)),
    )


def _with_input(layers: tuple[Layer, ...], channels: int) -> tuple[Layer, ...]:
    first = layers[0]
    return (Layer(first.name, first.kind, first.kernel, first.stride, first.dilation, channels,
                  first.out_channels, first.activation, first.upsample),) + layers[1:]


def _res(name, ch) -> Layer:
    return Layer(name, "residual", (3, 3, 3), (1, 1, 1), (1, 1, 1), ch, ch, "leaky")


def _rae_encoder(channels: int) -> tuple[Layer, ...]:
    return (
        _conv("enc1", 3, channels, 32, stride=(1, 2, 2), rank=3),
        _res("res1", 32),
        _conv("enc2", 3, 32, 64, stride=(2, 2, 2), rank=3),
        _res("res2", 64),
    )


def _rae_decoder(channels: int) -> tuple[Layer, ...]:
    return (
        _res("res3", 64),
        Layer("up1", "upconv", (3, 3, 3), (1, 1, 1), (1, 1, 1), 64, 32, "leaky", (2, 2, 2)),
        _res("res4", 32),
        Layer("out", "upconv", (3, 3, 3), (1, 1, 1), (1, 1, 1), 32, channels, "sigmoid", (1, 2, 2)),
    )


def network_spec(kind) -> NetworkSpec:
    kind = ModelKind.parse(kind)
    if kind is ModelKind.TWO_STREAM_CAE2D:
        enc = {s: _with_input(_cae_encoder(), STREAM_CHANNELS[s]) for s in kind.streams}
        dec = {s: _cae_decoder(STREAM_CHANNELS[s]) for s in kind.streams}
        fusion = _conv("fuse", 1, 128, 64)
        spec = NetworkSpec(kind, 2, enc, fusion, dec)
    elif kind is ModelKind.TWO_STREAM_RAE3D:
        enc = {s: _rae_encoder(STREAM_CHANNELS[s]) for s in kind.streams}
        dec = {s: _rae_decoder(STREAM_CHANNELS[s]) for s in kind.streams}
        fusion = _conv("fuse", 1, 128, 64, rank=3)
        spec = NetworkSpec(kind, 3, enc, fusion, dec)
    elif kind is ModelKind.SINGLE_STREAM_CAE:
        spec = NetworkSpec(kind, 2, {"gray": _with_input(_cae_encoder(), 1)}, None,
                           {"gray": _cae_decoder(1)})
    else:
        head = (
            Layer("fc1", "dense", in_channels=64, out_channels=64, activation="leaky"),
            Layer("fc2", "dense", in_channels=64, out_channels=1, activation="sigmoid"),
        )
        spec = NetworkSpec(kind, 2, {"gray": _with_input(_cae_encoder(), 1)}, None, {}, head)
    spec.validate()
    return spec


def _glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    receptive = math.prod(shape[:-2]) if len(shape) > 2 else 1
    fan_in, fan_out = receptive * shape[-2], receptive * shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def build(kind, seed: int = 17) -> tuple[NetworkSpec, ParameterStore]:
    """Reference architecture for ``kind`` with seeded Glorot-uniform weights and zero biases."""
    spec = network_spec(kind)
    rng = np.random.default_rng(seed)
    values = {}
    for name, shape in spec.param_shapes().items():
        values[name] = (np.zeros(shape, np.float32) if name.endswith("bias")
                        else _glorot(rng, shape))
    return spec, ParameterStore(values, seed)


# ---------------------------------------------------------------------------
# forward passes


def _act(x: Tensor, activation: str | None) -> Tensor:
    if activation == "leaky":
        return T.leaky_relu(x, LEAKY_SLOPE)
    if activation == "sigmoid":
        return T.sigmoid(x)
    return x


def _conv_layer(x, kernel, bias, layer: Layer) -> Tensor:
    return T.conv(x, kernel, bias, stride=layer.stride, dilation=layer.dilation, padding="same")


def residual_block(x: Tensor, params: Mapping[str, Tensor], prefix: str, layer: Layer) -> Tensor:
    """``act(x + conv2(act(conv1(x))))`` with same-padded, channel-preserving convolutions."""
    h = _act(_conv_layer(x, params[f"{prefix}/conv1/kernel"], params[f"{prefix}/conv1/bias"], layer),
             layer.activation)
    h = _conv_layer(h, params[f"{prefix}/conv2/kernel"], params[f"{prefix}/conv2/bias"], layer)
    return _act(T.add(x, h), layer.activation)


def apply_layer(x: Tensor, params: Mapping[str, Tensor], group: str, layer: Layer) -> Tensor:
    prefix = f"{group}/{layer.name}"
    if layer.kind == "residual":
        return residual_block(x, params, prefix, layer)
    if layer.kind == "dense":
        return _act(T.dense(x, params[f"{prefix}/weight"], params[f"{prefix}/bias"]), layer.activation)
    if layer.kind == "upconv":
        x = T.upsample_nearest(x, layer.upsample)
    elif layer.kind != "conv":
        raise ValueError(f"unknown layer kind {layer.kind!r}")
    return _act(_conv_layer(x, params[f"{prefix}/kernel"], params[f"{prefix}/bias"], layer),
                layer.activation)


def _as_params(params) -> Mapping[str, Tensor]:
    if isinstance(params, ParameterStore):
        return params.tensors(requires_grad=False)
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def _to_frames(x: Tensor) -> Tensor:
    b, t = x.shape[:2]
    return T.reshape(x, (b * t,) + x.shape[2:])


def _to_clips(x: Tensor, batch: int) -> Tensor:
    return T.reshape(x, (batch, x.shape[0] // batch) + x.shape[1:])


def _check_inputs(spec: NetworkSpec, inputs: Mapping[str, Tensor]) -> int:
    given = tuple(s for s in ("gray", "flow") if inputs.get(s) is not None)
    if given != spec.kind.streams:
        raise ValueError(
            f"{spec.kind.value} takes {len(spec.kind.streams)} stream(s) {spec.kind.streams}, "
            f"got {given}"
        )
    batch = None
    for s in given:
        x = inputs[s]
        if x.ndim != 5 or x.shape[-1] != STREAM_CHANNELS[s]:
            raise ValueError(f"{s} stream must be (B, T, H, W, {STREAM_CHANNELS[s]}), got {x.shape}")
        if batch is not None and x.shape[0] != batch:
            raise ValueError("gray and flow batches differ in size")
        batch = x.shape[0]
    return batch


def encode(spec: NetworkSpec, params, inputs: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Per-stream codes, clip-shaped ``(B, T', h, w, C)``."""
    params = _as_params(params)
    inputs = {k: (v if v is None or isinstance(v, Tensor) else Tensor(v)) for k, v in inputs.items()}
    batch = _check_inputs(spec, inputs)
    codes = {}
    for stream, layers in spec.encoders.items():
        x = inputs[stream]
        if spec.rank == 2:
            x = _to_frames(x)
        for layer in layers:
            x = apply_layer(x, params, stream, layer)
        codes[stream] = _to_clips(x, batch) if spec.rank == 2 else x
    return codes


def fuse_bottleneck(spec: NetworkSpec, params, z_gray: Tensor, z_flow: Tensor) -> Tensor:
    """Channel concatenation of the two codes followed by the 1x1 mixing convolution."""
    if z_gray.shape[:-1] != z_flow.shape[:-1]:
        raise ValueError(f"stream codes differ in extent: {z_gray.shape} vs {z_flow.shape}")
    params = _as_params(params)
    z = T.concat([z_gray, z_flow], axis=-1)
    if spec.rank == 2:
        batch = z.shape[0]
        return _to_clips(apply_layer(_to_frames(z), params, "shared", spec.fusion), batch)
    return apply_layer(z, params, "shared", spec.fusion)


def split_decoders(spec: NetworkSpec, shared: Tensor) -> dict[str, Tensor]:
    return {stream: shared for stream in spec.decoders}


def decode(spec: NetworkSpec, params, codes: Mapping[str, Tensor]) -> dict[str, Tensor]:
    params = _as_params(params)
    out = {}
    for stream, layers in spec.decoders.items():
        x = codes[stream]
        batch = x.shape[0]
        if spec.rank == 2:
            x = _to_frames(x)
        for layer in layers:
            x = apply_layer(x, params, stream, layer)
        out[stream] = _to_clips(x, batch) if spec.rank == 2 else x
    return out


def forward_autoencoder(spec: NetworkSpec, params, gray, flow=None) -> dict[str, Tensor]:
    """Reconstructions keyed by stream name, each shaped like its input."""
    if not spec.kind.is_autoencoder:
        raise ValueError(f"{spec.kind.value} is not an autoencoder")
    params = _as_params(params)
    codes = encode(spec, params, {"gray": gray, "flow": flow})
    if spec.fusion is not None:
        codes = split_decoders(spec, fuse_bottleneck(spec, params, codes["gray"], codes["flow"]))
    return decode(spec, params, codes)


def classify(spec: NetworkSpec, params, gray) -> Tensor:
    """Probability of the target behaviour for each clip, shape ``(B,)``."""
    if spec.kind is not ModelKind.SUPERVISED:
        raise ValueError(f"{spec.kind.value} has no classification head")
    params = _as_params(params)
    code = encode(spec, params, {"gray": gray})["gray"]
    x = T.mean(code, axis=(1, 2, 3))
    for layer in spec.head:
        x = apply_layer(x, params, "head", layer)
    return T.reshape(x, (x.shape[0],))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"VAE1"
_KIND_CODES = {kind: i for i, kind in enumerate(ModelKind)}


def save_checkpoint(path, kind, store: ParameterStore) -> Path:
    """Binary checkpoint, little-endian throughout.

    Layout: magic ``VAE1``; u32 kind code; i64 seed; u32 parameter count; then
    per parameter u32 name length, UTF-8 name, u32 rank, rank x u32 dims and
    the float32 values in row-major order.
    """
    kind = ModelKind.parse(kind)
    chunks = [MAGIC, struct.pack("<IqI", _KIND_CODES[kind], store.seed, len(store))]
    for name, value in store.values.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[ModelKind, ParameterStore]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    code, seed, count = struct.unpack_from("<IqI", raw, 4)
    kinds = list(ModelKind)
    if code >= len(kinds):
        raise ValueError(f"{path}: unknown model kind code {code}")
    pos = 4 + struct.calcsize("<IqI")
    values = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = math.prod(dims)
        values[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return kinds[code], ParameterStore(values, seed)
