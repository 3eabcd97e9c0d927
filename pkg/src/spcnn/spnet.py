"""Multi-stream spatial-pyramid network.

One convolutional tower per pyramid region; the towers' final feature maps
are flattened, concatenated, and fed to fc6 -> fc7 -> fc8.
"""

from __future__ import annotations

import configparser
import io
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import nnkernels as nn
from .errors import (
    CheckpointIOError,
    CheckpointVersionError,
    ConfigurationError,
    CorruptCheckpointError,
    StateError,
)
from .pyramid import region_count, region_windows


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0

    def to_text(self):
        return f"conv {self.out_channels} {self.kernel} {self.stride} {self.pad}"


@dataclass(frozen=True)
class Relu:
    def to_text(self):
        return "relu"


@dataclass(frozen=True)
class Pool:
    kernel: int
    stride: int

    def to_text(self):
        return f"pool {self.kernel} {self.stride}"


Layer = Union[Conv, Relu, Pool]

ALEXNET_LAYERS = (
    Conv(96, 11, 4, 0), Relu(), Pool(3, 2),
    Conv(256, 5, 1, 2), Relu(), Pool(3, 2),
    Conv(384, 3, 1, 1), Relu(),
    Conv(384, 3, 1, 1), Relu(),
    Conv(256, 3, 1, 1), Relu(), Pool(3, 2),
)

DESK_LAYERS = (
    Conv(16, 5, 2, 0), Relu(), Pool(3, 2),
    Conv(32, 3, 1, 1), Relu(), Pool(3, 2),
    Conv(32, 3, 1, 1), Relu(), Pool(3, 2),
)

STREAM_PROFILES = {"alexnet": ALEXNET_LAYERS, "desk": DESK_LAYERS}


def parse_layers(text: str) -> tuple:
    layers = []
    for item in text.split(","):
        parts = item.split()
        if not parts:
            continue
        kind, args = parts[0], parts[1:]
        try:
            if kind == "conv" and len(args) in (2, 3, 4):
                layers.append(Conv(*map(int, args)))
            elif kind == "pool" and len(args) == 2:
                layers.append(Pool(*map(int, args)))
            elif kind == "relu" and not args:
                layers.append(Relu())
            else:
                raise ValueError
        except ValueError:
            raise ConfigurationError(f"cannot parse layer descriptor {item.strip()!r}") from None
    return tuple(layers)


def layers_to_text(layers) -> str:
    return ", ".join(layer.to_text() for layer in layers)


def layer_names(layers) -> list[str]:
    """AlexNet-style names: relu and pool take the number of the conv before them."""
    stage, names, seen = 0, [], set()
    for layer in layers:
        kind = type(layer).__name__.lower()
        if kind == "conv":
            stage += 1
        name = f"{kind}{stage}"
        suffix = 1
        while name in seen:
            suffix += 1
            name = f"{kind}{stage}_{suffix}"
        seen.add(name)
        names.append(name)
    return names


@dataclass(frozen=True)
class StreamSpec:
    input_size: int
    layers: tuple
    in_channels: int = 3


@dataclass(frozen=True)
class LayerShape:
    name: str
    kind: str
    shape: tuple  # (C, H, W) after the layer


def infer_shapes(stream: StreamSpec) -> tuple[list[LayerShape], int]:
    """Per-layer output shapes and the flattened width of the final map."""
    c, h, w = stream.in_channels, stream.input_size, stream.input_size
    table = []
    for name, layer in zip(layer_names(stream.layers), stream.layers):
        if isinstance(layer, Conv):
            if layer.kernel < 1 or layer.stride < 1 or layer.pad < 0:
                raise ConfigurationError(f"{name}: invalid conv geometry {layer.to_text()}")
            h = nn.conv_output_size(h, layer.kernel, layer.stride, layer.pad)
            w = nn.conv_output_size(w, layer.kernel, layer.stride, layer.pad)
            c = layer.out_channels
        elif isinstance(layer, Pool):
            if layer.kernel > h or layer.kernel > w:
                raise ConfigurationError(
                    f"{name}: pool kernel {layer.kernel} exceeds input {h}x{w}"
                )
            h = nn.pool_output_size(h, layer.kernel, layer.stride)
            w = nn.pool_output_size(w, layer.kernel, layer.stride)
        if h < 1 or w < 1:
            raise ConfigurationError(
                f"{name}: output collapses below 1x1 (input size {stream.input_size})"
            )
        table.append(LayerShape(name, type(layer).__name__.lower(), (c, h, w)))
    return table, c * h * w


_NETWORK_KEYS = {
    "pyramid_levels", "canonical_size", "layers", "stream_profile", "fc6", "fc7",
    "class_count", "dropout_rate", "share_quadrant_weights", "in_channels", "input_scale",
}


@dataclass(frozen=True)
class NetworkSpec:
    pyramid_levels: int = 2
    canonical_size: int = 256
    layers: tuple = ALEXNET_LAYERS
    fc6: int = 4096
    fc7: int = 4096
    class_count: int = 8
    dropout_rate: float = 0.5
    share_quadrant_weights: bool = False
    in_channels: int = 3
    # multiplies mean-centred pixel values before the first conv
    input_scale: float = 1.0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ConfigurationError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.class_count < 2:
            raise ConfigurationError(f"class_count must be >= 2, got {self.class_count}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.input_scale > 0:
            raise ConfigurationError(f"input_scale must be > 0, got {self.input_scale}")
        if self.fc6 < 1 or self.fc7 < 1:
            raise ConfigurationError("fc widths must be >= 1")
        # raises on indivisible canonical size
        region_windows(self.canonical_size, self.canonical_size, self.pyramid_levels)

    @property
    def streams(self) -> list[StreamSpec]:
        return [
            StreamSpec(self.canonical_size >> level, self.layers, self.in_channels)
            for level, *_ in region_windows(
                self.canonical_size, self.canonical_size, self.pyramid_levels)
        ]

    @property
    def stream_count(self) -> int:
        return region_count(self.pyramid_levels)

    def to_text(self) -> str:
        """Canonical ``[network]`` section, also accepted in config files."""
        return (
            "[network]\n"
            f"pyramid_levels = {self.pyramid_levels}\n"
            f"canonical_size = {self.canonical_size}\n"
            f"in_channels = {self.in_channels}\n"
            f"layers = {layers_to_text(self.layers)}\n"
            f"fc6 = {self.fc6}\n"
            f"fc7 = {self.fc7}\n"
            f"class_count = {self.class_count}\n"
            f"dropout_rate = {self.dropout_rate!r}\n"
            f"share_quadrant_weights = {str(self.share_quadrant_weights).lower()}\n"
            f"input_scale = {self.input_scale!r}\n"
        )

    @classmethod
    def from_section(cls, section: dict, base: Optional["NetworkSpec"] = None) -> "NetworkSpec":
        unknown = set(section) - _NETWORK_KEYS
        if unknown:
            raise ConfigurationError(f"unknown [network] keys: {', '.join(sorted(unknown))}")
        kw = {}
        try:
            for key in ("pyramid_levels", "canonical_size", "fc6", "fc7",
                        "class_count", "in_channels"):
                if key in section:
                    kw[key] = int(section[key])
            for key in ("dropout_rate", "input_scale"):
                if key in section:
                    kw[key] = float(section[key])
            if "share_quadrant_weights" in section:
                kw["share_quadrant_weights"] = _parse_bool(section["share_quadrant_weights"])
        except ValueError as exc:
            raise ConfigurationError(f"[network]: {exc}") from None
        if "stream_profile" in section:
            name = section["stream_profile"].strip()
            if name not in STREAM_PROFILES:
                raise ConfigurationError(f"unknown stream_profile {name!r}")
            kw["layers"] = STREAM_PROFILES[name]
        if "layers" in section:
            kw["layers"] = parse_layers(section["layers"])
        return replace(base, **kw) if base is not None else cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"network spec text: {exc}") from None
        if not parser.has_section("network"):
            raise ConfigurationError("network spec text lacks a [network] section")
        return cls.from_section(dict(parser["network"]))


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def paper_spec(class_count: int = 8, **overrides) -> NetworkSpec:
    return NetworkSpec(class_count=class_count, **overrides)


def desk_spec(class_count: int = 8, **overrides) -> NetworkSpec:
    kw = dict(canonical_size=64, layers=DESK_LAYERS, fc6=128, fc7=128, input_scale=1 / 64)
    kw.update(overrides)
    return NetworkSpec(class_count=class_count, **kw)


def concat_width(spec: Union[NetworkSpec, Sequence[StreamSpec]]) -> int:
    streams = spec.streams if isinstance(spec, NetworkSpec) else spec
    return sum(infer_shapes(s)[1] for s in streams)


def concat_forward(stream_outputs: Sequence[np.ndarray]) -> np.ndarray:
    n = stream_outputs[0].shape[0]
    for i, t in enumerate(stream_outputs):
        if t.shape[0] != n:
            raise ConfigurationError(f"stream {i}: batch {t.shape[0]} != {n}")
    return np.concatenate([t.reshape(n, -1) for t in stream_outputs], axis=1)


def concat_backward(grad: np.ndarray, shapes: Sequence[tuple]) -> list[np.ndarray]:
    """Split ``grad`` (N, D) back into per-stream tensors of ``shapes`` (C, H, W)."""
    widths = [int(np.prod(s)) for s in shapes]
    if grad.ndim != 2 or grad.shape[1] != sum(widths):
        raise ConfigurationError(
            f"concat grad width {grad.shape[1:]} != concat width {sum(widths)}"
        )
    n = grad.shape[0]
    bounds = np.cumsum([0] + widths)
    return [
        np.ascontiguousarray(grad[:, a:b]).reshape((n,) + tuple(s))
        for a, b, s in zip(bounds[:-1], bounds[1:], shapes)
    ]


# -- parameters -------------------------------------------------------------

def stream_prefix(spec: NetworkSpec, index: int) -> str:
    if spec.share_quadrant_weights and index > 0:
        return "sq"
    return f"s{index}"


def param_shapes(spec: NetworkSpec) -> dict[str, tuple]:
    shapes = {}
    for i, stream in enumerate(spec.streams):
        prefix = stream_prefix(spec, i)
        c = stream.in_channels
        for name, layer in zip(layer_names(stream.layers), stream.layers):
            if isinstance(layer, Conv):
                shapes[f"{prefix}.{name}.w"] = (layer.out_channels, c, layer.kernel, layer.kernel)
                shapes[f"{prefix}.{name}.b"] = (layer.out_channels,)
                c = layer.out_channels
    dims = [concat_width(spec), spec.fc6, spec.fc7, spec.class_count]
    for name, d_in, d_out in zip(("fc6", "fc7", "fc8"), dims[:-1], dims[1:]):
        shapes[f"{name}.w"] = (d_in, d_out)
        shapes[f"{name}.b"] = (d_out,)
    return shapes


def param_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


def matched_baseline(spec: NetworkSpec) -> NetworkSpec:
    """Single-stream (``pyramid_levels=1``) spec with the same parameter budget.

    The streams removed by dropping the pyramid are paid back by widening
    fc6 and fc7 equally; the width whose total is closest to ``spec``'s wins.
    """
    target = param_count(spec)
    base = replace(spec, pyramid_levels=1, share_quadrant_weights=False)
    d, k = concat_width(base), spec.class_count
    fixed = param_count(base) - _fc_params(d, spec.fc6, spec.fc7, k)
    # fixed + d*w + w + w*w + w + w*k + k = target
    a, b, c = 1.0, d + 2 + k, fixed + k - target
    root = (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)
    best = min((w for w in (math.floor(root), math.ceil(root)) if w >= 1),
               key=lambda w: abs(fixed + _fc_params(d, w, w, k) - target))
    return replace(base, fc6=best, fc7=best)


def _fc_params(d, fc6, fc7, k):
    return d * fc6 + fc6 + fc6 * fc7 + fc7 + fc7 * k + k


@dataclass
class NetworkState:
    params: dict
    seed: int = 0
    # bumped on every in-place update so stale forward caches are detectable
    version: int = 0

    def copy(self) -> "NetworkState":
        return NetworkState({k: v.copy() for k, v in self.params.items()}, self.seed, self.version)

    def astype(self, dtype) -> "NetworkState":
        return NetworkState(
            {k: v.astype(dtype) for k, v in self.params.items()}, self.seed, self.version)


def init_params(spec: NetworkSpec, seed: int, scheme: str = "he") -> NetworkState:
    """He-scaled Gaussian weights (std = sqrt(2 / fan_in)) and zero biases."""
    if scheme != "he":
        raise ConfigurationError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            std = np.float32(np.sqrt(2.0 / fan_in))
            params[name] = rng.standard_normal(shape, dtype=np.float32) * std
    return NetworkState(params, seed)


# -- forward / backward -------------------------------------------------------

@dataclass
class ForwardCache:
    state_id: int
    state_version: int
    batch: int
    towers: list            # per stream: list of (layer, name, saved)
    tower_shapes: list      # per stream: final (C, H, W)
    fc_inputs: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)


def _tower_forward(x, layers, params, prefix):
    saved = []
    for name, layer in zip(layer_names(layers), layers):
        if isinstance(layer, Conv):
            p = nn.ConvParams.from_arrays(
                params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"],
                layer.stride, layer.pad)
            saved.append((name, x, p))
            x = nn.conv2d_forward(x, p)
        elif isinstance(layer, Relu):
            saved.append((name, x, None))
            x = nn.relu_forward(x)
        else:
            p = nn.PoolParams(layer.kernel, layer.stride)
            x = nn.maxpool_forward(x, p)
            saved.append((name, None, p))
    return x, saved


def _tower_backward(grad, saved, grads, prefix):
    for i, (name, x, p) in enumerate(reversed(saved)):
        first = i == len(saved) - 1
        if isinstance(p, nn.ConvParams):
            gx, gw, gb = nn.conv2d_backward(x, p, grad, need_input_grad=not first)
            _accumulate(grads, f"{prefix}.{name}.w", gw)
            _accumulate(grads, f"{prefix}.{name}.b", gb)
            grad = gx
        elif isinstance(p, nn.PoolParams):
            grad = nn.maxpool_backward(p, grad)
        else:
            grad = nn.relu_backward(x, grad)
        if grad is None:
            break


def _accumulate(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def forward(state: NetworkState, spec: NetworkSpec, region_batches: Sequence[np.ndarray],
            training: bool = False, rng: Optional[np.random.Generator] = None):
    """Logits ``(N, K)`` and the cache needed by :func:`backward`."""
    streams = spec.streams
    if len(region_batches) != len(streams):
        raise ConfigurationError(
            f"expected {len(streams)} region batches, got {len(region_batches)}")
    n = region_batches[0].shape[0]
    params = state.params
    outputs, towers, shapes = [], [], []
    for i, (x, stream) in enumerate(zip(region_batches, streams)):
        want = (n, stream.in_channels, stream.input_size, stream.input_size)
        if tuple(x.shape) != want:
            raise ConfigurationError(f"stream {i}: input shape {tuple(x.shape)} != {want}")
        out, saved = _tower_forward(x, stream.layers, params, stream_prefix(spec, i))
        outputs.append(out)
        towers.append(saved)
        shapes.append(out.shape[1:])
    cache = ForwardCache(id(state), state.version, n, towers, shapes)
    if training and spec.dropout_rate > 0 and rng is None:
        raise ConfigurationError("training-mode forward with dropout needs an rng")
    h = concat_forward(outputs)
    for layer in ("fc6", "fc7"):
        cache.fc_inputs[layer] = h
        z = nn.linear_forward(h, params[f"{layer}.w"], params[f"{layer}.b"])
        cache.fc_inputs[layer + ".relu"] = z
        h, cache.masks[layer] = nn.dropout(nn.relu_forward(z), spec.dropout_rate, rng, training)
    cache.fc_inputs["fc8"] = h
    logits = nn.linear_forward(h, params["fc8.w"], params["fc8.b"])
    return logits, cache


def backward(state: NetworkState, spec: NetworkSpec, cache: ForwardCache,
             grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every entry of ``state.params``."""
    if cache.state_id != id(state) or cache.state_version != state.version:
        raise StateError("forward cache is stale: network state changed since forward")
    if grad_logits.shape != (cache.batch, spec.class_count):
        raise StateError(
            f"grad_logits shape {grad_logits.shape} does not match cached batch "
            f"({cache.batch}, {spec.class_count})")
    params = state.params
    grads = {}
    gx, grads["fc8.w"], grads["fc8.b"] = nn.linear_backward(
        cache.fc_inputs["fc8"], params["fc8.w"], grad_logits)
    for layer in ("fc7", "fc6"):
        g = nn.dropout_backward(cache.masks[layer], gx)
        g = nn.relu_backward(cache.fc_inputs[layer + ".relu"], g)
        gx, grads[f"{layer}.w"], grads[f"{layer}.b"] = nn.linear_backward(
            cache.fc_inputs[layer], params[f"{layer}.w"], g)
    for i, g in enumerate(concat_backward(gx, cache.tower_shapes)):
        _tower_backward(g, cache.towers[i], grads, stream_prefix(spec, i))
    return {name: grads[name] for name in params}


def predict_proba(state, spec, region_batches) -> np.ndarray:
    logits, _ = forward(state, spec, region_batches, training=False)
    return nn.softmax(logits.astype(np.float64))


# -- checkpoints --------------------------------------------------------------

MAGIC = b"SPCN"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    spec: NetworkSpec
    state: NetworkState
    velocity: dict = field(default_factory=dict)
    iteration: int = 0
    mean_image: Optional[np.ndarray] = None
    class_names: tuple = ()


def _pack_tensors(tensors: dict) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        out.write(struct.pack("<I", len(raw)) + raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptCheckpointError(
                f"truncated checkpoint: need {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_tensors(payload: bytes) -> dict:
    r = _Reader(payload)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return tensors


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    sections = [
        (b"spec", ckpt.spec.to_text().encode()),
        (b"classes", "\n".join(ckpt.class_names).encode()),
        (b"meta", struct.pack("<QQQ", ckpt.iteration, ckpt.state.seed, ckpt.state.version)),
        (b"params", _pack_tensors(ckpt.state.params)),
        (b"velocity", _pack_tensors(ckpt.velocity)),
        (b"mean", _pack_tensors({} if ckpt.mean_image is None else {"mean": ckpt.mean_image})),
    ]
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", FORMAT_VERSION))
    for tag, payload in sections:
        out.write(struct.pack("<I", len(tag)) + tag)
        out.write(struct.pack("<Q", len(payload)) + payload)
    return out.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = checkpoint_bytes(ckpt)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise CheckpointIOError(f"cannot write checkpoint {path}: {exc}") from exc


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) < 8 or data[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint: bad magic")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    sections = {}
    while r.pos < len(data):
        (tlen,) = r.unpack("<I")
        tag = r.take(tlen).decode(errors="replace")
        (plen,) = r.unpack("<Q")
        sections[tag] = r.take(plen)
    missing = {"spec", "classes", "meta", "params", "velocity", "mean"} - set(sections)
    if missing:
        raise CorruptCheckpointError(f"checkpoint missing sections: {sorted(missing)}")
    try:
        spec = NetworkSpec.from_text(sections["spec"].decode())
    except (ConfigurationError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"checkpoint spec section unreadable: {exc}") from None
    iteration, seed, sversion = _Reader(sections["meta"]).unpack("<QQQ")
    params = _unpack_tensors(sections["params"])
    expected = param_shapes(spec)
    if {k: v.shape for k, v in params.items()} != expected:
        raise CorruptCheckpointError("checkpoint tensors do not match its network spec")
    classes = sections["classes"].decode()
    mean = _unpack_tensors(sections["mean"]).get("mean")
    return Checkpoint(
        spec=spec,
        state=NetworkState(params, seed, sversion),
        velocity=_unpack_tensors(sections["velocity"]),
        iteration=iteration,
        mean_image=mean,
        class_names=tuple(classes.split("\n")) if classes else (),
    )


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(data)
