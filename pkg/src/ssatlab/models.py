"""Declarative small architectures, He initialisation and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, FormatError, UsageError


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, Conv, ReLU, MaxPool, Flatten]
_LAYER_KINDS = {"dense": Dense, "conv": Conv, "relu": ReLU, "maxpool": MaxPool, "flatten": Flatten}


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    def output_shapes(self) -> list[tuple]:
        """Per-layer output shapes (batch axis excluded). Raises on mismatch."""
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            shape = _layer_output_shape(i, layer, shape)
            shapes.append(shape)
        return shapes

    def validate(self) -> None:
        shapes = self.output_shapes()
        final = shapes[-1] if shapes else self.input_shape
        if final != (self.num_classes,):
            raise ConfigurationError(
                f"architecture emits shape {final}, expected ({self.num_classes},) logits "
                f"(layer index {len(self.layers) - 1})"
            )

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            kind = next(k for k, cls in _LAYER_KINDS.items() if isinstance(layer, cls))
            layers.append({"kind": kind, **asdict(layer)})
        return {"name": self.name, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            layers.append(_LAYER_KINDS[entry.pop("kind")](**entry))
        return cls(tuple(layers), tuple(d["input_shape"]), int(d["num_classes"]), d.get("name", "custom"))

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; stored in checkpoints."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def _layer_output_shape(i: int, layer, shape: tuple) -> tuple:
    def fail(msg):
        raise ConfigurationError(f"layer index {i} ({type(layer).__name__}): {msg}")

    if isinstance(layer, Dense):
        if len(shape) != 1:
            fail(f"dense needs a flat input, got shape {shape}")
        if shape[0] != layer.in_features:
            fail(f"expects {layer.in_features} features, previous layer emits {shape[0]}")
        return (layer.out_features,)
    if isinstance(layer, Conv):
        if len(shape) != 3:
            fail(f"conv needs (C, H, W) input, got {shape}")
        c, h, w = shape
        if c != layer.in_channels:
            fail(f"expects {layer.in_channels} channels, previous layer emits {c}")
        ho, wo = h + 2 * layer.padding - layer.kernel + 1, w + 2 * layer.padding - layer.kernel + 1
        if ho < 1 or wo < 1:
            fail(f"kernel {layer.kernel} does not fit spatial size {h}x{w}")
        return (layer.out_channels, ho, wo)
    if isinstance(layer, MaxPool):
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            fail(f"maxpool needs (C, H>=2, W>=2) input, got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, ReLU):
        return shape
    fail(f"unknown layer descriptor {layer!r}")


PRESETS = {
    "mlp-small": ArchitectureSpec(
        (Flatten(), Dense(784, 256), ReLU(), Dense(256, 10)), (1, 28, 28), 10, "mlp-small"),
    "cnn-small": ArchitectureSpec(
        (Conv(1, 16, 3), ReLU(), MaxPool(), Conv(16, 32, 3), ReLU(), MaxPool(),
         Flatten(), Dense(32 * 5 * 5, 10)), (1, 28, 28), 10, "cnn-small"),
    "cnn-cifar": ArchitectureSpec(
        (Conv(3, 16, 3), ReLU(), MaxPool(), Conv(16, 32, 3), ReLU(), MaxPool(),
         Flatten(), Dense(32 * 6 * 6, 10)), (3, 32, 32), 10, "cnn-cifar"),
    # for the 2-d synthetic blobs
    "mlp-blobs": ArchitectureSpec(
        (Flatten(), Dense(2, 32), ReLU(), Dense(32, 4)), (1, 1, 2), 4, "mlp-blobs"),
}


def preset(name: str) -> ArchitectureSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown architecture preset {name!r}; known: {sorted(PRESETS)}") from None


@dataclass
class ParameterSet:
    tensors: dict = field(default_factory=dict)
    seed: int | None = None

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.items()},
                            self.seed)

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.items()}


def build(spec: ArchitectureSpec, seed: int) -> ParameterSet:
    """He fan-in initialised weights, zero biases; deterministic in ``seed``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            shape, fan_in, n_out = (layer.out_features, layer.in_features), layer.in_features, layer.out_features
        elif isinstance(layer, Conv):
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            fan_in, n_out = layer.in_channels * layer.kernel ** 2, layer.out_channels
        else:
            continue
        tensors[f"layer{i}.weight"] = Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in),
                                             requires_grad=True)
        tensors[f"layer{i}.bias"] = Tensor(np.zeros(n_out), requires_grad=True)
    return ParameterSet(tensors, seed)


def forward(params: ParameterSet, spec: ArchitectureSpec, batch) -> Tensor:
    """Logits of shape (batch, classes). Rows are computed independently."""
    x = ad.as_tensor(batch)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise UsageError(f"batch shape {x.shape} does not match input shape {spec.input_shape}")
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            x = ad.dense(x, params[f"layer{i}.weight"], params[f"layer{i}.bias"])
        elif isinstance(layer, Conv):
            x = ad.conv2d(x, params[f"layer{i}.weight"], params[f"layer{i}.bias"], layer.padding)
        elif isinstance(layer, ReLU):
            x = ad.relu(x)
        elif isinstance(layer, MaxPool):
            x = ad.maxpool2d(x)
        elif isinstance(layer, Flatten):
            x = ad.flatten(x)
    return x


# -- checkpoint file ---------------------------------------------------------
# magic, u32 version, 32-byte spec digest, u32 tensor count, then per tensor:
# u32 name length, name, u32 rank, rank x u32 extents, little-endian f64 payload.

MAGIC = b"SSATCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, params: ParameterSet, spec: ArchitectureSpec) -> None:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), spec.digest(),
              struct.pack("<I", len(params.tensors))]
    for name in sorted(params.tensors):
        arr = params[name].data
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, spec: ArchitectureSpec | None = None) -> ParameterSet:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}", path=str(path)) from exc
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated at byte offset {pos}", offset=pos, path=str(path))
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0", offset=0, path=str(path))
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}", offset=8, path=str(path))
    digest = take(32)
    if spec is not None and digest != spec.digest():
        raise FormatError(f"{path}: checkpoint was written for a different architecture",
                          offset=12, path=str(path))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes at offset {pos}", offset=pos, path=str(path))
    return ParameterSet(tensors)
