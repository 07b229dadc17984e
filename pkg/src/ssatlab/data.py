"""Dataset loading (IDX, CIFAR-10 binary), synthetic data, augmentation, batching.

Pixels are only ever scaled by 1/255. There is deliberately no per-channel
mean/std normalisation, so the epsilon ball and the [0, 1] image box live in
the same coordinates.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigurationError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) == 0:
            raise ConfigurationError("dataset is empty")
        if len(self.labels) != len(self.images):
            raise ConfigurationError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ConfigurationError("pixels must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigurationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, indices, name: str | None = None) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], name or self.name, self.num_classes)


def _read(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}", path=str(path)) from exc
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(blob: bytes, magic: int, path) -> np.ndarray:
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header at byte offset {len(blob)}", offset=len(blob), path=str(path))
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic {found:#010x} at byte offset 0, expected {magic:#010x}",
                          offset=0, path=str(path))
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated dimension list at byte offset {len(blob)}",
                          offset=len(blob), path=str(path))
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    expected = header + int(np.prod(dims))
    if len(blob) != expected:
        raise FormatError(f"{path}: payload length mismatch at byte offset {min(len(blob), expected)} "
                          f"(file has {len(blob)} bytes, header implies {expected})",
                          offset=min(len(blob), expected), path=str(path))
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str = "mnist", num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzip-compressed)."""
    images = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{labels_path}: count mismatch at byte offset 4: "
                          f"{len(images)} images vs {len(labels)} labels", offset=4, path=str(labels_path))
    return Dataset(images[:, None, :, :] / 255.0, labels, name, num_classes)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels: Sequence[int]) -> None:
    """Write uint8 images (N, H, W) and labels in IDX format (gzip if path ends in .gz)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images_u8.shape) + images_u8.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()
    for path, blob in ((images_path, img), (labels_path, lab)):
        path = Path(path)
        path.write_bytes(gzip.compress(blob, mtime=0) if path.suffix == ".gz" else blob)


def load_cifar_binary(paths, name: str = "cifar10", num_classes: int = 10) -> Dataset:
    """Concatenate CIFAR-10 binary batch files of 3073-byte records."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        blob = _read(path)
        if len(blob) == 0 or len(blob) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(blob)} is not a multiple of {CIFAR_RECORD} "
                              f"(partial record at byte offset {len(blob) - len(blob) % CIFAR_RECORD})",
                              offset=len(blob) - len(blob) % CIFAR_RECORD, path=str(path))
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0])
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(np.concatenate(images) / 255.0, np.concatenate(labels), name, num_classes)


def synthetic_gaussians(classes: int, per_class: int, dims: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs with means evenly spaced on a unit circle.

    Coordinates are then mapped affinely into [0, 1] using the global min and
    max, so images have shape (N, 1, 1, dims).
    """
    if classes < 2:
        raise ConfigurationError("synthetic_gaussians needs at least 2 classes")
    if spread <= 0:
        raise ConfigurationError(f"spread must be positive, got {spread}")
    if dims < 1 or per_class < 1:
        raise ConfigurationError("dims and per_class must be positive")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dims))
    means[:, 0] = np.cos(angles)
    if dims > 1:
        means[:, 1] = np.sin(angles)
    labels = np.repeat(np.arange(classes), per_class)
    points = means[labels] + spread * rng.standard_normal((len(labels), dims))
    lo, hi = points.min(), points.max()
    points = (points - lo) / (hi - lo)
    return Dataset(np.clip(points, 0.0, 1.0)[:, None, None, :], labels, "gaussians", classes)


def export_csv(dataset: Dataset, path) -> None:
    flat = dataset.images.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"x{i}" for i in range(flat.shape[1])])
        for label, row in zip(dataset.labels, flat):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1]


def augment(images: np.ndarray, seed: int, epoch: int = 0, indices=None,
            pad: int = 4, enabled: bool = True) -> np.ndarray:
    """Zero-pad, random crop back to size, and horizontal flip with p = 0.5.

    The draw for each sample depends only on (seed, epoch, sample index).
    """
    if not enabled:
        return images
    n, c, h, w = images.shape
    if indices is None:
        indices = np.arange(n)
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for row, idx in enumerate(indices):
        rng = np.random.default_rng([seed, epoch, int(idx)])
        top, left = rng.integers(0, 2 * pad + 1, size=2)
        crop = padded[row, :, top:top + h, left:left + w]
        out[row] = hflip(crop) if rng.random() < 0.5 else crop
    return out


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 128
    seed: int = 0
    epoch: int = 0

    def order(self, n: int) -> np.ndarray:
        return np.random.default_rng([self.seed, self.epoch]).permutation(n)


def batches(dataset: Dataset, plan: BatchPlan) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (images, labels, sample indices); the final batch may be short."""
    if plan.batch_size < 1:
        raise ConfigurationError("batch size must be positive")
    order = plan.order(len(dataset))
    for start in range(0, len(order), plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield dataset.images[idx], dataset.labels[idx], idx


def stratified_split(dataset: Dataset, per_class_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Deterministic class-balanced train/test split."""
    rng = np.random.default_rng(seed)
    test = []
    for cls in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == cls)
        test.extend(rng.choice(members, size=min(per_class_test, len(members)), replace=False))
    test = np.sort(np.asarray(test))
    train = np.setdiff1d(np.arange(len(dataset)), test)
    return dataset.subset(train, dataset.name + "-train"), dataset.subset(test, dataset.name + "-test")
