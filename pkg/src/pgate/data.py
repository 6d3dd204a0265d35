"""IDX-format image/label files and the in-memory dataset they load into.

The IDX layout is the classic big-endian one: a 4-byte magic (0x00000803
for uint8 image tensors, 0x00000801 for uint8 label vectors) followed by
the big-endian int32 dimensions, then the raw bytes. Files ending in .gz
are decompressed transparently.

Pixels map to [0, 1] with 0 -> 0.0 and 255 -> 1.0; images become
(N, 1, H, W) float32, labels int64.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import REAL_DTYPE

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """The file is not a well-formed IDX image/label file."""


def _read_bytes(path: Path) -> bytes:
    if str(path).endswith(".gz"):
        with gzip.open(path, "rb") as f:
            return f.read()
    return Path(path).read_bytes()


def load_idx_images(path) -> np.ndarray:
    """Read a uint8 image tensor file into an (N, H, W) array."""
    raw = _read_bytes(Path(path))
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: truncated header")
    magic, n, h, w = struct.unpack(">iiii", raw[:16])
    if magic != IMAGES_MAGIC:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
    if n < 0 or h < 1 or w < 1:
        raise IdxFormatError(f"{path}: invalid dimensions ({n}, {h}, {w})")
    if len(raw) != 16 + n * h * w:
        raise IdxFormatError(f"{path}: payload is {len(raw) - 16} bytes, expected {n * h * w}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, h, w)


def load_idx_labels(path) -> np.ndarray:
    """Read a uint8 label vector file into an (N,) array."""
    raw = _read_bytes(Path(path))
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    magic, n = struct.unpack(">ii", raw[:8])
    if magic != LABELS_MAGIC:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
    if len(raw) != 8 + n:
        raise IdxFormatError(f"{path}: payload is {len(raw) - 8} bytes, expected {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def save_idx_images(path, images: np.ndarray) -> None:
    """Write an (N, H, W) uint8 array in IDX image layout."""
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError(f"expected (N, H, W) uint8 images, got {images.dtype} {images.shape}")
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IMAGES_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(images).tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    """Write an (N,) uint8 array in IDX label layout."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"expected (N,) labels, got shape {labels.shape}")
    if labels.dtype != np.uint8:
        if labels.min() < 0 or labels.max() > 255:
            raise ValueError("labels out of uint8 range")
        labels = labels.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


@dataclass
class Dataset:
    """Normalized images (N, 1, H, W) in [0, 1] and int64 labels (N,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"expected (N, 1, H, W) images, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.images.shape[0]


def load_dataset(images_path, labels_path) -> Dataset:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = (images.astype(REAL_DTYPE) / REAL_DTYPE(255.0))[:, None, :, :]
    return Dataset(images=np.ascontiguousarray(x), labels=labels.astype(np.int64))


def resize_nearest(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resample of (N, H, W) images (source pixel index
    floor(i * H / height)); used to prepare datasets at a model's native
    input size."""
    if images.ndim != 3:
        raise ValueError(f"expected (N, H, W) images, got shape {images.shape}")
    _, h, w = images.shape
    rows = np.arange(height) * h // height
    cols = np.arange(width) * w // width
    return np.ascontiguousarray(images[:, rows][:, :, cols])


def iter_batches(data: Dataset, batch_size: int, order: np.ndarray | None = None):
    """Yield (images, labels) slices; a permutation can reorder examples."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    idx = np.arange(len(data)) if order is None else np.asarray(order)
    for start in range(0, len(idx), batch_size):
        sel = idx[start:start + batch_size]
        yield np.ascontiguousarray(data.images[sel]), data.labels[sel]
