"""Datasets: synthetic two-moons / blobs, IDX image files, augmentation."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .ndarray import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "all"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) < 1:
            raise ValueError("dataset must contain at least one example")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, split or self.split)

    def shuffled(self, rng: Rng) -> "Dataset":
        return self.subset(rng.permutation(len(self)))

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield self.inputs[start:start + batch_size], self.labels[start:start + batch_size]


def two_moons(n: int, noise_std: float = 0.1, seed: int = 0) -> Dataset:
    """Interleaved half circles; class 0 on (cos t, sin t), class 1 on (1 - cos t, 0.5 - sin t)."""
    if n < 2:
        raise ValueError("two_moons needs n >= 2")
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    x = np.concatenate([np.stack([np.cos(t0), np.sin(t0)], axis=1),
                        np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    rng = Rng(seed)
    if noise_std > 0:
        x = x + rng.gaussian(x.shape, 0.0, noise_std)
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], 2)


def gaussian_blobs(n: int, centers, std: float = 0.3, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters, one class per centre, balanced to within one."""
    centers = np.asarray(centers, dtype=np.float64)
    k = len(centers)
    if n < k:
        raise ValueError("need at least one point per centre")
    y = np.arange(n) % k
    rng = Rng(seed)
    x = centers[y] + rng.gaussian((n, centers.shape[1]), 0.0, std)
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], k)


def train_test_split(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    perm = Rng(seed).permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    return ds.subset(perm[n_test:], "train"), ds.subset(perm[:n_test], "test")


# ---------------------------------------------------------------------------
# IDX


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxMismatchError(IdxError):
    pass


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise IdxTruncatedError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def idx_load(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load unsigned-byte IDX images/labels (optionally gzip) as (m, 1, rows, cols) in [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise IdxMismatchError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes, "all")


def idx_bytes(array: np.ndarray) -> bytes:
    """Serialise a uint8 array (1-D labels or 3-D images) as IDX."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()


# ---------------------------------------------------------------------------
# augmentation


def augment(x: np.ndarray, rng: Rng, pad: int = 4, hflip_p: float = 0.5, offsets=None) -> np.ndarray:
    """Zero-pad, random-crop back to size and random horizontal flip.

    ``offsets`` forces the crop origin (row, col) for every image.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"augment expects (batch, channels, H, W) images, got shape {x.shape}")
    b, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    for i in range(b):
        if offsets is None:
            r, c = rng.integers(0, 2 * pad + 1, size=2)
        else:
            r, c = offsets
        img = padded[i, :, r:r + h, c:c + w]
        if hflip_p > 0 and rng.random() < hflip_p:
            img = img[:, :, ::-1]
        out[i] = img
    return out


def hflip(x: np.ndarray) -> np.ndarray:
    return np.asarray(x)[..., ::-1].copy()
