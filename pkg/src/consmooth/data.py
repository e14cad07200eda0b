"""Desk-scale datasets: seeded 2-D generators and an MNIST IDX reader/writer.

Inputs stay in raw coordinates. Noise is always added in these coordinates;
any standardization belongs inside the model (``DenseNet.input_mean/std``).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    std: np.ndarray
    applied_after_noise: bool = True


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 2
    normalization: Normalization | None = None

    def __post_init__(self):
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels) or len(self.labels) < 1:
            raise DataError("need N >= 1 inputs of shape (N, d) with N labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError("labels outside [0, num_classes)")
        if self.split not in ("train", "test"):
            raise DataError(f"unknown split {self.split!r}")
        if self.normalization is not None and not self.normalization.applied_after_noise:
            raise DataError("normalization must be applied after noise (inside the model)")

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.inputs[:n], self.labels[:n], self.split, self.num_classes, self.normalization)


def gen_two_moons(n: int, noise_std: float = 0.1, seed: int = 0, split: str = "train") -> Dataset:
    """Two interleaving unit half-circles with isotropic Gaussian jitter.

    Class 0 lies on the upper arc (cos t, sin t), class 1 on the lower arc
    (1 - cos t, 0.5 - sin t), t ~ U[0, pi]. Classes differ in size by at most one.
    """
    if n < 2:
        raise DataError("two moons needs n >= 2")
    rng = np.random.default_rng(seed)
    n0 = (n + 1) // 2
    labels = np.zeros(n, dtype=np.int64)
    labels[n0:] = 1
    t = rng.uniform(0.0, np.pi, size=n)
    x = np.where(labels == 0, np.cos(t), 1.0 - np.cos(t))
    y = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
    pts = np.stack([x, y], axis=1)
    if noise_std > 0:
        pts = pts + noise_std * rng.standard_normal(pts.shape)
    order = rng.permutation(n)
    return Dataset(pts[order], labels[order], split, 2)


def gen_gaussian_blobs(n: int, centers, std: float = 1.0, seed: int = 0, split: str = "train") -> Dataset:
    """Isotropic clusters, labels assigned round-robin so classes are balanced."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or len(centers) < 2:
        raise DataError("centers must be a (K, d) array with K >= 2")
    if n < 1:
        raise DataError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(centers)
    pts = centers[labels] + std * rng.standard_normal((n, centers.shape[1]))
    order = rng.permutation(n)
    return Dataset(pts[order], labels[order].astype(np.int64), split, len(centers))


def nearest_center(x, centers) -> np.ndarray:
    """Bayes rule for equal-weight isotropic blobs with a shared std."""
    d = ((np.asarray(x)[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1)
    return d.argmin(axis=1)


# ---------------------------------------------------------------------------
# IDX


def _read_idx(data: bytes, magic: int, what: str):
    if len(data) < 8:
        raise DataError(f"{what}: truncated header")
    got, count = struct.unpack(">II", data[:8])
    if got != magic:
        raise DataError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) < header + size:
        raise DataError(f"{what}: truncated body ({len(data) - header} of {size} bytes)")
    body = np.frombuffer(data, dtype=np.uint8, count=size, offset=header)
    return body.reshape(dims)


def parse_idx_images(data: bytes) -> np.ndarray:
    return _read_idx(data, IDX_IMAGE_MAGIC, "images")


def parse_idx_labels(data: bytes) -> np.ndarray:
    return _read_idx(data, IDX_LABEL_MAGIC, "labels")


def load_mnist_idx(images_path, labels_path, split: str = "test") -> Dataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1] and flattened."""
    with open(images_path, "rb") as f:
        images = parse_idx_images(f.read())
    with open(labels_path, "rb") as f:
        labels = parse_idx_labels(f.read())
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    inputs = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), split, 10)


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    array = np.asarray(array)
    if array.ndim != (magic & 0xFF):
        raise DataError(f"magic 0x{magic:08x} needs a {magic & 0xFF}-d array")
    head = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array, dtype=np.uint8).tobytes()


def write_mnist_idx(dataset: Dataset, images_path, labels_path, side: int = 28):
    """Inverse of :func:`load_mnist_idx` for inputs that are multiples of 1/255."""
    pixels = np.rint(dataset.inputs * 255.0).astype(np.uint8).reshape(len(dataset), side, side)
    with open(images_path, "wb") as f:
        f.write(idx_bytes(pixels, IDX_IMAGE_MAGIC))
    with open(labels_path, "wb") as f:
        f.write(idx_bytes(dataset.labels.astype(np.uint8), IDX_LABEL_MAGIC))
