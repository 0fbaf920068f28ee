"""Datasets: synthetic generators and the CIFAR-10 binary-version reader.

CIFAR-10 binary record layout: 1 label byte followed by 3072 pixel bytes
(1024 red, then 1024 green, then 1024 blue, each plane row-major 32x32).
Each training batch file holds 10,000 records (30,730,000 bytes).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from nce.errors import ConfigError, FormatError, InputError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_BATCH_RECORDS = 10_000
CIFAR_BATCH_BYTES = CIFAR_RECORD * CIFAR_BATCH_RECORDS
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
# per-channel statistics of the CIFAR-10 training set (pixel values scaled to [0, 1])
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    @property
    def image_shape(self):
        return self.x_train.shape[1:]

    def __len__(self):
        return len(self.x_train)


@dataclass
class DatasetSpec:
    kind: str = "synthetic-images"
    classes: int = 10
    train_samples: int = 2000
    test_samples: int = 1000
    image_size: int = 16
    channels: int = 3
    noise: float = 2.0
    dims: int = 16
    margin: float = 4.0
    path: Optional[str] = None

    KINDS = ("synthetic-clusters", "synthetic-images", "cifar10-binary")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"dataset.kind must be one of {self.KINDS}, got {self.kind!r}")
        if self.classes < 2:
            raise ConfigError("dataset.classes must be >= 2")
        if self.kind == "cifar10-binary" and not self.path:
            raise ConfigError("dataset.path is required for cifar10-binary")


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    return labels


def synthetic_clusters(classes: int, n: int, dims: int, margin: float, rng: np.random.Generator,
                       centers: Optional[np.ndarray] = None):
    """Gaussian blobs with unit noise whose centers sit ``margin`` apart on average.

    Returned as [n, dims, 1, 1] so the same convolutional code path applies.
    """
    if centers is None:
        centers = rng.normal(size=(classes, dims))
        centers *= margin / np.linalg.norm(centers, axis=1, keepdims=True)
    y = _balanced_labels(n, classes, rng)
    x = centers[y] + rng.normal(size=(n, dims))
    return x.astype(np.float32)[:, :, None, None], y.astype(np.int64), centers


def synthetic_images(classes: int, n: int, size: int, noise: float, rng: np.random.Generator,
                     channels: int = 3):
    """Oriented sinusoidal gratings; the class is the orientation.

    Frequency, phase, per-channel gain and additive Gaussian noise vary per
    sample, so a classifier has to pick up orientation through local filters.
    """
    y = _balanced_labels(n, classes, rng)
    theta = np.pi * y / classes + rng.normal(0.0, 0.15 * np.pi / classes, n)
    freq = rng.uniform(0.12, 0.3, n)  # cycles per pixel
    phase = rng.uniform(0, 2 * np.pi, n)
    gain = rng.uniform(0.5, 1.5, (n, channels))
    coords = np.arange(size) - (size - 1) / 2
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
    pattern = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    x = gain[:, :, None, None] * pattern[:, None] + noise * rng.normal(size=(n, channels, size, size))
    return x.astype(np.float32), y.astype(np.int64)


def generate_synthetic(spec: DatasetSpec, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    if spec.kind == "synthetic-clusters":
        xtr, ytr, centers = synthetic_clusters(spec.classes, spec.train_samples, spec.dims, spec.margin, rng)
        xte, yte, _ = synthetic_clusters(spec.classes, spec.test_samples, spec.dims, spec.margin, rng, centers)
    elif spec.kind == "synthetic-images":
        xtr, ytr = synthetic_images(spec.classes, spec.train_samples, spec.image_size, spec.noise, rng,
                                    spec.channels)
        xte, yte = synthetic_images(spec.classes, spec.test_samples, spec.image_size, spec.noise, rng,
                                    spec.channels)
    else:
        raise ConfigError(f"{spec.kind!r} is not a synthetic dataset kind")
    return Dataset(xtr, ytr, xte, yte, spec.classes)


def read_cifar10_batch(path) -> tuple:
    """Raw (uint8 [N,3,32,32] images, int64 labels) from one binary batch file."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing CIFAR-10 file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != CIFAR_BATCH_BYTES:
        raise FormatError(f"{path.name}: expected {CIFAR_BATCH_BYTES} bytes, got {raw.size}")
    records = raw.reshape(CIFAR_BATCH_RECORDS, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path.name}: label byte {labels.max()} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def normalize_cifar(images: np.ndarray) -> np.ndarray:
    x = images.astype(np.float32) / 255.0
    return (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]


def load_cifar10_binary(directory, train_samples: Optional[int] = None,
                        test_samples: Optional[int] = None) -> Dataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"CIFAR-10 directory not found: {directory}")
    parts = [read_cifar10_batch(directory / name) for name in CIFAR_TRAIN_FILES]
    xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    xte, yte = read_cifar10_batch(directory / CIFAR_TEST_FILE)
    if train_samples:
        xtr, ytr = xtr[:train_samples], ytr[:train_samples]
    if test_samples:
        xte, yte = xte[:test_samples], yte[:test_samples]
    return Dataset(normalize_cifar(xtr), ytr, normalize_cifar(xte), yte, 10)


def load_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    if spec.kind == "cifar10-binary":
        return load_cifar10_binary(spec.path, spec.train_samples, spec.test_samples)
    return generate_synthetic(spec, seed)
