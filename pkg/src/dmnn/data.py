"""Datasets: CIFAR-100 binary files, a deterministic synthetic blob set, augmentation and batching."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3074
CIFAR_SIZES = {"train": 50000, "test": 10000}


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [n, 3, H, W]
    fine_labels: np.ndarray
    coarse_labels: np.ndarray
    split: str

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_coarse(self) -> int:
        return int(self.coarse_labels.max()) + 1


class DataFormatError(ValueError):
    pass


def parse_cifar100_bin(path, n_records: int | None = None, split: str = "train") -> Dataset:
    """Parse CIFAR-100 binary records: coarse byte, fine byte, 3072 channel-planar pixels."""
    raw = np.fromfile(path, dtype=np.uint8)
    if n_records is not None and raw.size != n_records * CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: expected {n_records * CIFAR_RECORD} bytes ({n_records} records), got {raw.size}")
    if raw.size % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    return Dataset(rec[:, 2:].reshape(-1, 3, 32, 32).copy(), rec[:, 1].astype(np.int64),
                   rec[:, 0].astype(np.int64), split)


def serialize_record(ds: Dataset, i: int) -> bytes:
    head = np.array([ds.coarse_labels[i], ds.fine_labels[i]], dtype=np.uint8)
    return head.tobytes() + ds.images[i].astype(np.uint8).tobytes()


def load_cifar100(directory) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    return (parse_cifar100_bin(d / "train.bin", CIFAR_SIZES["train"], "train"),
            parse_cifar100_bin(d / "test.bin", CIFAR_SIZES["test"], "test"))


def synth_dataset(seed: int, classes: int = 10, n_per_class: int = 100, size: int = 16,
                  split: str = "train") -> Dataset:
    """Class-conditional Gaussian blobs on a grey background with pixel noise sigma 0.1.

    Class k places a blob at angle 2*pi*k/classes around the image centre and
    colours it by the same angle. Coarse label equals fine label.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.repeat(np.arange(classes), n_per_class)
    rng.shuffle(labels)
    theta = 2 * np.pi * labels / classes
    cy = size / 2 + 0.28 * size * np.sin(theta) + rng.normal(0, 0.5, labels.size)
    cx = size / 2 + 0.28 * size * np.cos(theta) + rng.normal(0, 0.5, labels.size)
    width = size / 6
    blob = np.exp(-((yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2) / (2 * width ** 2))
    phases = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    color = 0.5 + 0.5 * np.cos(theta[:, None] + phases[None, :])
    img = 0.5 + (color[:, :, None, None] - 0.5) * blob[:, None]
    img = img + rng.normal(0, 0.1, img.shape)
    images = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), labels.astype(np.int64).copy(), split)


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    x = ds.images.astype(np.float64) / 255.0
    return (x.mean(axis=(0, 2, 3)).astype(np.float32), x.std(axis=(0, 2, 3)).astype(np.float32))


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, random crop back to the original size, random horizontal flip."""
    b, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, b)
    ox = rng.integers(0, 2 * pad + 1, b)
    flip = rng.random(b) < 0.5
    out = np.empty_like(images)
    for i in range(b):
        crop = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    return augment_batch(image[None], rng, pad)[0]


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def iterate_batches(ds: Dataset, batch_size: int, seed: int, epoch: int, drop_last: bool = True):
    order = batch_order(len(ds), seed, epoch)
    stop = len(order) - (len(order) % batch_size if drop_last else 0)
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.fine_labels[idx], ds.coarse_labels[idx]
