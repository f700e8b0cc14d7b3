"""Dataset ingestion: IDX-format MNIST files and synthetic Gaussian clusters."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .numkit import rng_stream
from .stream import Dataset

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
GZIP_MAGIC = b"\x1f\x8b"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}


def _read_all(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == GZIP_MAGIC:
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def _take(blob: bytes, offset: int, count: int, path) -> bytes:
    if offset + count > len(blob):
        raise FormatError(f"{path}: truncated at offset {offset} (need {count} bytes)")
    return blob[offset : offset + count]


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX image/label files (optionally gzipped).

    Pixels are scaled to [0, 1] and 28x28 images flattened to 784 features.
    """
    img_blob = _read_all(images_path)
    magic, n, rows, cols = struct.unpack(">iiii", _take(img_blob, 0, 16, images_path))
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{images_path}: image magic {magic} != {IDX_IMAGE_MAGIC} at offset 0")
    pixels = np.frombuffer(_take(img_blob, 16, n * rows * cols, images_path), dtype=np.uint8)

    lbl_blob = _read_all(labels_path)
    magic_l, n_l = struct.unpack(">ii", _take(lbl_blob, 0, 8, labels_path))
    if magic_l != IDX_LABEL_MAGIC:
        raise FormatError(f"{labels_path}: label magic {magic_l} != {IDX_LABEL_MAGIC} at offset 0")
    if n_l != n:
        raise FormatError(f"label count {n_l} != image count {n}")
    labels = np.frombuffer(_take(lbl_blob, 8, n_l, labels_path), dtype=np.uint8)

    inputs = pixels.astype(np.float64).reshape(n, rows * cols) / 255.0
    return Dataset(inputs, labels.astype(np.int64), num_classes=10)


def _find_idx_file(directory: Path, gz_name: str) -> Path:
    for candidate in (directory / gz_name, directory / gz_name.removesuffix(".gz")):
        if candidate.exists():
            return candidate
    raise FormatError(f"{gz_name} (or uncompressed variant) not found under {directory}")


def load_mnist_dir(directory, split: str = "train") -> Dataset:
    """Load a split from a directory holding the four canonical MNIST files."""
    directory = Path(directory)
    if split not in MNIST_FILES:
        raise InputError(f"split must be 'train' or 'test', got {split!r}")
    img, lbl = MNIST_FILES[split]
    return load_mnist_idx(_find_idx_file(directory, img), _find_idx_file(directory, lbl))


def gen_synthetic(num_classes: int, dim: int, n: int, spread: float, seed: int,
                  sample_stream: int = 0) -> Dataset:
    """Balanced isotropic Gaussian clusters with seeded means.

    The cluster means depend on ``seed`` alone, so two calls with different
    ``sample_stream`` values draw fresh examples from the same underlying
    distribution (train/test splits). Class c appears n // C or n // C + 1
    times; as spread -> 0 a nearest-mean classifier separates the classes
    perfectly.
    """
    if num_classes < 2:
        raise InputError("need at least two classes")
    if dim < 1:
        raise InputError("need at least one input dimension")
    if n < num_classes:
        raise InputError("need at least one example per class")
    means = rng_stream(seed, 0).normal(size=(num_classes, dim)) * 3.0
    noise = rng_stream(seed, 1, sample_stream).normal(size=(n, dim))
    labels = np.arange(n, dtype=np.int64) % num_classes
    return Dataset(means[labels] + spread * noise, labels, num_classes)
