"""IDX dataset loading with strict validation.

The dataset root comes from the QATFORGE_DATA environment variable (or an
explicit path) and must hold the four canonical MNIST files:
train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte,
t10k-labels-idx1-ubyte.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

ENV_VAR = "QATFORGE_DATA"


def read_idx_images(path):
    """Parse an IDX3 unsigned-byte image file into a (count, rows, cols)
    uint8 array, validating magic, dimensions, and exact byte count."""
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValueError(f"{path}: truncated header, expected 16 bytes, got {len(data)}")
    magic, count, rows, cols = struct.unpack(">iiii", data[:16])
    if magic != IMAGES_MAGIC:
        raise ValueError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IMAGES_MAGIC:08x}"
        )
    expected = 16 + count * rows * cols
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path):
    """Parse an IDX1 unsigned-byte label file into a (count,) uint8 array."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated header, expected 8 bytes, got {len(data)}")
    magic, count = struct.unpack(">ii", data[:8])
    if magic != LABELS_MAGIC:
        raise ValueError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{LABELS_MAGIC:08x}"
        )
    expected = 8 + count
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=8)


def data_root(root=None):
    root = root or os.environ.get(ENV_VAR)
    if not root:
        raise RuntimeError(
            f"no dataset root: pass a path or set {ENV_VAR} to the MNIST directory"
        )
    return Path(root)


@dataclass
class MnistSet:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    def __post_init__(self):
        for images, labels, split in (
            (self.train_images, self.train_labels, "train"),
            (self.test_images, self.test_labels, "test"),
        ):
            if images.shape[0] != labels.shape[0]:
                raise ValueError(
                    f"{split}: {images.shape[0]} images vs {labels.shape[0]} labels"
                )
            if images.dtype != np.uint8 or labels.dtype != np.uint8:
                raise ValueError(f"{split}: expected uint8 arrays")
            if labels.size and labels.max() > 9:
                raise ValueError(f"{split}: label {labels.max()} outside 0..9")


def load_mnist(root=None):
    """Load and validate the four IDX files under the dataset root."""
    base = data_root(root)
    return MnistSet(
        train_images=read_idx_images(base / TRAIN_IMAGES),
        train_labels=read_idx_labels(base / TRAIN_LABELS),
        test_images=read_idx_images(base / TEST_IMAGES),
        test_labels=read_idx_labels(base / TEST_LABELS),
    )
