"""Dataset delivery: real IDX files when available, synthetic blobs otherwise.

Real MNIST/F-MNIST is picked up from CAPSKIT_MNIST_DIR (the four standard
uncompressed IDX files). Without it, a deterministic 10-class stand-in is
generated: each class is a bright blob at a class-specific location with
position jitter and background noise, written through the same IDX files so
the whole pipeline downstream is identical.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .formats import read_idx_images, read_idx_labels, write_idx_images, write_idx_labels

BLOB_CENTERS = [
    (7, 7), (7, 14), (7, 21),
    (14, 7), (14, 14), (14, 21),
    (21, 7), (21, 14), (21, 21),
    (11, 24),
]


def synthetic_images(n: int, seed: int, hw: int = 28):
    """n blob images with labels; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n)
    images = rng.uniform(0.0, 0.08, (n, hw, hw)).astype(np.float32)
    yy, xx = np.mgrid[0:hw, 0:hw]
    for i, lab in enumerate(labels):
        cy, cx = BLOB_CENTERS[lab]
        cy += rng.integers(-2, 3)
        cx += rng.integers(-2, 3)
        amp = rng.uniform(0.75, 1.0)
        sigma = rng.uniform(2.2, 3.0)
        blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        images[i] = np.clip(images[i] + blob, 0.0, 1.0)
    return images, labels.astype(np.int64)


def write_synthetic_dataset(directory, n_train: int, n_test: int, seed: int = 0):
    """Write train/test IDX files; returns the four paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tr_im, tr_lb = synthetic_images(n_train, seed)
    te_im, te_lb = synthetic_images(n_test, seed + 1)
    paths = {
        "train_images": directory / "train-images-idx3-ubyte",
        "train_labels": directory / "train-labels-idx1-ubyte",
        "test_images": directory / "t10k-images-idx3-ubyte",
        "test_labels": directory / "t10k-labels-idx1-ubyte",
    }
    write_idx_images(paths["train_images"], tr_im)
    write_idx_labels(paths["train_labels"], tr_lb)
    write_idx_images(paths["test_images"], te_im)
    write_idx_labels(paths["test_labels"], te_lb)
    return paths


def load_dataset(directory):
    """Load the four standard IDX files from a directory."""
    directory = Path(directory)
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    paths = {k: directory / v for k, v in names.items()}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise FileNotFoundError(f"dataset files missing: {', '.join(missing)}")
    return {
        "train_images": read_idx_images(paths["train_images"]),
        "train_labels": read_idx_labels(paths["train_labels"]),
        "test_images": read_idx_images(paths["test_images"]),
        "test_labels": read_idx_labels(paths["test_labels"]),
        "name": directory.name,
    }


def real_mnist_dir():
    """Directory with real MNIST IDX files, or None."""
    d = os.environ.get("CAPSKIT_MNIST_DIR")
    return d if d and Path(d).exists() else None
