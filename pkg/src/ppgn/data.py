"""Desk-scale digit data.

Real MNIST IDX files are used when present.  Otherwise the 5000-image MNIST
subset shipped inside the ``mlxtend`` package (500 per digit) is split into
train and test parts and can be written out as IDX files.
"""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    images: np.ndarray  # (n, rows*cols) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    rows: int = 28
    cols: int = 28

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.rows, self.cols)

    def of_class(self, c: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.labels == c))


def _bundled_csv() -> Path:
    try:
        import mlxtend.data
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise RuntimeError("the bundled digit subset needs the 'mlxtend' package; "
                           "install it or point PPGN_MNIST_DIR at IDX files") from exc
    return Path(mlxtend.data.__file__).parent / "data" / "mnist_5k.csv.gz"


def bundled_digits() -> tuple[np.ndarray, np.ndarray]:
    """The 5000 bundled digits as raw ``uint8`` pixels and labels."""
    with gzip.open(_bundled_csv(), "rt") as fh:
        raw = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    return raw[:, :-1].astype(np.uint8), raw[:, -1]


def desk_split(seed: int = 0, n_test_per_class: int = 100) -> tuple[Dataset, Dataset]:
    """Stratified train/test split of the bundled digits (4000 / 1000 by default)."""
    pixels, labels = bundled_digits()
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        test_idx.extend(rng.choice(idx, n_test_per_class, replace=False))
    test_mask = np.zeros(len(labels), bool)
    test_mask[test_idx] = True
    images = pixels.astype(np.float64) / 255.0
    train = Dataset(images[~test_mask], labels[~test_mask])
    test = Dataset(images[test_mask], labels[test_mask])
    return train, test


def mnist_dir() -> Path | None:
    """Directory named by ``PPGN_MNIST_DIR`` if it holds the four standard IDX files."""
    d = os.environ.get("PPGN_MNIST_DIR")
    if not d:
        return None
    d = Path(d)
    names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
             "t10k-labels-idx1-ubyte"]
    if all((d / n).exists() or (d / f"{n}.gz").exists() for n in names):
        return d
    return None
