"""Desk-scale datasets and deterministic train/holdout/test splits."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits, make_blobs, make_moons

DATASETS = ("two-moons", "gaussian-blobs", "small-image-grid", "external-directory")
SPLITS = ("train", "holdout", "test")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return len(self.y)

    def as_tuple(self):
        return self.x, self.y


def load_dataset(
    name: str,
    seed: int = 0,
    n_samples: int = 2000,
    noise: float = 0.25,
    n_classes: int = 3,
    n_features: int = 2,
    image_layout: str = "flat",
    path: str | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x, y)`` as float64 features and int64 labels.

    ``small-image-grid`` is the 8x8 handwritten digits set scaled to [0, 1];
    ``image_layout="chw"`` keeps the ``(1, 8, 8)`` image shape for the CNN.
    ``external-directory`` reads ``x.npy`` and ``y.npy`` from ``path``.
    """
    if name == "two-moons":
        x, y = make_moons(n_samples=n_samples, noise=noise, random_state=seed)
    elif name == "gaussian-blobs":
        x, y = make_blobs(
            n_samples=n_samples,
            centers=n_classes,
            n_features=n_features,
            cluster_std=max(noise, 1e-6) * 4,
            random_state=seed,
        )
    elif name == "small-image-grid":
        digits = load_digits()
        x, y = digits.data / 16.0, digits.target
        if image_layout == "chw":
            x = x.reshape(-1, 1, 8, 8)
    elif name == "external-directory":
        if path is None:
            raise ValueError("external-directory needs a data path")
        root = Path(path)
        x, y = np.load(root / "x.npy"), np.load(root / "y.npy")
    else:
        raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def split_dataset(
    x: np.ndarray,
    y: np.ndarray,
    holdout_fraction: float,
    test_fraction: float,
    seed: int,
) -> dict[str, Split]:
    """Disjoint seeded train/holdout/test partition; ``ids`` index the full dataset."""
    if not 0 < holdout_fraction <= 0.5:
        raise ValueError("holdout_fraction must be in (0, 0.5]")
    if not 0 < test_fraction < 1 or holdout_fraction + test_fraction >= 1:
        raise ValueError("test_fraction must leave room for training data")
    n = len(y)
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(holdout_fraction * n))
    n_test = int(round(test_fraction * n))
    parts = {
        "holdout": perm[:n_hold],
        "test": perm[n_hold : n_hold + n_test],
        "train": perm[n_hold + n_test :],
    }
    return {k: Split(x[idx], y[idx], idx) for k, idx in parts.items()}
