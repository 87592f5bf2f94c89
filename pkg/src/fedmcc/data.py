"""Synthetic labelled datasets; labels are kept for evaluation only."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, ParseError, ValidationError


@dataclass
class Dataset:
    x: np.ndarray       # (N, dim), one sample per row
    labels: np.ndarray  # (N,) hidden class index

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.ndim != 2 or self.labels.shape != (self.x.shape[0],):
            raise ValidationError("dataset features and labels disagree in length")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.labels[idx])


def _simplex(k: int, sep: float) -> np.ndarray:
    """``k`` points in R^(k-1), centred, every pair exactly ``sep`` apart."""
    eye = np.eye(k) * (sep / np.sqrt(2.0))
    centred = eye - eye.mean(axis=0)
    # project onto the (k-1)-dim affine hull
    u, s, _ = np.linalg.svd(centred.T, full_matrices=False)
    return centred @ u[:, : k - 1]


def blob_means(k: int, dim: int, sep: float, rng: np.random.Generator) -> np.ndarray:
    if dim >= k - 1:
        frame, _ = np.linalg.qr(rng.normal(size=(dim, k - 1)))
        return _simplex(k, sep) @ frame.T
    # not enough room for a simplex: evenly spaced on a circle, adjacent means sep apart
    radius = sep / (2.0 * np.sin(np.pi / k))
    angles = 2.0 * np.pi * np.arange(k) / k
    frame, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1) @ frame.T


def make_blobs(k: int, n_per_class: int, dim: int, sep: float,
               rng: np.random.Generator) -> Dataset:
    """``k`` unit-variance isotropic Gaussian clusters with means ``sep`` apart."""
    if k < 2:
        raise ValidationError("blobs need k >= 2", field="k")
    if not sep > 0:
        raise ValidationError("sep must be > 0", field="sep")
    means = blob_means(k, dim, sep, rng)
    labels = np.repeat(np.arange(k), n_per_class)
    x = means[labels] + rng.normal(size=(k * n_per_class, dim))
    return Dataset(x, labels)


def make_rings(k: int, n_per_class: int, dim: int, sep: float, rng: np.random.Generator,
               noise: float = 0.1) -> Dataset:
    """Concentric rings in the first two coordinates of a random frame; ring j has radius (j + 1) sep."""
    if k < 2:
        raise ValidationError("rings need k >= 2", field="k")
    if dim < 2:
        raise ValidationError("rings need dim >= 2", field="dim")
    frame, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
    labels = np.repeat(np.arange(k), n_per_class)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=labels.size)
    radius = (labels + 1) * sep + rng.normal(0.0, noise * sep, size=labels.size)
    pts = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    x = pts @ frame.T + rng.normal(0.0, noise, size=(labels.size, dim))
    return Dataset(x, labels)


def load_csv(path) -> Dataset:
    """Rows of ``feature_1, ..., feature_d, label``; a non-numeric first row is a header."""
    rows = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if lineno == 1:
                    continue
                raise ParseError(f"non-numeric value in {path}", line=lineno)
    if not rows:
        raise EmptyDataset(f"no samples in {path}")
    arr = np.asarray(rows)
    return Dataset(arr[:, :-1], arr[:, -1].astype(np.int64))


def save_csv(path, data: Dataset) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(data.x.shape[1])] + ["label"])
        for xi, yi in zip(data.x, data.labels):
            w.writerow([repr(float(v)) for v in xi] + [int(yi)])


def stratified_split(data: Dataset, n_test_per_class: int,
                     rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Hold out ``n_test_per_class`` random samples of every class."""
    train_idx, test_idx = [], []
    for c in np.unique(data.labels):
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        test_idx.append(idx[:n_test_per_class])
        train_idx.append(idx[n_test_per_class:])
    return (data.subset(np.sort(np.concatenate(train_idx))),
            data.subset(np.sort(np.concatenate(test_idx))))
