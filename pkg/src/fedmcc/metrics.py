"""Clustering metrics: accuracy under optimal matching, NMI and ARI."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import comb

from .errors import LengthMismatch, ValidationError


def _labels(pred, true) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    true = np.asarray(true, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise LengthMismatch(f"{pred.size} predictions vs {true.size} labels")
    if pred.size == 0:
        raise ValidationError("label vectors must be non-empty")
    if pred.min() < 0 or true.min() < 0:
        raise ValidationError("labels must be non-negative")
    return pred, true


def contingency(pred, true) -> np.ndarray:
    """``counts[i, j]`` = number of samples with predicted cluster i and class j."""
    pred, true = _labels(pred, true)
    table = np.zeros((pred.max() + 1, true.max() + 1), dtype=np.int64)
    np.add.at(table, (pred, true), 1)
    return table


def clustering_accuracy(pred, true) -> float:
    """Fraction matched under the best one-to-one cluster/class assignment.

    Rectangular tables are zero-padded to square, so surplus clusters or
    classes simply go unmatched.
    """
    table = contingency(pred, true)
    k = max(table.shape)
    padded = np.zeros((k, k), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return float(padded[rows, cols].sum() / table.sum())


def _entropy_of_counts(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(pred, true) -> float:
    """Mutual information normalized by the geometric mean of the two entropies."""
    table = contingency(pred, true)
    n = int(table.sum())
    h_pred = _entropy_of_counts(table.sum(axis=1), n)
    h_true = _entropy_of_counts(table.sum(axis=0), n)
    if h_pred == 0.0 or h_true == 0.0:
        return 0.0
    a = table.sum(axis=1, keepdims=True)
    b = table.sum(axis=0, keepdims=True)
    nz = table > 0
    mi = np.sum(table[nz] / n * np.log(n * table[nz] / (a * b)[nz]))
    return float(min(1.0, max(0.0, mi / np.sqrt(h_pred * h_true))))


def ari(pred, true) -> float:
    """Adjusted Rand index from pair counts of the contingency table."""
    table = contingency(pred, true)
    n = int(table.sum())
    if n < 2:
        raise ValidationError("ARI needs at least two samples")
    sum_ij = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    expected = sum_a * sum_b / comb(n, 2)
    denom = 0.5 * (sum_a + sum_b) - expected
    if denom == 0.0:
        # both partitions trivial (one cluster, or all singletons) and identical
        return 1.0
    return float((sum_ij - expected) / denom)


def evaluate(pred, true) -> dict[str, float]:
    return {"ACC": clustering_accuracy(pred, true), "NMI": nmi(pred, true), "ARI": ari(pred, true)}
