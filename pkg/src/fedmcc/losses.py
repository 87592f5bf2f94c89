"""Contrastive and entropy losses for CC, MCC and the per-client federated losses.

Instance batches ``z`` have shape ``(d1, n)``; cluster matrices ``c`` have
shape ``(n, d2)``. Both are consumed column-wise: the contrastive loss on a
cluster matrix contrasts its ``d2`` cluster columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllZeroMatrix, BatchTooSmall, DimMismatch, ValidationError
from .numerics import as_batch, cosine_matrix

__all__ = [
    "FourViewBatch",
    "check_temperature",
    "contrastive_loss",
    "contrastive_terms",
    "entropy",
    "cc_loss",
    "mcc_loss",
    "instance_loss_k",
    "cluster_loss_k",
]


def check_temperature(tau: float, name: str = "tau") -> float:
    tau = float(tau)
    if not tau > 0.0:
        raise ValidationError(f"{name} must be > 0", field=name)
    return tau


@dataclass(frozen=True)
class FourViewBatch:
    """Both augmented views passed through both the online (O) and target (T) networks."""

    z_aO: np.ndarray
    z_bO: np.ndarray
    z_aT: np.ndarray
    z_bT: np.ndarray
    c_aO: np.ndarray
    c_bO: np.ndarray
    c_aT: np.ndarray
    c_bT: np.ndarray

    def __post_init__(self):
        zs = [as_batch(getattr(self, k)) for k in ("z_aO", "z_bO", "z_aT", "z_bT")]
        cs = [as_batch(getattr(self, k)) for k in ("c_aO", "c_bO", "c_aT", "c_bT")]
        if len({z.shape for z in zs}) != 1 or len({c.shape for c in cs}) != 1:
            raise DimMismatch("four-view batch members disagree in shape")
        if zs[0].shape[1] != cs[0].shape[0]:
            raise DimMismatch("instance and cluster batches disagree on batch size")

    @classmethod
    def from_two_views(cls, z_a, z_b, c_a, c_b) -> "FourViewBatch":
        """A batch where the target network coincides with the online one (plain CC)."""
        return cls(z_a, z_b, z_a, z_b, c_a, c_b, c_a, c_b)

    def scaled(self, factor: float) -> "FourViewBatch":
        return FourViewBatch(*(factor * getattr(self, k) for k in self.__dataclass_fields__))

    @property
    def n(self) -> int:
        return self.z_aO.shape[1]


def _check_pair(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u = as_batch(u)
    v = as_batch(v)
    if u.shape != v.shape:
        raise DimMismatch(f"contrastive inputs differ in shape: {u.shape} vs {v.shape}")
    if u.shape[1] < 2:
        raise BatchTooSmall("contrastive loss needs at least two columns")
    return u, v


def contrastive_terms(u, v, tau: float):
    """Scaled similarities and per-column log-normalizers of the contrastive loss.

    Returns ``(s_uu, s_uv, log_xi)`` where ``s_uu = S(u, u)/tau`` and
    ``s_uv = S(u, v)/tau`` and ``log_xi[i]`` is the log of the sum over
    ``j != i`` of ``exp(s_uu[i, j]) + exp(s_uv[i, j])``.
    """
    u, v = _check_pair(u, v)
    tau = check_temperature(tau)
    s_uu = cosine_matrix(u, u) / tau
    s_uv = cosine_matrix(u, v) / tau
    n = u.shape[1]
    off = ~np.eye(n, dtype=bool)
    # per-row max shift keeps exp() in range for small tau
    shift = np.maximum(
        np.max(np.where(off, s_uu, -np.inf), axis=1),
        np.max(np.where(off, s_uv, -np.inf), axis=1),
    )
    e_uu = np.exp(np.where(off, s_uu - shift[:, None], -np.inf))
    e_uv = np.exp(np.where(off, s_uv - shift[:, None], -np.inf))
    log_xi = shift + np.log(e_uu.sum(axis=1) + e_uv.sum(axis=1))
    return s_uu, s_uv, log_xi


def contrastive_loss(u, v, tau: float) -> float:
    """Mean over columns i of ``-log(exp(s(u_i, v_i)/tau) / xi_i)``.

    The positive pair is *not* part of the normalizer ``xi_i``; only the
    ``j != i`` terms of both the u-u and u-v similarities are summed.
    """
    s_uu, s_uv, log_xi = contrastive_terms(u, v, tau)
    per_sample = log_xi - np.diag(s_uv)
    return float(np.mean(per_sample))


def entropy(c) -> float:
    """Entropy of the normalized column L1 masses of ``c``; empty columns add 0."""
    c = as_batch(c)
    mass = np.sum(np.abs(c), axis=0)
    total = mass.sum()
    if total == 0.0:
        raise AllZeroMatrix("entropy undefined for an all-zero matrix")
    p = mass / total
    nz = p > 0.0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def cc_loss(z_a, z_b, c_a, c_b, tau_I: float, tau_C: float,
            entropy_weight: float = 1.0) -> float:
    """CC loss; ``entropy_weight`` multiplies the two entropy terms (+1 as printed)."""
    return 0.5 * (
        contrastive_loss(z_a, z_b, tau_I) + contrastive_loss(c_a, c_b, tau_C)
    ) + entropy_weight * (entropy(c_a) + entropy(c_b))


def instance_loss_k(z_aO, z_bT, z_aT, z_bO, tau_I: float) -> float:
    return 0.5 * (contrastive_loss(z_aO, z_bT, tau_I) + contrastive_loss(z_aT, z_bO, tau_I))


def cluster_loss_k(c_aO, c_bT, c_aT, c_bO, tau_C: float,
                   entropy_weight: float = 1.0) -> float:
    return 0.5 * (
        contrastive_loss(c_aO, c_bT, tau_C) + contrastive_loss(c_aT, c_bO, tau_C)
    ) + entropy_weight * (entropy(c_aO) + entropy(c_bO) + entropy(c_aT) + entropy(c_bT))


def mcc_loss(views: FourViewBatch, tau_I: float, tau_C: float,
             entropy_weight: float = 1.0) -> float:
    """MCC loss: both views through both networks, four contrastive and four entropy terms."""
    v = views
    return 0.5 * (
        contrastive_loss(v.z_aO, v.z_bT, tau_I)
        + contrastive_loss(v.z_aT, v.z_bO, tau_I)
        + contrastive_loss(v.c_aO, v.c_bT, tau_C)
        + contrastive_loss(v.c_aT, v.c_bO, tau_C)
    ) + entropy_weight * (
        entropy(v.c_aO) + entropy(v.c_bO) + entropy(v.c_aT) + entropy(v.c_bT)
    )
