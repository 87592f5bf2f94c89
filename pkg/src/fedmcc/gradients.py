"""Closed-form representation gradients and the two-pass parameter gradient.

The batch-coupled losses are differentiated in two passes. Pass one runs the
whole batch forward (outputs only) and stores the gradient of the loss with
respect to every representation in an :class:`AlphaCache`. Pass two walks the
batch a chunk at a time, recomputes activations for that chunk only, and
back-propagates the cached representation gradients, accumulating parameter
gradients. Live activation memory in pass two is bounded by the chunk size,
not the batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, IndexOutOfRange, NondifferentiablePoint, StaleCache
from .losses import FourViewBatch, contrastive_terms
from .mlp import StackGrad, backward, forward
from .numerics import as_batch, as_vec, column_norms, cosine_similarity

__all__ = [
    "cosine_grad",
    "xi_values",
    "contrastive_grad_u",
    "contrastive_grad_v",
    "contrastive_grads",
    "entropy_grad",
    "entropy_grads",
    "AlphaCache",
    "build_alpha_cache",
    "ParamGrad",
    "ActivationMeter",
    "softmax",
    "two_pass_gradient",
]


def cosine_grad(u, v) -> np.ndarray:
    """Gradient of ``s(u, v)`` with respect to ``u``.

    ``v/(|u||v|) - s(u, v) u/|u|^2``; the second term is subtracted, so the
    result is orthogonal to ``u`` and vanishes at ``u = v``.
    """
    u = as_vec(u)
    v = as_vec(v)
    s = cosine_similarity(u, v)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    return v / (nu * nv) - (s / (nu * nu)) * u


def xi_values(u, v, tau: float) -> np.ndarray:
    """Per-column normalizers ``xi_i`` of the contrastive loss."""
    _, _, log_xi = contrastive_terms(u, v, tau)
    return np.exp(log_xi)


def _check_index(ell: int, n: int) -> int:
    if not 0 <= ell < n:
        raise IndexOutOfRange(f"column index {ell} outside [0, {n})")
    return ell


def contrastive_grad_u(u, v, tau: float, ell: int) -> np.ndarray:
    """Gradient of the contrastive loss w.r.t. column ``ell`` (0-based) of ``u``.

    Evaluated term by term:
    ``n tau dL/du_l = -s'(u_l, v_l)
        + sum_{i != l} [(1/xi_l + 1/xi_i) e^{s(u_l, u_i)/tau} s'(u_l, u_i)
                        + (1/xi_l) e^{s(u_l, v_i)/tau} s'(u_l, v_i)]``.
    The ``1/xi_l`` factor on the u-v summand is required to match the
    finite-difference oracle (tests/test_gradients.py).
    """
    u = as_batch(u)
    v = as_batch(v)
    s_uu, s_uv, log_xi = contrastive_terms(u, v, tau)
    n = u.shape[1]
    ell = _check_index(ell, n)
    ul = u[:, ell]
    g = -cosine_grad(ul, v[:, ell])
    for i in range(n):
        if i == ell:
            continue
        w_uu = np.exp(s_uu[ell, i] - log_xi[ell]) + np.exp(s_uu[ell, i] - log_xi[i])
        w_uv = np.exp(s_uv[ell, i] - log_xi[ell])
        g = g + w_uu * cosine_grad(ul, u[:, i]) + w_uv * cosine_grad(ul, v[:, i])
    return g / (n * tau)


def contrastive_grad_v(u, v, tau: float, ell: int) -> np.ndarray:
    """Gradient w.r.t. column ``ell`` of ``v``:
    ``n tau dL/dv_l = -s'(v_l, u_l) + sum_{i != l} (1/xi_i) e^{s(u_i, v_l)/tau} s'(v_l, u_i)``.
    """
    u = as_batch(u)
    v = as_batch(v)
    _, s_uv, log_xi = contrastive_terms(u, v, tau)
    n = u.shape[1]
    ell = _check_index(ell, n)
    vl = v[:, ell]
    g = -cosine_grad(vl, u[:, ell])
    for i in range(n):
        if i == ell:
            continue
        g = g + np.exp(s_uv[i, ell] - log_xi[i]) * cosine_grad(vl, u[:, i])
    return g / (n * tau)


def _weighted_cos_grads(a: np.ndarray, a_norm: np.ndarray, b_hat: np.ndarray,
                        cos: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Columns ``sum_j w[l, j] s'(a_l, b_j)`` for every ``l``."""
    a_hat = a / a_norm
    return (b_hat @ w.T - a_hat * np.sum(w * cos, axis=1)) / a_norm


def contrastive_grads(u, v, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the contrastive loss w.r.t. every column of ``u`` and ``v``.

    Vectorized form of :func:`contrastive_grad_u` / :func:`contrastive_grad_v`;
    returns arrays shaped like ``u`` and ``v``.
    """
    u = as_batch(u)
    v = as_batch(v)
    s_uu, s_uv, log_xi = contrastive_terms(u, v, tau)
    n = u.shape[1]
    eye = np.eye(n, dtype=bool)
    p_uu = np.exp(np.where(eye, -np.inf, s_uu - log_xi[:, None]))
    p_uv = np.exp(np.where(eye, -np.inf, s_uv - log_xi[:, None]))
    # weights on the unscaled cosines
    w_uu = (p_uu + p_uu.T) / (n * tau)
    w_uv = (p_uv - np.eye(n)) / (n * tau)
    nu = column_norms(u)
    nv = column_norms(v)
    u_hat = u / nu
    v_hat = v / nv
    cos_uu = u_hat.T @ u_hat
    cos_uv = u_hat.T @ v_hat
    gu = _weighted_cos_grads(u, nu, u_hat, cos_uu, w_uu) + _weighted_cos_grads(
        u, nu, v_hat, cos_uv, w_uv
    )
    gv = _weighted_cos_grads(v, nv, u_hat, cos_uv.T, w_uv.T)
    return gu, gv


def _entropy_coefficients(c: np.ndarray) -> np.ndarray:
    mass = np.sum(np.abs(c), axis=0)
    total = mass.sum()
    if total == 0.0:
        raise NondifferentiablePoint("entropy gradient undefined for an all-zero matrix")
    p = mass / total
    nz = p > 0.0
    log_p = np.zeros_like(p)
    log_p[nz] = np.log(p[nz])
    # sum_i (m_i - [i = l] M)/M^2 (1 + log p_i); empty columns contribute 0
    common = np.sum(np.where(nz, mass * (1.0 + log_p), 0.0)) / total**2
    return common - np.where(nz, 1.0 + log_p, 0.0) / total


def entropy_grad(c, ell: int) -> np.ndarray:
    """Gradient of :func:`fedmcc.losses.entropy` w.r.t. column ``ell`` of ``c``."""
    c = as_batch(c)
    ell = _check_index(ell, c.shape[1])
    col = c[:, ell]
    if np.any(col == 0.0):
        raise NondifferentiablePoint(f"column {ell} has an exact zero entry")
    return _entropy_coefficients(c)[ell] * np.sign(col)


def entropy_grads(c) -> np.ndarray:
    """Gradient of the entropy w.r.t. every entry of ``c`` (same shape)."""
    c = as_batch(c)
    if np.any(c == 0.0):
        raise NondifferentiablePoint("matrix has an exact zero entry")
    return _entropy_coefficients(c)[None, :] * np.sign(c)


@dataclass
class AlphaCache:
    """Representation-space gradients from pass one.

    ``alpha[j - 1][i]`` is the vector ``alpha_{i,j}`` (j counted from 1):
    1, 2 are instance gradients for views a and b (dim d1), 3, 4 the
    cluster-contrastive gradients and 5, 6 the entropy gradients (dim d2).
    ``version`` identifies the parameters the cache was built from.
    """

    alpha: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    version: tuple | None = None

    @property
    def n(self) -> int:
        return self.alpha[0].shape[0]

    def entry(self, i: int, j: int) -> np.ndarray:
        return self.alpha[j - 1][i]

    def instance_grads(self) -> tuple[np.ndarray, np.ndarray]:
        return self.alpha[0], self.alpha[1]

    def cluster_grads(self) -> tuple[np.ndarray, np.ndarray]:
        return self.alpha[2] + self.alpha[4], self.alpha[3] + self.alpha[5]

    @classmethod
    def zeros(cls, n: int, d1: int, d2: int, version=None) -> "AlphaCache":
        return cls(
            tuple(np.zeros((n, d)) for d in (d1, d1, d2, d2, d2, d2)), version
        )


def build_alpha_cache(views: FourViewBatch, tau_I: float, tau_C: float,
                      mode: str = "full_mcc", version=None,
                      entropy_weight: float = 1.0) -> AlphaCache:
    """Pass one: gradients of the loss selected by ``mode`` w.r.t. online outputs.

    Target-network outputs are treated as constants. For a plain two-view CC
    batch use :meth:`FourViewBatch.from_two_views`; the cache then holds the
    CC gradients, since the online and target outputs coincide.
    ``mode`` is one of ``full_mcc``, ``instance_only`` or ``cluster_only``;
    ``entropy_weight`` scales alpha 5 and 6 like it scales the entropy terms.
    """
    if mode not in ("full_mcc", "instance_only", "cluster_only"):
        raise ValueError(f"unknown loss mode {mode!r}")
    n = views.n
    d1 = views.z_aO.shape[0]
    d2 = views.c_aO.shape[1]
    cache = AlphaCache.zeros(n, d1, d2, version)
    a = list(cache.alpha)
    if mode in ("full_mcc", "instance_only"):
        gu, _ = contrastive_grads(views.z_aO, views.z_bT, tau_I)
        _, gv = contrastive_grads(views.z_aT, views.z_bO, tau_I)
        a[0] = 0.5 * gu.T
        a[1] = 0.5 * gv.T
    if mode in ("full_mcc", "cluster_only"):
        # cluster matrices are (n, d2): the column-wise gradient, already laid
        # out per sample row, is the transposed per-cluster gradient
        gu, _ = contrastive_grads(views.c_aO, views.c_bT, tau_C)
        _, gv = contrastive_grads(views.c_aT, views.c_bO, tau_C)
        a[2] = 0.5 * gu
        a[3] = 0.5 * gv
        a[4] = entropy_weight * entropy_grads(views.c_aO)
        a[5] = entropy_weight * entropy_grads(views.c_bO)
    return AlphaCache(tuple(a), version)


class ParamGrad(dict):
    """Mapping of stack name (``f``, ``g_I``, ``g_C``) to :class:`StackGrad`."""

    def flat(self) -> np.ndarray:
        return np.concatenate([self[k].flat() for k in sorted(self)])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


class ActivationMeter:
    """Counts per-sample activation records alive during pass two."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.total = 0

    def acquire(self, k: int) -> None:
        self.live += k
        self.total += k
        self.peak = max(self.peak, self.live)

    def release(self, k: int) -> None:
        self.live -= k


def softmax(o: np.ndarray) -> np.ndarray:
    e = np.exp(o - np.max(o, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _softmax_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return y * (gy - np.sum(y * gy, axis=-1, keepdims=True))


def two_pass_gradient(model, x_a, x_b, cache: AlphaCache,
                      groups=("f", "g_I", "g_C"), chunk: int = 1,
                      meter: ActivationMeter | None = None) -> ParamGrad:
    """Pass two: accumulate parameter gradients of the online network.

    ``model`` must expose ``online`` (a mapping with ``f``, ``g_I``, ``g_C``
    stacks) and ``online_version()``. ``x_a`` and ``x_b`` are the two
    augmented views, one sample per row, in the order the cache was built.
    Only stacks named in ``groups`` receive gradients.
    """
    if cache.version is not None and cache.version != model.online_version():
        raise StaleCache("parameters changed since the alpha cache was built")
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    n = cache.n
    if x_a.shape[0] != n or x_b.shape[0] != n:
        raise DimMismatch("input batch size does not match the alpha cache")
    f, g_i, g_c = model.online["f"], model.online["g_I"], model.online["g_C"]
    grads = ParamGrad({k: StackGrad.zeros_like(model.online[k]) for k in groups})
    need_instance = "f" in groups or "g_I" in groups
    alpha_z = cache.instance_grads()
    alpha_y = cache.cluster_grads()
    meter = meter if meter is not None else ActivationMeter()
    chunk = max(1, int(chunk))
    for start in range(0, n, chunk):
        rows = slice(start, min(start + chunk, n))
        k = rows.stop - rows.start
        for view, x in enumerate((x_a, x_b)):
            meter.acquire(k)
            acts_f, h = forward(f, x[rows], keep=True)
            acts_c, o = forward(g_c, h, keep=True)
            y = softmax(o)
            g_c_grad = backward(g_c, h, _softmax_backward(y, alpha_y[view][rows]), acts_c)
            g_h = g_c_grad.input_grad
            if need_instance:
                acts_i, _ = forward(g_i, h, keep=True)
                g_i_grad = backward(g_i, h, alpha_z[view][rows], acts_i)
                g_h = g_h + g_i_grad.input_grad
                if "g_I" in groups:
                    grads["g_I"].add_(g_i_grad)
                del acts_i
            if "g_C" in groups:
                grads["g_C"].add_(g_c_grad)
            if "f" in groups:
                grads["f"].add_(backward(f, x[rows], g_h, acts_f))
            del acts_f, acts_c
            meter.release(k)
    return grads
