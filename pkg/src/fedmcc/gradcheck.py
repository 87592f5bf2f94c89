"""Finite-difference oracle suite for the closed-form and two-pass gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gradients import (
    contrastive_grad_u,
    contrastive_grad_v,
    cosine_grad,
    entropy_grad,
)
from .losses import contrastive_loss, entropy
from .model import MccModel, TrainConfig, loss_and_grad, batch_loss, four_views
from .numerics import cosine_similarity

STEP = 1e-6
REL_TOL = 1e-5
ABS_TOL = 1e-8


def central_difference(fn, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = fn(x)
        x[idx] = orig - h
        down = fn(x)
        x[idx] = orig
        g[idx] = (up - down) / (2.0 * h)
    return g


def within_tolerance(analytic, numeric, rel=REL_TOL, abs_=ABS_TOL) -> bool:
    """Elementwise ``|a - b| <= max(rel |b|, abs)``."""
    return bool(np.all(np.abs(analytic - numeric) <= np.maximum(rel * np.abs(numeric), abs_)))


@dataclass
class CheckResult:
    name: str
    trials: int = 0
    failures: int = 0
    worst_abs: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.trials > 0 and self.failures == 0

    def record(self, analytic, numeric, label: str) -> None:
        self.trials += 1
        self.worst_abs = max(self.worst_abs, float(np.max(np.abs(analytic - numeric))))
        if not within_tolerance(analytic, numeric):
            self.failures += 1
            self.notes.append(label)


def _instance(rng: np.random.Generator):
    n = int(rng.integers(2, 9))
    d = int(rng.integers(2, 17))
    tau = float(rng.uniform(0.5, 1.5))
    return n, d, tau


def check_closed_forms(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    """Compare every closed-form gradient with central differences on random instances."""
    rng = np.random.default_rng(seed)
    results = {k: CheckResult(k) for k in
               ("cosine_grad", "contrastive_grad_u", "contrastive_grad_v", "entropy_grad")}
    for t in range(trials):
        n, d, tau = _instance(rng)
        u = rng.normal(size=d)
        v = rng.normal(size=d)
        results["cosine_grad"].record(
            cosine_grad(u, v), central_difference(lambda x: cosine_similarity(x, v), u),
            f"trial {t}")

        U = rng.normal(size=(d, n))
        V = rng.normal(size=(d, n))
        ell = int(rng.integers(n))

        def loss_u(col):
            W = U.copy()
            W[:, ell] = col
            return contrastive_loss(W, V, tau)

        def loss_v(col):
            W = V.copy()
            W[:, ell] = col
            return contrastive_loss(U, W, tau)

        results["contrastive_grad_u"].record(
            contrastive_grad_u(U, V, tau, ell), central_difference(loss_u, U[:, ell]),
            f"trial {t} n={n} d={d}")
        results["contrastive_grad_v"].record(
            contrastive_grad_v(U, V, tau, ell), central_difference(loss_v, V[:, ell]),
            f"trial {t} n={n} d={d}")

        # entries bounded away from 0 so the sign never flips inside a step
        C = rng.uniform(0.05, 1.0, size=(n, d)) * rng.choice([-1.0, 1.0], size=(n, d))
        col = int(rng.integers(d))

        def ent(c):
            W = C.copy()
            W[:, col] = c
            return entropy(W)

        results["entropy_grad"].record(
            entropy_grad(C, col), central_difference(ent, C[:, col]), f"trial {t} n={n} d={d}")
    return list(results.values())


def check_two_pass(trials: int = 10, seed: int = 0) -> CheckResult:
    """Two-pass parameter gradient vs central differences of the batch loss over parameters."""
    rng = np.random.default_rng(seed)
    result = CheckResult("two_pass_gradient")
    for t in range(trials):
        n = int(rng.choice([2, 4, 8]))
        model = MccModel.create(2, 3, rng, hidden=8, d1=4, encoder_layers=1, projector_layers=1)
        # perturb the target so the online/target coupling is exercised
        for stack in model.target.values():
            for layer in stack.layers:
                layer.weight += 0.1 * rng.normal(size=layer.weight.shape)
        cfg = TrainConfig(tau_I=0.5, tau_C=1.0, lr=0.0, m=0.99, entropy_weight=-1.0)
        x_a = rng.normal(size=(n, 2))
        x_b = rng.normal(size=(n, 2))
        _, grads = loss_and_grad(model, x_a, x_b, cfg)
        for name in ("f", "g_I", "g_C"):
            flat = model.online[name].flat()

            def loss_at(p, name=name):
                _load_flat(model.online[name], p)
                return batch_loss(four_views(model, x_a, x_b), cfg)

            numeric = central_difference(loss_at, flat)
            _load_flat(model.online[name], flat)
            result.record(grads[name].flat(), numeric, f"trial {t} stack {name}")
    return result


def _load_flat(stack, flat: np.ndarray) -> None:
    pos = 0
    for arr in stack.arrays():
        arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size


def run_suite(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    return check_closed_forms(trials, seed) + [check_two_pass(max(1, trials // 10), seed)]
