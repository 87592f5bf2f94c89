"""Online/target MCC networks, EMA coupling, augmentation and the training step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BatchTooSmall, ValidationError
from .gradients import (
    ActivationMeter,
    ParamGrad,
    build_alpha_cache,
    softmax,
    two_pass_gradient,
)
from .losses import (
    FourViewBatch,
    cc_loss,
    check_temperature,
    cluster_loss_k,
    contrastive_loss,
    entropy,
    instance_loss_k,
    mcc_loss,
)
from .mlp import MlpParams, forward, init_mlp
from .serialize import deserialize_stacks, serialize_stacks

STACKS = ("f", "g_I", "g_C")
LOSS_MODES = ("full_mcc", "instance_only", "cluster_only")
# stacks that receive gradients (and EMA) under each loss mode
MODE_GROUPS = {
    "full_mcc": ("f", "g_I", "g_C"),
    "instance_only": ("f", "g_I"),
    "cluster_only": ("g_C",),
}
# exact zeros in cluster outputs are nudged before differentiating the entropy
ZERO_NUDGE = 1e-12


@dataclass
class MccModel:
    online: dict[str, MlpParams]
    target: dict[str, MlpParams]
    # (instance, cluster) loss parts of the most recent training step
    last_parts: tuple[float, float] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if set(self.online) != set(STACKS) or set(self.target) != set(STACKS):
            raise ValidationError(f"model needs exactly the stacks {STACKS}")
        if self.online["g_I"].in_dim != self.online["f"].out_dim or (
            self.online["g_C"].in_dim != self.online["f"].out_dim
        ):
            raise ValidationError("projector inputs must match the encoder output")

    @classmethod
    def create(cls, in_dim: int, n_clusters: int, rng: np.random.Generator,
               hidden: int = 64, d1: int = 16, encoder_layers: int = 2,
               projector_layers: int = 2) -> "MccModel":
        """Relu MLP encoder plus two MLP heads; the target starts as a copy of the online net.

        The cluster head's outputs go through a row softmax (see :meth:`represent`).
        """
        head = [hidden] * projector_layers
        online = {
            "f": init_mlp([in_dim] + [hidden] * encoder_layers, rng, final_activation="relu"),
            "g_I": init_mlp(head + [d1], rng),
            "g_C": init_mlp(head + [n_clusters], rng),
        }
        return cls(online, {k: v.copy() for k, v in online.items()})

    @property
    def d1(self) -> int:
        return self.online["g_I"].out_dim

    @property
    def d2(self) -> int:
        return self.online["g_C"].out_dim

    @property
    def in_dim(self) -> int:
        return self.online["f"].in_dim

    def online_version(self) -> tuple:
        return tuple(self.online[k].version for k in STACKS)

    def nets(self, which: str) -> dict[str, MlpParams]:
        return self.online if which == "online" else self.target

    def represent(self, x, which: str = "online") -> tuple[np.ndarray, np.ndarray]:
        """Instance batch ``z`` (d1, n) and cluster matrix ``c`` (n, d2) for rows of ``x``."""
        nets = self.nets(which)
        _, h = forward(nets["f"], x)
        _, z = forward(nets["g_I"], h)
        _, o = forward(nets["g_C"], h)
        return z.T, softmax(o)

    def cluster_probs(self, x, which: str = "online") -> np.ndarray:
        nets = self.nets(which)
        _, h = forward(nets["f"], x)
        _, o = forward(nets["g_C"], h)
        return softmax(o)

    def sync_target(self, groups=STACKS) -> None:
        """Re-seed the target stacks from the online ones."""
        for k in groups:
            self.target[k].assign(self.online[k])

    def copy(self) -> "MccModel":
        return MccModel(
            {k: v.copy() for k, v in self.online.items()},
            {k: v.copy() for k, v in self.target.items()},
        )

    def to_bytes(self) -> bytes:
        stacks = {f"online/{k}": self.online[k] for k in STACKS}
        stacks.update({f"target/{k}": self.target[k] for k in STACKS})
        return serialize_stacks(stacks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MccModel":
        stacks = deserialize_stacks(blob)
        return cls(
            {k: stacks[f"online/{k}"] for k in STACKS},
            {k: stacks[f"target/{k}"] for k in STACKS},
        )


def check_momentum(m: float) -> float:
    m = float(m)
    if not 0.0 < m < 1.0:
        raise ValidationError("m must lie in (0, 1)", field="m")
    return m


def ema_update(model: MccModel, m: float, groups=STACKS) -> None:
    """``p_T <- m p_T + (1 - m) p_O`` for every parameter of the named stacks."""
    m = check_momentum(m)
    for k in groups:
        for lt, lo in zip(model.target[k].layers, model.online[k].layers):
            lt.weight *= m
            lt.weight += (1.0 - m) * lo.weight
            lt.bias *= m
            lt.bias += (1.0 - m) * lo.bias
        model.target[k].bump()


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.0
    mask_prob: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0", field="noise_sigma")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ValidationError("mask_prob must lie in [0, 1)", field="mask_prob")
        if not 0.0 < lo <= hi:
            raise ValidationError("scale_range needs 0 < lo <= hi", field="scale_range")


def augment(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise, then random zero-masking, then a global scale per sample.

    Accepts a single vector or a batch with one sample per row; every row
    gets its own independent draws.
    """
    x = np.asarray(x, dtype=np.float64)
    out = x + rng.normal(0.0, 1.0, size=x.shape) * cfg.noise_sigma
    if cfg.mask_prob > 0.0:
        out = out * (rng.random(size=x.shape) >= cfg.mask_prob)
    lo, hi = cfg.scale_range
    scale_shape = x.shape[:-1] + (1,) if x.ndim > 1 else (1,)
    return out * rng.uniform(lo, hi, size=scale_shape)


class Sgd:
    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, stacks: dict[str, MlpParams], grads: ParamGrad) -> None:
        for k, g in grads.items():
            for layer, (gw, gb) in zip(stacks[k].layers, g.layers):
                layer.weight -= self.lr * gw
                layer.bias -= self.lr * gb
            stacks[k].bump()

    def reset(self) -> None:
        pass


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = float(lr), beta1, beta2, eps
        self.reset()

    def reset(self) -> None:
        self.t = 0
        self.moments: dict[tuple[str, int], list[np.ndarray]] = {}

    def step(self, stacks: dict[str, MlpParams], grads: ParamGrad) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            params = stacks[k].arrays()
            for idx, (p, gp) in enumerate(zip(params, g.arrays())):
                m, v = self.moments.setdefault((k, idx), [np.zeros_like(p), np.zeros_like(p)])
                m *= self.beta1
                m += (1.0 - self.beta1) * gp
                v *= self.beta2
                v += (1.0 - self.beta2) * gp * gp
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            stacks[k].bump()


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return Sgd(lr)
    if name == "adam":
        return Adam(lr)
    raise ValidationError(f"unknown optimizer {name!r}", field="optimizer")


@dataclass
class TrainConfig:
    tau_I: float = 0.5
    tau_C: float = 1.0
    lr: float = 3e-4
    m: float = 0.99
    loss_mode: str = "full_mcc"
    optimizer: str = "sgd"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    use_target: bool = True
    grad_chunk: int = 1
    # +1 adds the entropies as printed; -1 rewards spread-out cluster mass
    # and is what avoids collapse in practice
    entropy_weight: float = -1.0

    def __post_init__(self):
        check_temperature(self.tau_I, "tau_I")
        check_temperature(self.tau_C, "tau_C")
        if self.use_target:
            check_momentum(self.m)
        if self.loss_mode not in LOSS_MODES:
            raise ValidationError(f"unknown loss_mode {self.loss_mode!r}", field="loss_mode")
        if self.lr < 0:
            raise ValidationError("lr must be >= 0", field="lr")


def _nudge(c: np.ndarray) -> np.ndarray:
    return np.where(c == 0.0, ZERO_NUDGE, c)


def four_views(model: MccModel, x_a, x_b, use_target: bool = True) -> FourViewBatch:
    z_aO, c_aO = model.represent(x_a, "online")
    z_bO, c_bO = model.represent(x_b, "online")
    if not use_target:
        return FourViewBatch.from_two_views(z_aO, z_bO, _nudge(c_aO), _nudge(c_bO))
    z_aT, c_aT = model.represent(x_a, "target")
    z_bT, c_bT = model.represent(x_b, "target")
    return FourViewBatch(z_aO, z_bO, z_aT, z_bT,
                         _nudge(c_aO), _nudge(c_bO), _nudge(c_aT), _nudge(c_bT))


def loss_parts(views: FourViewBatch, cfg: TrainConfig) -> tuple[float, float]:
    """Instance part and cluster part (entropies included) of the batch loss.

    With a target network these are the per-client instance and cluster
    losses, whose sum is the MCC loss. Without one (CC) they are the two
    halves of the CC loss.
    """
    v = views
    w = cfg.entropy_weight
    if not cfg.use_target:
        inst = 0.5 * contrastive_loss(v.z_aO, v.z_bO, cfg.tau_I)
        clus = 0.5 * contrastive_loss(v.c_aO, v.c_bO, cfg.tau_C) + w * (
            entropy(v.c_aO) + entropy(v.c_bO))
        return inst, clus
    return (instance_loss_k(v.z_aO, v.z_bT, v.z_aT, v.z_bO, cfg.tau_I),
            cluster_loss_k(v.c_aO, v.c_bT, v.c_aT, v.c_bO, cfg.tau_C, w))


def batch_loss(views: FourViewBatch, cfg: TrainConfig) -> float:
    """The loss that ``cfg.loss_mode`` optimizes."""
    inst, clus = loss_parts(views, cfg)
    if cfg.loss_mode == "instance_only":
        return inst
    if cfg.loss_mode == "cluster_only":
        return clus
    if cfg.use_target:
        return mcc_loss(views, cfg.tau_I, cfg.tau_C, cfg.entropy_weight)
    return cc_loss(views.z_aO, views.z_bO, views.c_aO, views.c_bO, cfg.tau_I, cfg.tau_C,
                   cfg.entropy_weight)


def loss_and_grad(model: MccModel, x_a, x_b, cfg: TrainConfig,
                  meter: ActivationMeter | None = None) -> tuple[float, ParamGrad]:
    """Loss value and its two-pass gradient w.r.t. the trainable online stacks."""
    views = four_views(model, x_a, x_b, cfg.use_target)
    loss = batch_loss(views, cfg)
    model.last_parts = loss_parts(views, cfg)
    cache = build_alpha_cache(views, cfg.tau_I, cfg.tau_C, cfg.loss_mode,
                              version=model.online_version(),
                              entropy_weight=cfg.entropy_weight)
    grads = two_pass_gradient(model, x_a, x_b, cache, MODE_GROUPS[cfg.loss_mode],
                              chunk=cfg.grad_chunk, meter=meter)
    return loss, grads


def mcc_train_step(model: MccModel, x, cfg: TrainConfig, rng: np.random.Generator,
                   optimizer=None) -> float:
    """One batch update of the online network followed by the target EMA.

    Returns the loss evaluated before the update.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise BatchTooSmall("training batch needs at least two samples")
    x_a = augment(x, cfg.augment, rng)
    x_b = augment(x, cfg.augment, rng)
    loss, grads = loss_and_grad(model, x_a, x_b, cfg)
    if optimizer is None:
        optimizer = make_optimizer(cfg.optimizer, cfg.lr)
    optimizer.step(model.online, grads)
    groups = MODE_GROUPS[cfg.loss_mode]
    if cfg.use_target:
        ema_update(model, cfg.m, groups)
    else:
        model.sync_target(groups)
    return loss
