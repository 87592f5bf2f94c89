"""In-process simulation of the two-stage FedMCC protocol.

Stage one trains the encoder and instance projector with the instance-level
loss on every client and averages them at the server. Stage two freezes the
global encoder and trains only the cluster head with the cluster-level loss.
Only online parameters travel between server and clients; every transfer goes
through a :class:`Transport` as checkpoint bytes.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import Dataset
from .errors import EmptyDataset, IndivisibleClasses, ValidationError
from .mlp import Layer, MlpParams, check_same_shape, forward, init_mlp
from .model import AugmentConfig, MccModel, TrainConfig, make_optimizer, mcc_train_step
from .serialize import deserialize_stacks, serialize_stacks

log = logging.getLogger(__name__)

STAGE1, STAGE2 = 1, 2


@dataclass
class ClientDataset:
    client_id: int
    data: Dataset

    def __post_init__(self):
        if len(self.data) == 0:
            raise EmptyDataset(f"client {self.client_id} has no samples")

    def __len__(self) -> int:
        return len(self.data)


def partition_iid(dataset: Dataset, K: int, rng: np.random.Generator) -> list[ClientDataset]:
    """Shuffle each class, then deal its samples round-robin across clients.

    The dealing position carries over between classes, so both per-class
    counts and client totals differ by at most one.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot partition an empty dataset")
    if K < 1:
        raise ValidationError("K must be >= 1", field="K")
    buckets: list[list[int]] = [[] for _ in range(K)]
    pos = 0
    for c in np.unique(dataset.labels):
        for idx in rng.permutation(np.flatnonzero(dataset.labels == c)):
            buckets[pos % K].append(int(idx))
            pos += 1
    return [ClientDataset(k, dataset.subset(np.sort(b))) for k, b in enumerate(buckets)]


def partition_noniid(dataset: Dataset, K: int) -> list[ClientDataset]:
    """Client ``k`` receives every sample of the contiguous class block ``[k C/K, (k+1) C/K)``."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot partition an empty dataset")
    classes = np.unique(dataset.labels)
    C = classes.size
    if K < 1 or C % K != 0:
        raise IndivisibleClasses(f"{C} classes cannot be split evenly over {K} clients")
    per = C // K
    out = []
    for k in range(K):
        block = classes[k * per:(k + 1) * per]
        out.append(ClientDataset(k, dataset.subset(np.flatnonzero(np.isin(dataset.labels, block)))))
    return out


def aggregation_weights(sizes) -> list[Fraction]:
    total = sum(int(s) for s in sizes)
    if total <= 0:
        raise ValidationError("total aggregation weight must be > 0")
    return [Fraction(int(s), total) for s in sizes]


def federated_average(parts) -> MlpParams:
    """Dataset-size-weighted average of shape-identical stacks.

    ``parts`` is a sequence of ``(params, weight)``. Terms are summed in a
    canonical order (by weight, then parameter bytes) so the result does not
    depend on the order of ``parts``.
    """
    parts = list(parts)
    if not parts:
        raise ValidationError("nothing to average")
    first = parts[0][0]
    for p, _ in parts[1:]:
        check_same_shape(first, p)
    weights = [float(w) for w in aggregation_weights([w for _, w in parts])]
    order = sorted(range(len(parts)),
                   key=lambda i: (weights[i], parts[i][0].flat().tobytes()))
    layers = []
    for li, ref in enumerate(first.layers):
        w = np.zeros_like(ref.weight)
        b = np.zeros_like(ref.bias)
        for i in order:
            layer = parts[i][0].layers[li]
            w += weights[i] * layer.weight
            b += weights[i] * layer.bias
        layers.append(Layer(w, b, ref.activation))
    return MlpParams(layers)


class Transport:
    """Moves parameter stacks between server and clients as checkpoint bytes."""

    def __init__(self):
        self.bytes_sent = 0
        self._lock = threading.Lock()

    def send(self, stacks: dict[str, MlpParams]) -> bytes:
        blob = serialize_stacks(stacks)
        with self._lock:
            self.bytes_sent += len(blob)
        return blob

    def receive(self, blob: bytes) -> dict[str, MlpParams]:
        return deserialize_stacks(blob)

    def transfer(self, stacks: dict[str, MlpParams]) -> dict[str, MlpParams]:
        return self.receive(self.send(stacks))


@dataclass
class FederatedConfig:
    K: int = 2
    R: int = 10
    E: int = 5
    n: int = 128
    tau_I: float = 0.5
    tau_C: float = 1.0
    m: float = 0.99
    lr: float = 3e-4
    partition: str = "iid"
    R_cluster: int | None = None  # stage-two rounds; defaults to R
    optimizer: str = "adam"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    entropy_weight: float = -1.0
    grad_chunk: int = 1
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        for name, low in (("K", 1), ("R", 0), ("E", 1), ("n", 2)):
            if getattr(self, name) < low:
                raise ValidationError(f"{name} must be >= {low}", field=name)
        if self.partition not in ("iid", "noniid"):
            raise ValidationError("partition must be iid or noniid", field="partition")

    @property
    def cluster_rounds(self) -> int:
        return self.R if self.R_cluster is None else self.R_cluster

    def train_config(self, loss_mode: str) -> TrainConfig:
        return TrainConfig(
            tau_I=self.tau_I, tau_C=self.tau_C, lr=self.lr, m=self.m,
            loss_mode=loss_mode, optimizer=self.optimizer, augment=self.augment,
            grad_chunk=self.grad_chunk, entropy_weight=self.entropy_weight,
        )


@dataclass
class FederatedState:
    server: MccModel
    clients: list[MccModel]
    datasets: list[ClientDataset]
    round: int = 0
    history: list[dict] = field(default_factory=list)
    transport: Transport = field(default_factory=Transport)

    @classmethod
    def create(cls, datasets: list[ClientDataset], n_clusters: int, rng: np.random.Generator,
               hidden: int = 64, d1: int = 16) -> "FederatedState":
        in_dim = datasets[0].data.x.shape[1]
        server = MccModel.create(in_dim, n_clusters, rng, hidden=hidden, d1=d1)
        return cls(server, [server.copy() for _ in datasets], list(datasets))

    @property
    def sizes(self) -> list[int]:
        return [len(d) for d in self.datasets]


def client_rng(seed: int, stage: int, rnd: int, client: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, rnd, client])


def local_training(model: MccModel, data: Dataset, cfg: FederatedConfig, tcfg: TrainConfig,
                   rng: np.random.Generator) -> list[tuple[float, float]]:
    """``E`` local epochs of size-``n`` batches; an incomplete last batch is dropped.

    Returns the (instance, cluster) loss parts of every step.
    """
    optimizer = make_optimizer(tcfg.optimizer, tcfg.lr)
    n_batches = len(data) // cfg.n
    if n_batches == 0:
        raise ValidationError(f"client has {len(data)} samples, fewer than batch size {cfg.n}")
    losses = []
    for _ in range(cfg.E):
        perm = rng.permutation(len(data))
        for b in range(n_batches):
            batch = data.x[perm[b * cfg.n:(b + 1) * cfg.n]]
            mcc_train_step(model, batch, tcfg, rng, optimizer)
            losses.append(model.last_parts)
    return losses


def _run_round(state: FederatedState, cfg: FederatedConfig, stage: int,
               shared: tuple[str, ...], tcfg: TrainConfig) -> list[tuple[float, float]]:
    """Broadcast ``shared`` stacks, train every client, aggregate.

    Returns every client's mean (instance, cluster) loss parts for the round.
    """
    rnd = state.round
    blob = state.transport.send({k: state.server.online[k] for k in shared})

    def work(k: int) -> tuple[dict[str, MlpParams], tuple[float, float]]:
        client = state.clients[k]
        received = state.transport.receive(blob)
        for name, params in received.items():
            client.online[name].assign(params)
        # target re-seeded from the received online params every round
        client.sync_target()
        losses = local_training(client, state.datasets[k].data, cfg, tcfg,
                                client_rng(cfg.seed, stage, rnd, k))
        returned = state.transport.transfer({name: client.online[name] for name in shared})
        inst, clus = np.mean(np.asarray(losses), axis=0)
        return returned, (float(inst), float(clus))

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(work, range(len(state.clients))))
    else:
        results = [work(k) for k in range(len(state.clients))]

    # barrier: aggregate in client-index order
    for name in shared:
        avg = federated_average([(res[name], size) for (res, _), size in zip(results, state.sizes)])
        state.server.online[name].assign(avg)
        state.server.target[name].assign(avg)
    return [parts for _, parts in results]


def run_stage1(state: FederatedState, cfg: FederatedConfig, on_round=None) -> MlpParams:
    """Representation learning: ``R`` rounds on the instance-level loss; returns the global encoder."""
    tcfg = cfg.train_config("instance_only")
    for r in range(cfg.R):
        state.round = r
        parts = _run_round(state, cfg, STAGE1, ("f", "g_I"), tcfg)
        row = {"stage": STAGE1, "round": r, "client_parts": parts,
               "client_losses": [p[0] for p in parts]}
        state.history.append(row)
        log.info("stage 1 round %d: mean client loss %.5f", r, float(np.mean(row["client_losses"])))
        if on_round is not None:
            on_round(row)
    return state.server.online["f"]


def run_stage2(state: FederatedState, cfg: FederatedConfig, frozen_f: MlpParams,
               on_round=None, rng: np.random.Generator | None = None) -> MlpParams:
    """Clustering: freeze ``frozen_f`` everywhere, freshly initialize and train the cluster head."""
    server = state.server
    server.online["f"].assign(frozen_f)
    server.target["f"].assign(frozen_f)
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, STAGE2])
    g_c = server.online["g_C"]
    dims = [g_c.in_dim] + [l.weight.shape[0] for l in g_c.layers]
    fresh = init_mlp(dims, rng)
    server.online["g_C"].assign(fresh)
    server.target["g_C"].assign(fresh)
    f_blob = state.transport.send({"f": frozen_f})
    for client in state.clients:
        received = state.transport.receive(f_blob)["f"]
        client.online["f"].assign(received)
        client.target["f"].assign(received)
    tcfg = cfg.train_config("cluster_only")
    for r in range(cfg.cluster_rounds):
        state.round = r
        parts = _run_round(state, cfg, STAGE2, ("g_C",), tcfg)
        row = {"stage": STAGE2, "round": r, "client_parts": parts,
               "client_losses": [p[1] for p in parts]}
        state.history.append(row)
        log.info("stage 2 round %d: mean client loss %.5f", r, float(np.mean(row["client_losses"])))
        if on_round is not None:
            on_round(row)
    return server.online["g_C"]


def infer_cluster(f: MlpParams, g_c: MlpParams, x):
    """Index of the largest cluster-head output; ties go to the lowest index.

    Returns an ``int`` for a single vector, an int array for a batch of rows.
    """
    _, h = forward(f, x)
    _, o = forward(g_c, h)
    return int(np.argmax(o)) if np.ndim(o) == 1 else np.argmax(o, axis=1)
