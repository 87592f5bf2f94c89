"""Config loading, synthetic data and end-to-end experiment runs.

Config files are plain ``key = value`` lines; ``#`` starts a comment.
Every key is optional and unknown keys are rejected. See ``configs/`` for
examples and :class:`ExperimentConfig` for the keys and their defaults.
"""

from __future__ import annotations

import csv
import io
import logging
import subprocess
import time
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, load_csv, make_blobs, make_rings, stratified_split
from .errors import ParseError, StageError, ValidationError
from .federated import (
    FederatedConfig,
    FederatedState,
    infer_cluster,
    partition_iid,
    partition_noniid,
    run_stage1,
    run_stage2,
)
from .metrics import evaluate
from .model import AugmentConfig, MccModel, TrainConfig, make_optimizer, mcc_train_step

log = logging.getLogger(__name__)

MODES = ("mcc", "cc", "fedmcc")
DATASETS = ("blobs", "rings", "file")


@dataclass
class ExperimentConfig:
    seed: int = 0
    # data
    dataset: str = "blobs"
    k: int = 3
    n_per_class: int = 200
    test_per_class: int = 100
    dim: int = 2
    sep: float = 6.0
    path: str = ""
    # model
    mode: str = "mcc"
    hidden: int = 64
    d1: int = 128
    d2: int = 0  # 0 means "number of classes in the dataset"
    # optimisation
    n: int = 128
    tau_I: float = 0.5
    tau_C: float = 1.0
    m: float = 0.99
    lr: float = 0.0003
    optimizer: str = "adam"
    entropy_weight: float = -1.0
    grad_chunk: int = 1
    epochs: int = 100
    # federated
    K: int = 5
    R: int = 100
    R_cluster: int = 10
    E: int = 5
    partition: str = "iid"
    workers: int = 1
    # augmentation
    noise_sigma: float = 0.5
    mask_prob: float = 0.0
    scale_lo: float = 0.8
    scale_hi: float = 1.2
    # output
    eval_every: int = 1
    output_dir: str = "runs/default"
    record_timing: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def fail(name, msg):
            raise ValidationError(f"{name} {msg}", field=name)

        for name in ("tau_I", "tau_C"):
            if not getattr(self, name) > 0:
                fail(name, "must be > 0")
        if not 0 < self.m < 1:
            fail("m", "must lie in (0, 1)")
        if self.lr < 0:
            fail("lr", "must be >= 0")
        for name, low in (("n", 2), ("K", 1), ("E", 1), ("R", 0), ("R_cluster", 0),
                          ("epochs", 0), ("hidden", 1), ("d1", 1), ("d2", 0), ("dim", 1),
                          ("n_per_class", 1), ("test_per_class", 1), ("eval_every", 1),
                          ("grad_chunk", 1), ("workers", 1)):
            if getattr(self, name) < low:
                fail(name, f"must be >= {low}")
        if self.mode not in MODES:
            fail("mode", f"must be one of {', '.join(MODES)}")
        if self.dataset not in DATASETS:
            fail("dataset", f"must be one of {', '.join(DATASETS)}")
        if self.optimizer not in ("sgd", "adam"):
            fail("optimizer", "must be sgd or adam")
        if self.partition not in ("iid", "noniid"):
            fail("partition", "must be iid or noniid")
        if self.dataset != "file":
            if self.k < 2:
                fail("k", "must be >= 2")
            if not self.sep > 0:
                fail("sep", "must be > 0")
            if self.d2 not in (0, self.k):
                fail("d2", f"must equal the number of clusters k={self.k}")
        elif not Path(self.path).is_file():
            fail("path", f"does not exist: {self.path!r}")
        if not 0 <= self.mask_prob < 1:
            fail("mask_prob", "must lie in [0, 1)")
        if self.noise_sigma < 0:
            fail("noise_sigma", "must be >= 0")
        if not 0 < self.scale_lo <= self.scale_hi:
            fail("scale_lo", "and scale_hi need 0 < scale_lo <= scale_hi")

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.noise_sigma, self.mask_prob, (self.scale_lo, self.scale_hi))

    def to_text(self) -> str:
        lines = [f"# fedmcc {__version__} experiment config"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str, lineno: int):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ParseError(f"{key}: cannot read {raw!r} as {kind}", line=lineno) from None
    return raw.strip("\"'")


def parse_config(text: str, **overrides) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", line=lineno)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValidationError(f"unknown key {key!r} (line {lineno})", field=key)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", line=lineno)
        values[key] = _convert(key, raw, lineno)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), **overrides)


class RunRecord:
    """Append-only table of logged training and evaluation events."""

    COLUMNS = ("round", "client_or_global", "loss_instance", "loss_cluster",
               "ACC", "NMI", "ARI", "wall_ms")

    def __init__(self):
        self.rows: list[dict] = []

    def append(self, **row) -> None:
        unknown = set(row) - set(self.COLUMNS)
        if unknown:
            raise ValueError(f"unknown RunRecord columns {sorted(unknown)}")
        self.rows.append({c: row.get(c) for c in self.COLUMNS})

    def __len__(self) -> int:
        return len(self.rows)

    def last_eval(self) -> dict | None:
        for row in reversed(self.rows):
            if row["ACC"] is not None:
                return row
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for row in self.rows:
            writer.writerow(["" if row[c] is None else
                             repr(float(row[c])) if isinstance(row[c], (float, np.floating))
                             else row[c] for c in self.COLUMNS])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_csv().encode("utf-8"))


def version_string() -> str:
    """``git describe``-style identifier of the code that produced a run."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def build_dataset(cfg: ExperimentConfig, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Train and held-out splits; held-out gets ``test_per_class`` samples of each class."""
    if cfg.dataset == "file":
        data = load_csv(cfg.path)
    else:
        gen = make_blobs if cfg.dataset == "blobs" else make_rings
        data = gen(cfg.k, cfg.n_per_class + cfg.test_per_class, cfg.dim, cfg.sep, rng)
    return stratified_split(data, cfg.test_per_class, rng)


@dataclass
class RunResult:
    record: RunRecord
    checkpoint: Path
    model: MccModel
    final: dict | None


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.start = time.perf_counter()

    def ms(self):
        return round((time.perf_counter() - self.start) * 1000.0, 3) if self.enabled else None


@contextmanager
def _stage(name: str):
    """Re-raise any failure inside the block as a StageError naming ``name``."""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _evaluate(model: MccModel, test: Dataset) -> dict:
    pred = infer_cluster(model.online["f"], model.online["g_C"], test.x)
    return evaluate(pred, test.labels)


def _train_centralized(cfg, model, train, test, record, clock, rng):
    tcfg = TrainConfig(
        tau_I=cfg.tau_I, tau_C=cfg.tau_C, lr=cfg.lr, m=cfg.m, loss_mode="full_mcc",
        optimizer=cfg.optimizer, augment=cfg.augment, use_target=cfg.mode == "mcc",
        grad_chunk=cfg.grad_chunk, entropy_weight=cfg.entropy_weight,
    )
    optimizer = make_optimizer(cfg.optimizer, cfg.lr)
    n_batches = len(train) // cfg.n
    if cfg.epochs > 0 and n_batches == 0:
        raise ValidationError(f"{len(train)} training samples < batch size {cfg.n}", field="n")
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train))
        parts = []
        for b in range(n_batches):
            mcc_train_step(model, train.x[perm[b * cfg.n:(b + 1) * cfg.n]], tcfg, rng, optimizer)
            parts.append(model.last_parts)
        inst, clus = np.mean(np.asarray(parts), axis=0)
        scores = _evaluate(model, test) if epoch % cfg.eval_every == 0 or epoch == cfg.epochs else {}
        record.append(round=epoch, client_or_global="global", loss_instance=float(inst),
                      loss_cluster=float(clus), wall_ms=clock.ms(), **scores)
        if scores:
            log.info("epoch %d: ACC %.4f NMI %.4f ARI %.4f", epoch,
                     scores["ACC"], scores["NMI"], scores["ARI"])


def _train_federated(cfg, state: FederatedState, fcfg: FederatedConfig, test, record, clock):
    total_rounds = cfg.R + cfg.R_cluster

    def on_round(row):
        rnd = row["round"] + 1 + (cfg.R if row["stage"] == 2 else 0)
        for k, (inst, clus) in enumerate(row["client_parts"]):
            record.append(round=rnd, client_or_global=f"client{k}", loss_instance=inst,
                          loss_cluster=clus, wall_ms=clock.ms())
        if rnd % cfg.eval_every == 0 or rnd == total_rounds:
            record.append(round=rnd, client_or_global="global", wall_ms=clock.ms(),
                          **_evaluate(state.server, test))

    with _stage("stage1"):
        f_star = run_stage1(state, fcfg, on_round=on_round)
    if cfg.R_cluster > 0:
        with _stage("stage2"):
            run_stage2(state, fcfg, f_star.copy(), on_round=on_round,
                       rng=np.random.default_rng([fcfg.seed, 2]))


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> RunResult:
    """Train per ``cfg.mode``, evaluate on held-out points, write artifacts.

    Writes ``metrics.csv``, ``model.ckpt``, ``config.cfg`` and
    ``provenance.txt`` under the output directory.
    """
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    data_rng, part_rng, init_rng, train_rng = (np.random.default_rng(s) for s in seeds)
    record = RunRecord()
    clock = _Clock(cfg.record_timing)

    with _stage("data"):
        train, test = build_dataset(cfg, data_rng)
        k = int(np.unique(np.concatenate([train.labels, test.labels])).size)
        d2 = cfg.d2 or k

    if cfg.mode in ("mcc", "cc"):
        with _stage("init"):
            model = MccModel.create(train.x.shape[1], d2, init_rng, hidden=cfg.hidden, d1=cfg.d1)
            record.append(round=0, client_or_global="global", wall_ms=clock.ms(),
                          **_evaluate(model, test))
        with _stage("train"):
            _train_centralized(cfg, model, train, test, record, clock, train_rng)
    else:
        with _stage("partition"):
            clients = (partition_iid(train, cfg.K, part_rng) if cfg.partition == "iid"
                       else partition_noniid(train, cfg.K))
        with _stage("init"):
            state = FederatedState.create(clients, d2, init_rng, hidden=cfg.hidden, d1=cfg.d1)
            fcfg = FederatedConfig(
                K=cfg.K, R=cfg.R, E=cfg.E, n=cfg.n, tau_I=cfg.tau_I, tau_C=cfg.tau_C, m=cfg.m,
                lr=cfg.lr, partition=cfg.partition, R_cluster=cfg.R_cluster,
                optimizer=cfg.optimizer, augment=cfg.augment,
                entropy_weight=cfg.entropy_weight, grad_chunk=cfg.grad_chunk,
                workers=cfg.workers, seed=int(seeds[3].generate_state(1)[0]),
            )
            record.append(round=0, client_or_global="global", wall_ms=clock.ms(),
                          **_evaluate(state.server, test))
        _train_federated(cfg, state, fcfg, test, record, clock)
        model = state.server

    with _stage("write"):
        ckpt = out / "model.ckpt"
        ckpt.write_bytes(model.to_bytes())
        record.write(out / "metrics.csv")
        (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
        (out / "provenance.txt").write_text(
            f"version = {version_string()}\nseed = {cfg.seed}\nmode = {cfg.mode}\n",
            encoding="utf-8",
        )
    return RunResult(record, ckpt, model, record.last_eval())
