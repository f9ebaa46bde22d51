"""Multi-task hinge training with Adam, ablation wiring and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import BehaviorGraph, DataError, InteractionTensor, SplitDataset, TrainBatch, sample_batch
from .gnn import EmbeddingState
from .model import MBGMN, ModelConfig

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001)
BATCH_GRID = (32, 128, 256, 512)
LAYER_GRID = (1, 2, 3)
ABLATION_FLAGS = ("lowR", "mFeat", "mTask", "metaC", "metaP")


class NumericalError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    dim: int = 16
    low_rank_dim: int = 4
    heads: int = 2
    layers: int = 2
    lr: float = 1e-3
    lr_decay: float = 0.96
    weight_decay: float = 0.001
    batch_size: int = 32
    samples_per_user: int = 2
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ablate: tuple[str, ...] = ()
    drop_behaviors: tuple[str, ...] = ()
    target_only: bool = False
    track_users: tuple[int, ...] = ()
    off_grid: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ablate", tuple(sorted(set(self.ablate))))
        object.__setattr__(self, "drop_behaviors", tuple(self.drop_behaviors))
        object.__setattr__(self, "track_users", tuple(int(u) for u in self.track_users))
        unknown = set(self.ablate) - set(ABLATION_FLAGS)
        if unknown:
            raise ValueError(f"unknown ablation flag(s) {sorted(unknown)}; choose from {ABLATION_FLAGS}")
        if self.samples_per_user < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("samples_per_user and batch_size must be >= 1, epochs >= 0")
        if not self.off_grid:
            if self.weight_decay not in LAMBDA_GRID:
                raise ValueError(f"weight_decay {self.weight_decay} not in {LAMBDA_GRID} (set off_grid to override)")
            if self.batch_size not in BATCH_GRID:
                raise ValueError(f"batch_size {self.batch_size} not in {BATCH_GRID} (set off_grid to override)")
            if self.layers not in LAYER_GRID:
                raise ValueError(f"layers {self.layers} not in {LAYER_GRID} (set off_grid to override)")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("ablate", "drop_behaviors", "track_users"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("ablate", "drop_behaviors", "track_users"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class Wiring:
    """What a config switches on: model layout, loss terms, kept behaviors."""

    model: ModelConfig
    multi_task: bool
    behaviors: tuple[str, ...]
    target: str


def apply_ablation(cfg: TrainConfig, behaviors: Sequence[str], target: str) -> Wiring:
    behaviors = tuple(behaviors)
    if target not in behaviors:
        raise DataError(f"target {target!r} not in {behaviors}")
    unknown = set(cfg.drop_behaviors) - set(behaviors)
    if unknown:
        raise DataError(f"cannot drop unknown behavior(s) {sorted(unknown)}")
    if target in cfg.drop_behaviors:
        raise DataError(f"behavior masks drop the target behavior {target!r}")
    kept = (target,) if cfg.target_only else tuple(b for b in behaviors if b not in cfg.drop_behaviors)
    flags = set(cfg.ablate)
    model = ModelConfig(
        dim=cfg.dim,
        low_rank_dim=cfg.low_rank_dim,
        heads=cfg.heads,
        layers=cfg.layers,
        low_rank="lowR" not in flags,
        multi_feature="mFeat" not in flags,
        meta_context="metaC" not in flags,
        meta_prediction="metaP" not in flags,
    )
    return Wiring(model, "mTask" not in flags, kept, target)


# --------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, shapes: dict[str, tuple[int, ...]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.step_count = 0

    def step(self, params: dict[str, ad.Tensor], lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# loss


@dataclass
class LossResult:
    total: ad.Tensor
    hinge: np.ndarray
    users: np.ndarray
    sources: np.ndarray
    targets: np.ndarray

    @property
    def n_terms(self) -> int:
        return len(self.hinge)


def loss(
    model: MBGMN,
    state: EmbeddingState,
    batch: TrainBatch,
    weight_decay: float,
    multi_task: bool = True,
) -> LossResult:
    """Summed pairwise hinge over tuples and source channels plus ``weight_decay * ||theta||^2``.

    Without ``multi_task`` only the global channel serves as the source.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    k_global = model.num_behaviors
    sources = np.arange(k_global + 1) if multi_task else np.array([k_global])
    r = len(batch) * len(sources)
    src = np.tile(sources, len(batch))
    users = np.repeat(batch.users, len(sources))
    tgts = np.repeat(batch.targets, len(sources))
    pos = np.repeat(batch.positives, len(sources))
    neg = np.repeat(batch.negatives, len(sources))
    scores = model.score(
        state,
        np.concatenate([users, users]),
        np.concatenate([pos, neg]),
        np.concatenate([src, src]),
        np.concatenate([tgts, tgts]),
    )
    pair = ad.reshape(scores, (2, r))
    margin = 1.0 - ad.take(pair, 0) + ad.take(pair, 1)
    hinge = ad.leaky_relu(margin, 0.0)
    total = ad.sum_axis(hinge)
    if weight_decay:
        total = total + ad.scale(model.weight_norm(), weight_decay)
    return LossResult(total, hinge.value.copy(), users, src, tgts)


# --------------------------------------------------------------------------
# training state and loop


@dataclass
class EpochLog:
    epoch: int
    lr: float
    mean_loss: float
    mean_hinge: float
    n_terms: int
    attribution: list  # (K+1) x K mean hinge, None where no terms
    counts: list
    user_attribution: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EpochLog":
        d = json.loads(line)
        d["user_attribution"] = {int(k): v for k, v in d.get("user_attribution", {}).items()}
        return cls(**d)


@dataclass
class TrainState:
    model: MBGMN
    optimizer: Adam
    lr: float
    epoch: int = 0
    best_metric: float | None = None
    logs: list = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.optimizer.step_count

    @classmethod
    def fresh(cls, wiring: Wiring, cfg: TrainConfig, num_users: int, num_items: int) -> "TrainState":
        model = MBGMN(wiring.model, num_users, num_items, len(wiring.behaviors), seed=cfg.seed)
        opt = Adam({k: p.shape for k, p in model.params.items()}, cfg.beta1, cfg.beta2, cfg.eps)
        return cls(model, opt, cfg.lr)


def _matrix(sums: np.ndarray, counts: np.ndarray) -> list:
    return [
        [float(s / c) if c else None for s, c in zip(srow, crow)]
        for srow, crow in zip(sums, counts)
    ]


def batch_seed(seed: int, epoch: int, batch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, batch])


def train_epoch(
    split: SplitDataset,
    graphs: BehaviorGraph,
    state: TrainState,
    cfg: TrainConfig,
    multi_task: bool = True,
) -> EpochLog:
    train = split.train
    k = train.num_behaviors
    targets = list(range(k)) if multi_task else [train.target]
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, state.epoch])).permutation(train.num_users)
    sums = np.zeros((k + 1, k))
    counts = np.zeros((k + 1, k), dtype=np.int64)
    track = set(cfg.track_users)
    user_sums = {u: np.zeros((k + 1, k)) for u in track}
    user_counts = {u: np.zeros((k + 1, k), dtype=np.int64) for u in track}
    total, n_terms, hinge_sum = 0.0, 0, 0.0
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        users = order[start : start + cfg.batch_size]
        seed = batch_seed(cfg.seed, state.epoch, b)
        batch = sample_batch(train, users, cfg.samples_per_user, seed, targets)
        if len(batch) == 0:
            continue
        emb = state.model.forward(graphs)
        res = loss(state.model, emb, batch, cfg.weight_decay, multi_task)
        value = float(res.total.value)
        if not math.isfinite(value):
            raise NumericalError(
                f"non-finite loss {value} at epoch {state.epoch} batch {b} (seed {cfg.seed})"
            )
        ad.backward(res.total)
        state.optimizer.step(state.model.params, state.lr)
        np.add.at(sums, (res.sources, res.targets), res.hinge)
        np.add.at(counts, (res.sources, res.targets), 1)
        for u in track.intersection(np.unique(res.users).tolist()):
            m = res.users == u
            np.add.at(user_sums[u], (res.sources[m], res.targets[m]), res.hinge[m])
            np.add.at(user_counts[u], (res.sources[m], res.targets[m]), 1)
        total += value
        hinge_sum += float(res.hinge.sum())
        n_terms += res.n_terms
    entry = EpochLog(
        epoch=state.epoch + 1,
        lr=state.lr,
        mean_loss=total / n_terms if n_terms else 0.0,
        mean_hinge=hinge_sum / n_terms if n_terms else 0.0,
        n_terms=n_terms,
        attribution=_matrix(sums, counts),
        counts=counts.tolist(),
        user_attribution={u: _matrix(user_sums[u], user_counts[u]) for u in sorted(track)},
    )
    state.epoch += 1
    state.lr *= cfg.lr_decay
    state.logs.append(entry)
    log.info("epoch %d lr %.3g mean loss %.5f", entry.epoch, entry.lr, entry.mean_loss)
    return entry


def prepare(data: InteractionTensor, cfg: TrainConfig) -> tuple[InteractionTensor, Wiring]:
    """Apply behavior masks to ``data`` and resolve the module wiring."""
    wiring = apply_ablation(cfg, data.behaviors, data.target_name)
    if wiring.behaviors != data.behaviors:
        data = data.keep_behaviors(wiring.behaviors)
    return data, wiring


def fit(
    split: SplitDataset,
    graphs: BehaviorGraph,
    cfg: TrainConfig,
    wiring: Wiring,
    epochs: int | None = None,
    state: TrainState | None = None,
    log_path=None,
    on_epoch: Callable[[TrainState, EpochLog], None] | None = None,
) -> TrainState:
    """Train for ``epochs`` more epochs (default ``cfg.epochs``), appending JSON lines to ``log_path``."""
    if state is None:
        state = TrainState.fresh(wiring, cfg, split.train.num_users, split.train.num_items)
    n = cfg.epochs if epochs is None else epochs
    fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for _ in range(n):
            entry = train_epoch(split, graphs, state, cfg, wiring.multi_task)
            if fh:
                fh.write(entry.to_json() + "\n")
                fh.flush()
            if on_epoch:
                on_epoch(state, entry)
    finally:
        if fh:
            fh.close()
    return state


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"MBGMNCKP"
FORMAT_VERSION = 1
_DIGEST = 32


def checkpoint(state: TrainState, path, meta: dict | None = None) -> None:
    """Write params, Adam moments and counters with a trailing SHA-256."""
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.model.params.items():
        arrays[f"param/{name}"] = p.value
        arrays[f"adam_m/{name}"] = state.optimizer.m[name]
        arrays[f"adam_v/{name}"] = state.optimizer.v[name]
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "entries": entries,
        "step": state.step,
        "epoch": state.epoch,
        "lr": state.lr,
        "best_metric": state.best_metric,
        "model_config": state.model.cfg.to_dict(),
        "num_users": state.model.num_users,
        "num_items": state.model.num_items,
        "num_behaviors": state.model.num_behaviors,
        "adam": [state.optimizer.beta1, state.optimizer.beta2, state.optimizer.eps],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 12 + _DIGEST or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + hlen].decode("utf-8"))
    payload = body[start + hlen :]
    arrays = {}
    for e in header["entries"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return header, arrays


def restore(path) -> TrainState:
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig(**header["model_config"])
    model = MBGMN(cfg, header["num_users"], header["num_items"], header["num_behaviors"])
    model.load_state_dict({k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")})
    b1, b2, eps = header["adam"]
    opt = Adam({k: p.shape for k, p in model.params.items()}, b1, b2, eps)
    for name in model.params:
        opt.m[name][...] = arrays[f"adam_m/{name}"]
        opt.v[name][...] = arrays[f"adam_v/{name}"]
    opt.step_count = header["step"]
    return TrainState(model, opt, header["lr"], header["epoch"], header["best_metric"])


def checkpoint_meta(path) -> dict:
    return read_checkpoint(path)[0]["meta"]


__all__ = [
    "TrainConfig",
    "TrainState",
    "Wiring",
    "Adam",
    "EpochLog",
    "LossResult",
    "apply_ablation",
    "prepare",
    "loss",
    "train_epoch",
    "fit",
    "checkpoint",
    "restore",
    "read_checkpoint",
    "CheckpointError",
    "NumericalError",
]
