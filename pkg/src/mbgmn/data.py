"""Multi-behavior interaction data: loading, graphs, splitting and sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import SparseMatrix

log = logging.getLogger(__name__)

N_EVAL_NEGATIVES = 99

DEFAULT_BEHAVIORS = {
    1: ("buy",),
    2: ("view", "buy"),
    3: ("view", "cart", "buy"),
    4: ("view", "fav", "cart", "buy"),
}


class DataError(ValueError):
    """Raised for unreadable or inconsistent interaction data."""


@dataclass(frozen=True)
class InteractionTensor:
    """Binary user x item x behavior tensor stored as an event list.

    ``timestamps`` holds NaN where an event has no time. ``user_ids`` and
    ``item_ids`` map internal indices back to external ids.
    """

    num_users: int
    num_items: int
    behaviors: tuple[str, ...]
    target: int
    users: np.ndarray
    items: np.ndarray
    kinds: np.ndarray
    timestamps: np.ndarray
    user_ids: tuple[str, ...] | None = None
    item_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        for name in ("users", "items", "kinds"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        ts = self.timestamps
        if ts is None:
            ts = np.full(len(self.users), np.nan)
        object.__setattr__(self, "timestamps", np.asarray(ts, dtype=np.float64))
        object.__setattr__(self, "behaviors", tuple(self.behaviors))
        n = len(self.users)
        if not (len(self.items) == len(self.kinds) == len(self.timestamps) == n):
            raise DataError("event arrays differ in length")
        if self.num_users <= 0 or self.num_items <= 0 or not self.behaviors:
            raise DataError("tensor dimensions must be positive")
        if not 0 <= self.target < len(self.behaviors):
            raise DataError(f"target index {self.target} outside [0, {len(self.behaviors)})")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise DataError("item index out of range")
            if self.kinds.min() < 0 or self.kinds.max() >= len(self.behaviors):
                raise DataError("behavior index out of range")
            if len(np.unique(self._keys)) != n:
                raise DataError("duplicate (user, item, behavior) events")

    @property
    def _keys(self) -> np.ndarray:
        return (self.kinds * self.num_users + self.users) * self.num_items + self.items

    @property
    def num_behaviors(self) -> int:
        return len(self.behaviors)

    @property
    def num_events(self) -> int:
        return len(self.users)

    @property
    def target_name(self) -> str:
        return self.behaviors[self.target]

    def behavior_index(self, name: str) -> int:
        try:
            return self.behaviors.index(name)
        except ValueError:
            raise DataError(f"unknown behavior {name!r}; known: {', '.join(self.behaviors)}") from None

    @cached_property
    def adjacency(self) -> tuple[SparseMatrix, ...]:
        """Binary user x item adjacency per behavior (column indices sorted)."""
        out = []
        for k in range(self.num_behaviors):
            m = self.kinds == k
            out.append(SparseMatrix.from_coo(self.num_users, self.num_items, self.users[m], self.items[m]))
        return tuple(out)

    def user_items(self, user: int, behavior: int) -> np.ndarray:
        adj = self.adjacency[behavior]
        return adj.indices[adj.indptr[user] : adj.indptr[user + 1]]

    def all_user_items(self, user: int) -> np.ndarray:
        return np.unique(np.concatenate([self.user_items(user, k) for k in range(self.num_behaviors)]))

    def events_per_user(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.num_users)

    def select(self, mask: np.ndarray) -> "InteractionTensor":
        return InteractionTensor(
            self.num_users,
            self.num_items,
            self.behaviors,
            self.target,
            self.users[mask],
            self.items[mask],
            self.kinds[mask],
            self.timestamps[mask],
            self.user_ids,
            self.item_ids,
        )

    def keep_behaviors(self, names: Sequence[str]) -> "InteractionTensor":
        """Restrict to ``names`` (in their existing order); the target must survive."""
        keep = [k for k, b in enumerate(self.behaviors) if b in set(names)]
        if self.target not in keep:
            raise DataError(f"cannot drop the target behavior {self.target_name!r}")
        remap = np.full(self.num_behaviors, -1)
        remap[keep] = np.arange(len(keep))
        m = np.isin(self.kinds, keep)
        return InteractionTensor(
            self.num_users,
            self.num_items,
            tuple(self.behaviors[k] for k in keep),
            int(remap[self.target]),
            self.users[m],
            self.items[m],
            remap[self.kinds[m]],
            self.timestamps[m],
            self.user_ids,
            self.item_ids,
        )

    def summary(self) -> dict:
        return {
            "users": self.num_users,
            "items": self.num_items,
            "behaviors": list(self.behaviors),
            "target": self.target_name,
            "events": self.num_events,
        }


# --------------------------------------------------------------------------
# io


def load_interactions(
    path,
    behaviors: Sequence[str],
    target: str,
    format: str = "tsv",
) -> InteractionTensor:
    """Read ``user<TAB>item<TAB>behavior[<TAB>unix-seconds]`` lines.

    Ids are remapped to contiguous indices in order of first appearance.
    Repeated (user, item, behavior) triples collapse to one event that keeps
    the latest timestamp.
    """
    if format != "tsv":
        raise DataError(f"unsupported format {format!r}")
    behaviors = tuple(behaviors)
    if target not in behaviors:
        raise DataError(f"target behavior {target!r} is not among {behaviors}")
    bidx = {b: k for k, b in enumerate(behaviors)}
    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    events: dict[tuple[int, int, int], float] = {}
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4) or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected user, item, behavior[, timestamp]")
            u, i, b = parts[:3]
            if b not in bidx:
                raise DataError(f"{path}:{lineno}: unknown behavior {b!r}")
            ts = math.nan
            if len(parts) == 4 and parts[3] != "":
                try:
                    ts = float(parts[3])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad timestamp {parts[3]!r}") from None
            key = (user_map.setdefault(u, len(user_map)), item_map.setdefault(i, len(item_map)), bidx[b])
            prev = events.get(key)
            if prev is None or (not math.isnan(ts) and (math.isnan(prev) or ts > prev)):
                events[key] = ts
    if not events:
        raise DataError(f"{path}: no interactions")
    arr = np.array(list(events.keys()), dtype=np.int64)
    t = InteractionTensor(
        len(user_map),
        len(item_map),
        behaviors,
        bidx[target],
        arr[:, 0],
        arr[:, 1],
        arr[:, 2],
        np.array(list(events.values()), dtype=np.float64),
        tuple(user_map),
        tuple(item_map),
    )
    log.info("loaded %s: I=%d J=%d K=%d events=%d", path, t.num_users, t.num_items, t.num_behaviors, t.num_events)
    return t


def write_interactions(t: InteractionTensor, path) -> None:
    users = t.user_ids or tuple(f"u{i}" for i in range(t.num_users))
    items = t.item_ids or tuple(f"i{j}" for j in range(t.num_items))
    order = np.lexsort((t.kinds, t.items, t.users))
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in order:
            row = [users[t.users[e]], items[t.items[e]], t.behaviors[t.kinds[e]]]
            if not math.isnan(t.timestamps[e]):
                row.append(f"{t.timestamps[e]:.0f}")
            fh.write("\t".join(row) + "\n")


def write_id_maps(t: InteractionTensor, directory) -> tuple[Path, Path]:
    """Persist external<TAB>internal id maps as ``user_ids.tsv``/``item_ids.tsv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, ids, n in (("user_ids.tsv", t.user_ids, t.num_users), ("item_ids.tsv", t.item_ids, t.num_items)):
        ids = ids or tuple(str(k) for k in range(n))
        p = directory / name
        p.write_text("".join(f"{ext}\t{k}\n" for k, ext in enumerate(ids)), encoding="utf-8")
        paths.append(p)
    return paths[0], paths[1]


def read_id_map(path) -> dict[str, int]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        ext, _, internal = line.partition("\t")
        if not internal:
            raise DataError(f"{path}:{lineno}: expected two tab-separated columns")
        out[ext] = int(internal)
    return out


# --------------------------------------------------------------------------
# graphs


@dataclass(frozen=True)
class BehaviorGraph:
    """Per-behavior adjacency, degrees and symmetric-normalized adjacency."""

    adjacency: tuple[SparseMatrix, ...]
    user_degree: tuple[np.ndarray, ...]
    item_degree: tuple[np.ndarray, ...]
    normalized: tuple[SparseMatrix, ...]
    normalized_t: tuple[SparseMatrix, ...]

    @property
    def num_behaviors(self) -> int:
        return len(self.adjacency)

    @property
    def num_users(self) -> int:
        return self.adjacency[0].rows

    @property
    def num_items(self) -> int:
        return self.adjacency[0].cols

    @property
    def num_edges(self) -> int:
        return sum(a.nnz for a in self.adjacency)


def build_graphs(t: InteractionTensor) -> BehaviorGraph:
    adj, udeg, ideg, norm, norm_t = [], [], [], [], []
    for a in t.adjacency:
        du = np.diff(a.indptr).astype(np.float64)
        dv = np.bincount(a.indices, minlength=a.cols).astype(np.float64)
        rows = a.row_ids()
        alpha = 1.0 / np.sqrt(du[rows] * dv[a.indices])
        n = SparseMatrix(a.rows, a.cols, a.indptr, a.indices, alpha)
        adj.append(a)
        udeg.append(du)
        ideg.append(dv)
        norm.append(n)
        norm_t.append(n.transpose())
    return BehaviorGraph(tuple(adj), tuple(udeg), tuple(ideg), tuple(norm), tuple(norm_t))


# --------------------------------------------------------------------------
# split and sampling


@dataclass(frozen=True)
class SplitDataset:
    """Leave-one-out partition with fixed evaluation negatives.

    ``test_users[n]`` held out ``test_items[n]`` under the target behavior and is
    ranked against ``negatives[n]``. ``excluded`` maps user -> reason.
    """

    train: InteractionTensor
    test_users: np.ndarray
    test_items: np.ndarray
    negatives: np.ndarray
    excluded: dict = field(default_factory=dict)

    @property
    def num_evaluated(self) -> int:
        return len(self.test_users)

    def candidates(self) -> np.ndarray:
        """(n_users, 100) candidate items, held-out item first."""
        return np.concatenate([self.test_items[:, None], self.negatives], axis=1)


def leave_one_out_split(t: InteractionTensor, seed: int, n_negatives: int = N_EVAL_NEGATIVES) -> SplitDataset:
    rng = np.random.default_rng(seed)
    held_out_events = []
    test_users, test_items, negatives = [], [], []
    excluded = {}
    target_events = np.flatnonzero(t.kinds == t.target)
    by_user = {}
    for e in target_events[np.argsort(t.users[target_events], kind="stable")]:
        by_user.setdefault(int(t.users[e]), []).append(e)
    for u in range(t.num_users):
        events = by_user.get(u, [])
        if len(events) < 2:
            excluded[u] = "fewer than 2 target events"
            continue
        events = np.array(sorted(events, key=lambda e: t.items[e]))
        ts = t.timestamps[events]
        if np.isnan(ts).any():
            pool = events
        else:
            pool = events[ts == ts.max()]
        held = int(pool[rng.integers(len(pool))]) if len(pool) > 1 else int(pool[0])
        seen = t.all_user_items(u)
        never = np.setdiff1d(np.arange(t.num_items), seen, assume_unique=True)
        # a full candidate list of 100 needs at least that many never-interacted items
        if len(never) < n_negatives + 1:
            log.warning("user %d has only %d never-interacted items; excluded from evaluation", u, len(never))
            excluded[u] = f"only {len(never)} never-interacted items"
            continue
        neg = np.sort(rng.choice(never, size=n_negatives, replace=False))
        held_out_events.append(held)
        test_users.append(u)
        test_items.append(int(t.items[held]))
        negatives.append(neg)
    keep = np.ones(t.num_events, dtype=bool)
    keep[held_out_events] = False
    return SplitDataset(
        train=t.select(keep),
        test_users=np.array(test_users, dtype=np.int64),
        test_items=np.array(test_items, dtype=np.int64),
        negatives=np.array(negatives, dtype=np.int64).reshape(len(test_users), n_negatives),
        excluded=excluded,
    )


@dataclass(frozen=True)
class TrainBatch:
    """Parallel arrays of (user, target behavior, positive item, negative item)."""

    users: np.ndarray
    targets: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self):
        return len(self.users)


def sample_batch(
    split: SplitDataset | InteractionTensor,
    users: Sequence[int],
    samples: int,
    seed,
    targets: Sequence[int] | None = None,
) -> TrainBatch:
    """Draw ``samples`` (positive, negative) pairs per user and target behavior.

    Positives are drawn with replacement from the user's training events under
    the behavior; negatives uniformly from items without an event under it.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    train = split.train if isinstance(split, SplitDataset) else split
    rng = np.random.default_rng(seed)
    if targets is None:
        targets = range(train.num_behaviors)
    out_u, out_k, out_p, out_n = [], [], [], []
    for u in users:
        for k in targets:
            pos_pool = train.user_items(int(u), k)
            if len(pos_pool) == 0 or len(pos_pool) >= train.num_items:
                continue
            pos = pos_pool[rng.integers(len(pos_pool), size=samples)]
            neg = np.empty(samples, dtype=np.int64)
            filled = 0
            while filled < samples:
                cand = rng.integers(train.num_items, size=2 * samples)
                cand = cand[~np.isin(cand, pos_pool)]
                take = min(samples - filled, len(cand))
                neg[filled : filled + take] = cand[:take]
                filled += take
            out_u.append(np.full(samples, u))
            out_k.append(np.full(samples, k))
            out_p.append(pos)
            out_n.append(neg)
    if not out_u:
        empty = np.zeros(0, dtype=np.int64)
        return TrainBatch(empty, empty, empty, empty)
    return TrainBatch(*(np.concatenate(x).astype(np.int64) for x in (out_u, out_k, out_p, out_n)))


# --------------------------------------------------------------------------
# synthetic data


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_synthetic(
    num_users: int,
    num_items: int,
    num_behaviors: int,
    density: float,
    rho: float,
    seed: int,
    behaviors: Sequence[str] | None = None,
    target: str | None = None,
    factors: int = 8,
    noise: float = 0.3,
) -> InteractionTensor:
    """Latent-factor multi-behavior data where ``rho`` sets how much the
    target behavior shares the context behaviors' propensity.

    Every behavior gets ``round(density * I * J)`` events: the pairs with the
    highest ``sigmoid(logit)``. Context logits are a shared user/item affinity
    plus per-behavior noise; the target logit mixes that shared affinity with
    an independent one, ``rho * shared + sqrt(1 - rho^2) * independent``.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density {density} infeasible: events per behavior must lie in (0, I*J]")
    if behaviors is None:
        behaviors = DEFAULT_BEHAVIORS.get(num_behaviors) or tuple(f"b{k}" for k in range(num_behaviors))
    behaviors = tuple(behaviors)
    if len(behaviors) != num_behaviors:
        raise ValueError(f"{len(behaviors)} behavior names for K={num_behaviors}")
    target = behaviors[-1] if target is None else target
    if target not in behaviors:
        raise ValueError(f"target {target!r} not in {behaviors}")
    k_target = behaviors.index(target)
    per_behavior = int(round(density * num_users * num_items))
    if per_behavior < 1:
        raise ValueError("density too small to produce any events")

    rng = np.random.default_rng(seed)

    def affinity():
        u = rng.standard_normal((num_users, factors))
        v = rng.standard_normal((num_items, factors))
        return u @ v.T / math.sqrt(factors)

    shared = affinity()
    independent = affinity()
    users, items, kinds = [], [], []
    for k in range(num_behaviors):
        eps = noise * rng.standard_normal((num_users, num_items))
        if k == k_target:
            logit = rho * shared + math.sqrt(max(0.0, 1.0 - rho * rho)) * independent + eps
        else:
            logit = shared + eps
        prob = _sigmoid(logit).ravel()
        top = np.argpartition(-prob, per_behavior - 1)[:per_behavior]
        top = np.sort(top)
        users.append(top // num_items)
        items.append(top % num_items)
        kinds.append(np.full(len(top), k))
    u = np.concatenate(users)
    return InteractionTensor(
        num_users,
        num_items,
        behaviors,
        k_target,
        u,
        np.concatenate(items),
        np.concatenate(kinds),
        np.full(len(u), np.nan),
    )
