"""Leave-one-out top-N evaluation, popularity baseline and dependency reports."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import SplitDataset

DEFAULT_CUTOFFS = (1, 3, 5, 7, 10)
DEFAULT_BUCKETS = ((1, 4), (5, 12), (13, 32), (33, None))

# (users, candidates[n, c]) -> scores[n, c]
Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


def rank_metrics(rank: int, n: int, num_candidates: int = 100) -> tuple[float, float]:
    """Hit and NDCG contribution of one held-out item at 1-based ``rank``."""
    if not 1 <= rank <= num_candidates:
        raise ValueError(f"rank {rank} outside [1, {num_candidates}]")
    if rank > n:
        return 0.0, 0.0
    return 1.0, 1.0 / math.log2(rank + 1)


def rank_positions(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """1-based rank of column 0 per row, ordering by score desc then item id asc."""
    s0 = scores[:, :1]
    c0 = candidates[:, :1]
    ahead = (scores > s0) | ((scores == s0) & (candidates < c0))
    return 1 + ahead[:, 1:].sum(axis=1)


def bucket_label(lo: int, hi: int | None) -> str:
    return f"{lo}+" if hi is None else f"{lo}-{hi}"


@dataclass
class EvalReport:
    cutoffs: list[int]
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_evaluated: int
    n_excluded: int
    exclusions: dict[str, int] = field(default_factory=dict)
    buckets: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cutoffs": list(self.cutoffs),
            "hr": {str(k): v for k, v in self.hr.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "n_evaluated": self.n_evaluated,
            "n_excluded": self.n_excluded,
            "exclusions": dict(self.exclusions),
            "buckets": self.buckets,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            cutoffs=[int(c) for c in d["cutoffs"]],
            hr={int(k): v for k, v in d["hr"].items()},
            ndcg={int(k): v for k, v in d["ndcg"].items()},
            n_evaluated=d["n_evaluated"],
            n_excluded=d["n_excluded"],
            exclusions=d["exclusions"],
            buckets=d["buckets"],
        )

    def to_text(self) -> str:
        lines = [f"users evaluated: {self.n_evaluated}  excluded: {self.n_excluded}"]
        lines.append("N    " + "  ".join(f"{'HR@' + str(c):>8}{'NDCG@' + str(c):>9}" for c in self.cutoffs))
        lines.append("all  " + "  ".join(f"{self.hr[c]:8.4f}{self.ndcg[c]:9.4f}" for c in self.cutoffs))
        for b in self.buckets:
            if b["n_users"]:
                row = "  ".join(f"{b['hr'][str(c)]:8.4f}{b['ndcg'][str(c)]:9.4f}" for c in self.cutoffs)
            else:
                row = "(no users)"
            lines.append(f"{b['range']:<5}" + row + f"   n={b['n_users']}")
        return "\n".join(lines)


def _metric_table(ranks: np.ndarray, cutoffs: Sequence[int]) -> tuple[dict, dict]:
    hr, ndcg = {}, {}
    for c in cutoffs:
        hit = ranks <= c
        hr[c] = float(hit.mean()) if len(ranks) else 0.0
        gains = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
        ndcg[c] = float(gains.mean()) if len(ranks) else 0.0
    return hr, ndcg


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MBGMN_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(
    split: SplitDataset,
    scorer: Scorer,
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
    buckets: Sequence[tuple[int, int | None]] = DEFAULT_BUCKETS,
    chunk: int = 64,
    threads: int | None = None,
) -> EvalReport:
    """Rank each held-out item among its 100 candidates and aggregate HR/NDCG."""
    cutoffs = sorted(int(c) for c in cutoffs)
    cands = split.candidates()
    users = split.test_users
    threads = threads or _threads()
    chunks = [slice(s, s + chunk) for s in range(0, len(users), chunk)]

    def run(sl):
        scores = np.asarray(scorer(users[sl], cands[sl]), dtype=np.float64)
        return rank_positions(scores, cands[sl])

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    ranks = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    hr, ndcg = _metric_table(ranks, cutoffs)

    activity = split.train.events_per_user()[users] if len(users) else np.zeros(0, dtype=np.int64)
    bucket_rows = []
    for lo, hi in buckets:
        m = (activity >= lo) & (activity <= (hi if hi is not None else np.iinfo(np.int64).max))
        bhr, bndcg = _metric_table(ranks[m], cutoffs)
        bucket_rows.append(
            {
                "range": bucket_label(lo, hi),
                "n_users": int(m.sum()),
                "hr": {str(c): v for c, v in bhr.items()},
                "ndcg": {str(c): v for c, v in bndcg.items()},
            }
        )
    reasons: dict[str, int] = {}
    for r in split.excluded.values():
        key = "fewer than 2 target events" if r.startswith("fewer") else "too few never-interacted items"
        reasons[key] = reasons.get(key, 0) + 1
    return EvalReport(cutoffs, hr, ndcg, int(len(users)), len(split.excluded), reasons, bucket_rows)


def popularity_baseline(split: SplitDataset) -> Scorer:
    """Score items by their training count under the target behavior."""
    train = split.train
    counts = np.bincount(train.items[train.kinds == train.target], minlength=train.num_items).astype(np.float64)

    def scorer(users, candidates):
        return counts[candidates]

    return scorer


def constant_scorer(users, candidates) -> np.ndarray:
    return np.zeros(candidates.shape)


def model_scorer(model, graphs, target: int) -> Scorer:
    """Score candidates with the global-channel prediction for ``target``."""
    state = model.forward(graphs)

    def scorer(users, candidates):
        n, c = candidates.shape
        rows = np.repeat(users, c)
        items = candidates.ravel()
        k_global = model.num_behaviors
        out = model.score(state, rows, items, np.full(n * c, k_global), np.full(n * c, target))
        return out.value.reshape(n, c)

    return scorer


def dependency_report(logs, last: int = 1, users: Sequence[int] | None = None) -> dict:
    """Mean per-(source, target) hinge over the last ``last`` epochs.

    Entries are weighted by term counts; cells without terms are ``None``.
    """
    if not logs:
        raise ValueError("dependency report needs at least one completed epoch")
    window = logs[-last:]

    def combine(get):
        first = get(window[0])
        rows, cols = len(first), len(first[0])
        out = []
        for i in range(rows):
            row = []
            for j in range(cols):
                num = den = 0.0
                for entry in window:
                    mat, cnt = get(entry), entry.counts
                    if mat[i][j] is not None:
                        num += mat[i][j] * cnt[i][j]
                        den += cnt[i][j]
                row.append(num / den if den else None)
            out.append(row)
        return out

    report = {"epochs": [e.epoch for e in window], "overall": combine(lambda e: e.attribution)}
    if users:
        report["users"] = {}
        for u in users:
            if all(u in e.user_attribution for e in window):
                report["users"][u] = _user_mean(window, u)
    return report


def _user_mean(window, u):
    mats = [e.user_attribution[u] for e in window]
    rows, cols = len(mats[0]), len(mats[0][0])
    out = []
    for i in range(rows):
        row = []
        for j in range(cols):
            vals = [m[i][j] for m in mats if m[i][j] is not None]
            row.append(sum(vals) / len(vals) if vals else None)
        out.append(row)
    return out
