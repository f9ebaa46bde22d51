"""Finite-difference check of the end-to-end training loss on a tiny instance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import FiniteDiffReport, finite_diff_check
from .data import build_graphs, generate_synthetic, sample_batch
from .model import MBGMN, ModelConfig
from .trainer import loss

TINY = dict(users=6, items=6, behaviors=3, dim=4, low_rank_dim=2, heads=2, layers=2, weight_decay=0.001)

VARIANTS = {
    "full": {},
    "lowR": {"low_rank": False},
    "mFeat": {"multi_feature": False},
    "metaC": {"meta_context": False},
    "metaP": {"meta_prediction": False},
}


@dataclass
class GradcheckSuite:
    reports: dict[str, FiniteDiffReport]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())

    def __str__(self):
        return "\n".join(f"{name:<6} {r}" for name, r in self.reports.items())


def tiny_problem(seed: int, **model_changes):
    data = generate_synthetic(TINY["users"], TINY["items"], TINY["behaviors"], 0.34, 0.5, seed)
    graphs = build_graphs(data)
    cfg = ModelConfig(
        dim=TINY["dim"], low_rank_dim=TINY["low_rank_dim"], heads=TINY["heads"], layers=TINY["layers"], **model_changes
    )
    model = MBGMN(cfg, data.num_users, data.num_items, data.num_behaviors, seed=seed)
    batch = sample_batch(data, range(data.num_users), 2, seed)
    return data, graphs, model, batch


def check_loss(seed: int = 7, step: float = 1e-5, tol: float = 1e-4, max_coords=None, multi_task=True, **model_changes):
    _, graphs, model, batch = tiny_problem(seed, **model_changes)

    def f():
        return loss(model, model.forward(graphs), batch, TINY["weight_decay"], multi_task).total

    rng = np.random.default_rng(seed)
    return finite_diff_check(f, model.params, step=step, tol=tol, max_coords=max_coords, rng=rng)


def run_gradcheck(seed: int = 7, max_coords=None, variants=None) -> GradcheckSuite:
    names = variants or list(VARIANTS)
    reports = {name: check_loss(seed, max_coords=max_coords, **VARIANTS[name]) for name in names}
    reports["mTask"] = check_loss(seed, max_coords=max_coords, multi_task=False)
    return GradcheckSuite(reports)
