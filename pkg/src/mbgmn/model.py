"""Parameter container and forward wiring for the full model and its ablations."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .context import contextualize_all
from .data import BehaviorGraph
from .gnn import ConfigError, EmbeddingState, propagate
from .transfer import predict_target, score_rows


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 16
    low_rank_dim: int = 4
    heads: int = 2
    layers: int = 2
    slope: float = 0.1
    init_std: float = 0.1
    low_rank: bool = True
    meta_context: bool = True
    multi_feature: bool = True
    meta_prediction: bool = True
    share_sides: bool = False
    share_item_attention: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide dimension {self.dim}")
        if not 0 < self.low_rank_dim < self.dim:
            raise ConfigError(f"low-rank dimension must lie in (0, {self.dim}), got {self.low_rank_dim}")
        if self.layers < 1:
            raise ConfigError("need at least one propagation layer")

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig, num_users: int, num_items: int, num_behaviors: int) -> dict:
    d, r, k = cfg.dim, cfg.low_rank_dim, num_behaviors
    shapes = {
        "user_emb": (num_users, d),
        "item_emb": (num_items, d),
        "behavior_emb": (k, d),
    }
    sides = ("user",) if cfg.share_sides else ("user", "item")
    for side in sides:
        if not cfg.meta_context:
            shapes[f"{side}_T"] = (k, d, d)
        elif cfg.low_rank:
            shapes[f"{side}_W1"] = (r * d, 3 * d)
            shapes[f"{side}_W2"] = (d * r, 3 * d)
            shapes[f"{side}_V1"] = (r, d)
            shapes[f"{side}_V2"] = (d, r)
        else:
            shapes[f"{side}_W"] = (d * d, 3 * d)
            shapes[f"{side}_V"] = (d, d)
    if cfg.multi_feature:
        shapes["attn_Q"] = (cfg.heads, d // cfg.heads, d)
        if not cfg.share_item_attention:
            shapes["attn_Q_item"] = (cfg.heads, d // cfg.heads, d)
    if cfg.meta_prediction:
        shapes.update(
            tr_WZ=(d, 3 * d),
            tr_WG=(d, 3 * d),
            tr_WP=(d * 3 * d, d),
            tr_Wb=(d, d),
            tr_Wp=(d, d),
            tr_P1=(d, 3 * d),
            tr_b2=(d,),
            tr_p3=(d,),
        )
    else:
        shapes.update(
            pair_P1=(k + 1, k, d, 3 * d),
            pair_b2=(k + 1, k, d),
            pair_p3=(k + 1, k, d),
        )
    return shapes


class MBGMN:
    """Trainable parameters plus the forward pass.

    Parameters are drawn from ``normal(0, init_std)`` in a fixed name order,
    so a seed fully determines the initial model.
    """

    def __init__(self, cfg: ModelConfig, num_users: int, num_items: int, num_behaviors: int, seed: int = 0):
        self.cfg = cfg
        self.num_users = num_users
        self.num_items = num_items
        self.num_behaviors = num_behaviors
        rng = np.random.default_rng(seed)
        self.params = {
            name: ad.parameter(rng.normal(0.0, cfg.init_std, size=shape))
            for name, shape in parameter_shapes(cfg, num_users, num_items, num_behaviors).items()
        }

    @property
    def context_mode(self) -> str:
        if not self.cfg.meta_context:
            return "fixed"
        return "low_rank" if self.cfg.low_rank else "dense"

    def forward(self, graphs: BehaviorGraph) -> EmbeddingState:
        if graphs.num_behaviors != self.num_behaviors:
            raise ConfigError(f"model built for K={self.num_behaviors}, graphs have K={graphs.num_behaviors}")
        ctx = contextualize_all(graphs, self.params, self.context_mode, self.cfg.share_sides)
        return propagate(
            ctx,
            graphs,
            self.params,
            layers=self.cfg.layers,
            slope=self.cfg.slope,
            fusion="attention" if self.cfg.multi_feature else "mean",
            share_item_attention=self.cfg.share_item_attention,
        )

    def score(self, state: EmbeddingState, users, items, sources, targets) -> ad.Tensor:
        return score_rows(
            state, users, items, sources, targets, self.params, self.cfg.slope, self.cfg.meta_prediction
        )

    def predict(self, state: EmbeddingState, user: int, items, target: int) -> np.ndarray:
        return predict_target(
            state, user, items, target, self.params, slope=self.cfg.slope, meta_prediction=self.cfg.meta_prediction
        )

    def weight_norm(self) -> ad.Tensor:
        """Squared Frobenius norm of every trainable parameter."""
        terms = [ad.square_sum(p) for p in self.params.values()]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise KeyError(f"parameter names differ: {sorted(set(arrays) ^ set(self.params))}")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].value[...] = v
