"""Multi-behavior graph meta network for top-N recommendation, on numpy."""

from .data import InteractionTensor, build_graphs, generate_synthetic, leave_one_out_split, load_interactions
from .evaluate import EvalReport, evaluate, model_scorer, popularity_baseline
from .model import MBGMN, ModelConfig
from .trainer import TrainConfig, fit

__all__ = [
    "InteractionTensor",
    "build_graphs",
    "generate_synthetic",
    "leave_one_out_split",
    "load_interactions",
    "EvalReport",
    "evaluate",
    "model_scorer",
    "popularity_baseline",
    "MBGMN",
    "ModelConfig",
    "TrainConfig",
    "fit",
]

__version__ = "0.1.0"
