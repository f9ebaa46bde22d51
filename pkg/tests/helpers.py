import numpy as np

from mbgmn.data import InteractionTensor, build_graphs, generate_synthetic
from mbgmn.model import MBGMN, ModelConfig


def random_tensor(seed, num_users=7, num_items=6, num_behaviors=3, density=0.35):
    """Small random tensor with every behavior non-empty."""
    rng = np.random.default_rng(seed)
    users, items, kinds = [], [], []
    for k in range(num_behaviors):
        x = rng.random((num_users, num_items)) < density
        x[rng.integers(num_users), rng.integers(num_items)] = True
        u, i = np.nonzero(x)
        users += u.tolist()
        items += i.tolist()
        kinds += [k] * len(u)
    behaviors = tuple(f"b{k}" for k in range(num_behaviors))
    return InteractionTensor(num_users, num_items, behaviors, num_behaviors - 1, users, items, kinds, None)


def tiny_model(seed=0, num_users=7, num_items=6, num_behaviors=3, dim=6, low_rank_dim=2, heads=2, layers=2, **changes):
    t = random_tensor(seed, num_users, num_items, num_behaviors)
    cfg = ModelConfig(dim=dim, low_rank_dim=low_rank_dim, heads=heads, layers=layers, **changes)
    return t, build_graphs(t), MBGMN(cfg, num_users, num_items, num_behaviors, seed=seed)


def synthetic_graphs(seed=0, users=30, items=25, behaviors=3, density=0.08, rho=0.7):
    t = generate_synthetic(users, items, behaviors, density, rho, seed)
    return t, build_graphs(t)
