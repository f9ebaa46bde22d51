# %% [markdown]
# # Inside the model
#
# A walk through the three generated-parameter pieces on a toy graph:
# per-entity low-rank transforms, behavior attention during propagation, and
# the per-pair prediction heads. Each step is checked against plain numpy.
#
#     python3 notebooks/meta_modules.py

# %%
import numpy as np

from mbgmn import autodiff as ad
from mbgmn.context import context_matrix, generated_map
from mbgmn.data import InteractionTensor, build_graphs
from mbgmn.model import MBGMN, ModelConfig

# %% [markdown]
# ## A toy tensor
#
# Four users, five items, two behaviors (click, buy).

# %%
events = [(0, 0, 0), (0, 1, 0), (1, 1, 0), (2, 3, 0), (3, 4, 0), (0, 1, 1), (1, 2, 1), (2, 3, 1), (3, 3, 1)]
users, items, kinds = zip(*events)
t = InteractionTensor(4, 5, ("click", "buy"), 1, users, items, kinds, None)
g = build_graphs(t)
model = MBGMN(ModelConfig(dim=6, low_rank_dim=2, heads=2, layers=2), 4, 5, 2, seed=0)
print("normalized click adjacency:\n", np.round(g.normalized[0].to_dense(), 3))

# %% [markdown]
# ## Generated transforms have rank at most d'
#
# Each user gets its own d x d map per behavior, built from its context
# vector (behavior embedding, own embedding, neighbor average).

# %%
h = context_matrix("user", 0, g, model.params).value
for u in range(4):
    s = np.linalg.svd(generated_map(h[u], model.params, "user"), compute_uv=False)
    print(f"user {u} singular values", np.round(s, 4))

# %% [markdown]
# ## Propagation
#
# Layer outputs are summed into the readout; the fused channel mixes the
# behavior channels with multi-head attention whose rows sum to one.

# %%
state = model.forward(g)
print("channels:", state.num_channels, "readout shape:", state.user_readout[0].shape)
for layer, beta in enumerate(state.user_attention):
    print(f"layer {layer} attention rows sum to", np.round(beta.sum(axis=-1).ravel()[:4], 12))

# %% [markdown]
# ## Scores and gradients
#
# Score user 0 on every item for the buy target, then check the gradient of
# the summed score against central differences.

# %%
print("buy scores for user 0:", np.round(model.predict(state, 0, np.arange(5), 1), 4))


def total_score():
    s = model.forward(g)
    return ad.sum_axis(model.score(s, [0, 1, 2], [1, 2, 3], [2, 2, 0], [1, 1, 1]))


names = ("user_emb", "item_emb", "attn_Q", "tr_WZ")
print(ad.finite_diff_check(total_score, {n: model.params[n] for n in names}))
