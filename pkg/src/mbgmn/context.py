"""Meta-knowledge learner: per-entity, per-behavior generated transforms.

For entity ``i`` on one side of the bipartite graph and behavior ``k`` the
context vector is ``E_b[k] || E_i || sum_j alpha_ijk E_j`` (length ``3d``). A
hypernetwork maps it to two low-rank factors whose product transforms ``E_i``.
Everything here is batched over the entities of one side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BehaviorGraph

SIDES = ("user", "item")


@dataclass
class ContextualizedEmbeddings:
    users: list[Tensor]
    items: list[Tensor]


def _tables(params: dict, side: str) -> tuple[Tensor, Tensor]:
    own, other = ("user_emb", "item_emb") if side == "user" else ("item_emb", "user_emb")
    return params[own], params[other]


def context_matrix(side: str, k: int, graphs: BehaviorGraph, params: dict) -> Tensor:
    """Context vectors of every entity on ``side`` under behavior ``k``: (N, 3d)."""
    own, other = _tables(params, side)
    norm = graphs.normalized[k] if side == "user" else graphs.normalized_t[k]
    n = own.shape[0]
    behavior = ad.take(params["behavior_emb"], np.full(n, k))
    return ad.concat([behavior, own, ad.spmm(norm, other)], axis=-1)


def context_vector(side: str, entity: int, k: int, graphs: BehaviorGraph, params: dict) -> Tensor:
    return ad.take(context_matrix(side, k, graphs, params), entity)


def _batched(h, e) -> tuple[Tensor, Tensor, bool]:
    h = h if isinstance(h, Tensor) else ad.constant(h)
    e = e if isinstance(e, Tensor) else ad.constant(e)
    single = h.ndim == 1
    if single:
        h, e = ad.reshape(h, (1, -1)), ad.reshape(e, (1, -1))
    return h, e, single


def low_rank_transform(h, e, params: dict, side: str = "user") -> Tensor:
    """``V2 (V1 e)`` with ``V1 = W1 h + V1bar`` (d' x d) and ``V2 = W2 h + V2bar`` (d x d')."""
    h, e, single = _batched(h, e)
    v1bar, v2bar = params[f"{side}_V1"], params[f"{side}_V2"]
    rank, d = v1bar.shape
    n = h.shape[0]
    v1 = ad.reshape(ad.einsum("nc,mc->nm", h, params[f"{side}_W1"]), (n, rank, d)) + v1bar
    v2 = ad.reshape(ad.einsum("nc,mc->nm", h, params[f"{side}_W2"]), (n, d, rank)) + v2bar
    out = ad.einsum("nab,nb->na", v2, ad.einsum("nab,nb->na", v1, e))
    return ad.reshape(out, (d,)) if single else out


def dense_transform(h, e, params: dict, side: str = "user") -> Tensor:
    """Full-rank variant: ``(W h + Vbar) e`` with a single generated d x d map."""
    h, e, single = _batched(h, e)
    vbar = params[f"{side}_V"]
    d = vbar.shape[0]
    n = h.shape[0]
    v = ad.reshape(ad.einsum("nc,mc->nm", h, params[f"{side}_W"]), (n, d, d)) + vbar
    out = ad.einsum("nab,nb->na", v, e)
    return ad.reshape(out, (d,)) if single else out


def fixed_transform(k: int, e: Tensor, params: dict, side: str = "user") -> Tensor:
    """One learned d x d map per behavior, shared by every entity."""
    t = ad.take(params[f"{side}_T"], k)
    return ad.einsum("nb,ab->na", e, t)


def generated_map(h: np.ndarray, params: dict, side: str = "user", low_rank: bool = True) -> np.ndarray:
    """The d x d matrix the hypernetwork produces for one context vector."""
    h = np.asarray(h, dtype=np.float64)
    if not low_rank:
        vbar = params[f"{side}_V"].value
        d = vbar.shape[0]
        return (params[f"{side}_W"].value @ h).reshape(d, d) + vbar
    v1bar, v2bar = params[f"{side}_V1"].value, params[f"{side}_V2"].value
    rank, d = v1bar.shape
    v1 = (params[f"{side}_W1"].value @ h).reshape(rank, d) + v1bar
    v2 = (params[f"{side}_W2"].value @ h).reshape(d, rank) + v2bar
    return v2 @ v1


def contextualize_all(
    graphs: BehaviorGraph,
    params: dict,
    mode: str = "low_rank",
    share_sides: bool = False,
) -> ContextualizedEmbeddings:
    """Transform both embedding tables under every behavior.

    ``mode`` is ``"low_rank"``, ``"dense"`` or ``"fixed"``. With ``share_sides``
    the item side reuses the user-side meta parameters.
    """
    out = {}
    for side in SIDES:
        pside = "user" if share_sides else side
        own, _ = _tables(params, side)
        per_k = []
        for k in range(graphs.num_behaviors):
            if mode == "fixed":
                per_k.append(fixed_transform(k, own, params, pside))
                continue
            h = context_matrix(side, k, graphs, params)
            if mode == "low_rank":
                per_k.append(low_rank_transform(h, own, params, pside))
            elif mode == "dense":
                per_k.append(dense_transform(h, own, params, pside))
            else:
                raise ValueError(f"unknown contextualization mode {mode!r}")
        out[side] = per_k
    return ContextualizedEmbeddings(out["user"], out["item"])
