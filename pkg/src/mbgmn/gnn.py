"""Behavior-aware propagation: residual graph convolution per behavior,
multi-head attention across behavior channels, and the order-sum readout."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .context import ContextualizedEmbeddings
from .data import BehaviorGraph


class ConfigError(ValueError):
    pass


@dataclass
class EmbeddingState:
    """Per-layer channels and readouts.

    ``user_layers[l][k]`` is the (I, d) user matrix of channel ``k`` at layer
    ``l``; channel index ``K`` is the fused global channel. ``user_readout[k]``
    sums channel ``k`` over layers ``0..L``.
    """

    user_layers: list[list[Tensor]]
    item_layers: list[list[Tensor]]
    user_readout: list[Tensor]
    item_readout: list[Tensor]
    user_attention: list[np.ndarray | None]
    item_attention: list[np.ndarray | None]

    @property
    def num_channels(self) -> int:
        return len(self.user_readout)

    def stacked(self, side: str) -> Tensor:
        """Readouts flattened to ((K+1) * N, d); row ``k * N + n`` is channel k of entity n."""
        readout = self.user_readout if side == "user" else self.item_readout
        n, d = readout[0].shape
        return ad.reshape(ad.stack(readout, axis=0), (len(readout) * n, d))


def graph_conv(users: Tensor, items: Tensor, graphs: BehaviorGraph, k: int, slope: float = 0.1):
    """One residual, weight-free convolution step on behavior ``k``."""
    new_users = users + ad.leaky_relu(ad.spmm(graphs.normalized[k], items), slope)
    new_items = items + ad.leaky_relu(ad.spmm(graphs.normalized_t[k], users), slope)
    return new_users, new_items


def behavior_attention(channels: list[Tensor], q: Tensor):
    """Fuse K channels of shape (N, d) with head-sliced dot-product attention.

    ``q`` has shape (H, d/H, d) and serves as both query and key projection;
    values are the raw channel slices. Returns ``(fused, refined, beta)`` with
    refined of shape (N, K, d) and beta of shape (N, H, K, K).
    """
    heads, width, d = q.shape
    if heads * width != d:
        raise ConfigError(f"{heads} heads do not divide dimension {d}")
    n = channels[0].shape[0]
    k = len(channels)
    c = ad.stack(channels, axis=1)
    proj = ad.einsum("nkd,hed->nkhe", c, q)
    logits = ad.scale(ad.einsum("nkhe,nqhe->nhkq", proj, proj), 1.0 / math.sqrt(width))
    beta = ad.softmax_lastaxis(logits)
    values = ad.reshape(c, (n, k, heads, width))
    refined = ad.reshape(ad.einsum("nhkq,nqhe->nkhe", beta, values), (n, k, d))
    return ad.sum_axis(refined, axis=1), refined, beta.value


def mean_fusion(channels: list[Tensor]) -> Tensor:
    return ad.scale(ad.sum_axis(ad.stack(channels, axis=1), axis=1), 1.0 / len(channels))


def propagate(
    ctx: ContextualizedEmbeddings,
    graphs: BehaviorGraph,
    params: dict,
    layers: int = 2,
    slope: float = 0.1,
    fusion: str = "attention",
    share_item_attention: bool = True,
) -> EmbeddingState:
    """Stack ``layers`` convolutions and fuse the behavior channels at each layer."""
    if layers < 1:
        raise ConfigError("need at least one propagation layer")
    q_user = params.get("attn_Q")
    q_item = q_user if share_item_attention else params.get("attn_Q_item")

    def fuse(chs, q):
        if fusion == "attention":
            fused, _, beta = behavior_attention(chs, q)
            return fused, beta
        if fusion == "mean":
            return mean_fusion(chs), None
        raise ConfigError(f"unknown fusion {fusion!r}")

    users, items = list(ctx.users), list(ctx.items)
    fu, bu = fuse(users, q_user)
    fi, bi = fuse(items, q_item)
    user_layers, item_layers = [users + [fu]], [items + [fi]]
    user_att, item_att = [bu], [bi]
    for _ in range(layers):
        nxt = [graph_conv(users[k], items[k], graphs, k, slope) for k in range(graphs.num_behaviors)]
        users = [u for u, _ in nxt]
        items = [v for _, v in nxt]
        fu, bu = fuse(users, q_user)
        fi, bi = fuse(items, q_item)
        user_layers.append(users + [fu])
        item_layers.append(items + [fi])
        user_att.append(bu)
        item_att.append(bi)

    def readout(layers_):
        out = []
        for ch in range(len(layers_[0])):
            acc = layers_[0][ch]
            for layer in layers_[1:]:
                acc = acc + layer[ch]
            out.append(acc)
        return out

    return EmbeddingState(
        user_layers, item_layers, readout(user_layers), readout(item_layers), user_att, item_att
    )
