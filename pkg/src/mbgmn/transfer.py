"""Generated prediction heads for (user, item, source, target) tuples.

The relation code ``gamma`` is computed from the source- and target-channel
readouts of a user/item pair and is mapped affinely to the weights of a small
scoring network. All functions are batched over rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class PredictionHead:
    p1: Tensor  # (B, d, 3d)
    b2: Tensor  # (B, d)
    p3: Tensor  # (B, d)


def phi(v1, v2) -> Tensor:
    """``v1 * v2 || v1 || v2`` along the last axis."""
    v1 = v1 if isinstance(v1, Tensor) else ad.constant(v1)
    v2 = v2 if isinstance(v2, Tensor) else ad.constant(v2)
    if v1.shape != v2.shape:
        raise ad.ShapeError(f"phi: shapes {v1.shape} and {v2.shape} differ")
    return ad.concat([v1 * v2, v1, v2], axis=-1)


def _linear(x: Tensor, w: Tensor) -> Tensor:
    return ad.einsum("bc,mc->bm", x, w)


def meta_gamma(user_src, item_src, user_tgt, item_tgt, params: dict, slope: float = 0.1) -> Tensor:
    z_src = ad.leaky_relu(_linear(phi(user_src, item_src), params["tr_WZ"]), slope)
    z_tgt = ad.leaky_relu(_linear(phi(user_tgt, item_tgt), params["tr_WZ"]), slope)
    return ad.leaky_relu(_linear(phi(z_src, z_tgt), params["tr_WG"]), slope)


def generate_head(gamma: Tensor, params: dict) -> PredictionHead:
    p1bar = params["tr_P1"]
    d, d3 = p1bar.shape
    b = gamma.shape[0]
    p1 = ad.reshape(_linear(gamma, params["tr_WP"]), (b, d, d3)) + p1bar
    b2 = _linear(gamma, params["tr_Wb"]) + params["tr_b2"]
    p3 = _linear(gamma, params["tr_Wp"]) + params["tr_p3"]
    return PredictionHead(p1, b2, p3)


def pair_head(sources: np.ndarray, targets: np.ndarray, num_targets: int, params: dict) -> PredictionHead:
    """Fixed learned head per (source, target) pair, used when generation is off."""
    idx = np.asarray(sources) * num_targets + np.asarray(targets)
    p1 = params["pair_P1"]
    b2 = params["pair_b2"]
    p3 = params["pair_p3"]
    flat = lambda t: ad.reshape(t, (t.shape[0] * t.shape[1],) + t.shape[2:])  # noqa: E731
    return PredictionHead(ad.take(flat(p1), idx), ad.take(flat(b2), idx), ad.take(flat(p3), idx))


def score(user_src, item_src, head: PredictionHead, slope: float = 0.1) -> Tensor:
    x = phi(user_src, item_src)
    eta = ad.leaky_relu(ad.einsum("bij,bj->bi", head.p1, x) + head.b2, slope)
    return ad.sum_axis(eta * head.p3, axis=-1)


def score_rows(
    state,
    users: np.ndarray,
    items: np.ndarray,
    sources: np.ndarray,
    targets: np.ndarray,
    params: dict,
    slope: float = 0.1,
    meta_prediction: bool = True,
) -> Tensor:
    """Scores for parallel index arrays; sources in 0..K (K = global), targets in 0..K-1."""
    n_users = state.user_readout[0].shape[0]
    n_items = state.item_readout[0].shape[0]
    eu = state.stacked("user")
    ev = state.stacked("item")
    users = np.asarray(users)
    items = np.asarray(items)
    sources = np.asarray(sources)
    targets = np.asarray(targets)
    u_src = ad.take(eu, sources * n_users + users)
    i_src = ad.take(ev, sources * n_items + items)
    if meta_prediction:
        u_tgt = ad.take(eu, targets * n_users + users)
        i_tgt = ad.take(ev, targets * n_items + items)
        head = generate_head(meta_gamma(u_src, i_src, u_tgt, i_tgt, params, slope), params)
    else:
        head = pair_head(sources, targets, state.num_channels - 1, params)
    return score(u_src, i_src, head, slope)


def predict_target(state, user: int, items, target: int, params: dict, **kw) -> np.ndarray:
    """Final-prediction scores of ``items`` for ``user`` from the global channel."""
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    k_global = state.num_channels - 1
    n = len(items)
    out = score_rows(state, np.full(n, user), items, np.full(n, k_global), np.full(n, target), params, **kw)
    return out.value
