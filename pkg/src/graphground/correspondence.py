"""Cross-graph convolution and the prior/posterior latent correspondence.

The latent z is an (N_m x N_h) row-stochastic matrix softly aligning every
video node to the language nodes. The prior infers it from the two graphs and
a global sentence feature q; the posterior additionally conditions on a
ground-truth-region video summary m*. Both are deterministic attention-valued
latents; only the row-wise KL couples them (no sampling/reparameterization).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import (
    ParameterStore,
    Tensor,
    add,
    concat,
    gather_rows,
    kl_rows,
    matmul,
    mul,
    sigmoid,
    softmax_rows,
    tmean,
)

LEVEL_ORDER = ("event", "action", "object")


@dataclass
class LatentCorrespondence:
    z: Tensor                   # (N_m, N_h), rows stochastic
    source: str                 # "prior" | "posterior"


@dataclass
class GuidanceVectors:
    q: Tensor                   # (1, d) global sentence feature
    m_star: Tensor | None       # (1, d) ground-truth-region video feature (posterior only)


def create_cross_graph_params(store: ParameterStore, d: int):
    for direction in ("h2m", "m2h"):
        store.create(f"cgc.{direction}.att_q.W", (d, d))
        store.create(f"cgc.{direction}.att_k.W", (d, d))
        store.create(f"cgc.{direction}.gate.W", (d, d))
        store.create(f"cgc.{direction}.gate.b", (d,))


def _one_direction(src: Tensor, other: Tensor, src_levels: dict[str, np.ndarray],
                   other_levels: dict[str, np.ndarray], store: ParameterStore,
                   prefix: str, warnings: list[str]) -> Tensor:
    parts, order = [], []
    for level in LEVEL_ORDER:
        si = src_levels.get(level)
        if si is None or len(si) == 0:
            continue
        src_k = gather_rows(src, si)
        oi = other_levels.get(level)
        if oi is None or len(oi) == 0:
            # nothing to attend to on the other side: pass through ungated
            warnings.append(f"{prefix}: level {level} empty on the other graph; gate forced closed")
            parts.append(src_k)
            order.extend(int(i) for i in si)
            continue
        other_k = gather_rows(other, oi)
        q = matmul(src_k, store[f"{prefix}.att_q.W"].T)
        k = matmul(other_k, store[f"{prefix}.att_k.W"].T)
        context = matmul(softmax_rows(matmul(q, k.T)), other_k)
        gate = sigmoid(add(matmul(src_k, store[f"{prefix}.gate.W"].T), store[f"{prefix}.gate.b"]))
        parts.append(add(mul(add(mul(gate, -1.0), 1.0), src_k), mul(gate, context)))
        order.extend(int(i) for i in si)
    stacked = concat(parts, axis=0) if len(parts) > 1 else parts[0]
    inverse = np.argsort(np.asarray(order))
    return gather_rows(stacked, inverse)


def cross_graph_conv(m_feats: Tensor, h_feats: Tensor, m_levels: dict[str, np.ndarray],
                     h_levels: dict[str, np.ndarray], store: ParameterStore) -> tuple[Tensor, Tensor, list[str]]:
    """Level-wise gated attention in both directions; both read pre-update features."""
    warnings: list[str] = []
    m_tilde = _one_direction(m_feats, h_feats, m_levels, h_levels, store, "cgc.h2m", warnings)
    h_tilde = _one_direction(h_feats, m_feats, h_levels, m_levels, store, "cgc.m2h", warnings)
    return m_tilde, h_tilde, warnings


def create_correspondence_params(store: ParameterStore, d: int):
    store.create("prior.vis.W", (d, d))
    store.create("prior.lang.W", (d, d))
    store.create("posterior.vis.W", (d, d))
    store.create("posterior.lang.W", (d, d))


def prior_z(m_tilde: Tensor, h_tilde: Tensor, q: Tensor, store: ParameterStore) -> LatentCorrespondence:
    """Row-softmax over (W1 m_i) . (W2 (q * h_j))."""
    vis = matmul(m_tilde, store["prior.vis.W"].T)
    lang = matmul(mul(h_tilde, q), store["prior.lang.W"].T)
    return LatentCorrespondence(softmax_rows(matmul(vis, lang.T)), "prior")


def ground_truth_video_summary(m_tilde: Tensor, gt_node_idx: np.ndarray) -> Tensor:
    """m*: mean of the object/action node features whose segment overlaps gt."""
    if gt_node_idx is None or len(gt_node_idx) == 0:
        raise ContractError("posterior needs the ground-truth node selection")
    return tmean(gather_rows(m_tilde, gt_node_idx), axis=0)


def posterior_z(m_tilde: Tensor, h_tilde: Tensor, q: Tensor, gt_node_idx: np.ndarray,
                store: ParameterStore) -> LatentCorrespondence:
    """Row-softmax over (W3 (m* * m_i)) . (W4 (q * h_j))."""
    m_star = ground_truth_video_summary(m_tilde, gt_node_idx)
    vis = matmul(mul(m_tilde, m_star), store["posterior.vis.W"].T)
    lang = matmul(mul(h_tilde, q), store["posterior.lang.W"].T)
    return LatentCorrespondence(softmax_rows(matmul(vis, lang.T)), "posterior")


def correspondence_kl(post: LatentCorrespondence, prior: LatentCorrespondence) -> Tensor:
    if post.source != "posterior" or prior.source != "prior":
        raise ContractError(f"correspondence_kl got sources ({post.source}, {prior.source})")
    return kl_rows(post.z, prior.z)
