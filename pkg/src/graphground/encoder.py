"""Contextualization stages over a semantic graph's node features.

Three stages, each optional via ablation flags:
  * relation-aware graph convolution: per edge type r, bilinear attention over
    r-neighbors and a value projection, summed over types (semantic context);
  * visual context: a per-frame sigmoid filter conditioned on the node, the
    segment mean frame and the frame itself, max-pooled and fused back;
  * event aggregation: learnable query vectors attend over all object/action
    nodes and become event nodes, stacked over layers.

All functions are pure in (features, parameters) and safe to run concurrently
across examples. Features are (N, d) Tensors; graph structure arrives as
plain numpy index/mask arrays computed once per example.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graphs import EDGE_TYPES
from .tensor import (
    ParameterStore,
    Tensor,
    add,
    concat,
    gather_rows,
    matmul,
    mul,
    segment_max,
    sigmoid,
    softmax_rows,
)


@dataclass
class EncoderConfig:
    d: int = 32                  # model width
    m_layers: int = 2            # relation-aware conv layers
    event_layers: int = 2        # event aggregation layers
    n_p: int = 4                 # learnable event queries per modality
    residual: bool = True        # add the input back after each conv layer
    enable_scl: bool = True
    enable_vcl: bool = True
    enable_hsa: bool = True

    def validate(self):
        if self.d < 1:
            raise ConfigError("encoder.d must be >= 1")
        if self.enable_scl and self.m_layers < 1:
            raise ConfigError("encoder.m_layers must be >= 1 when SCL is enabled")
        if self.enable_hsa and (self.event_layers < 1 or self.n_p < 1):
            raise ConfigError("encoder.event_layers and encoder.n_p must be >= 1 when HSA is enabled")


def create_scl_params(store: ParameterStore, prefix: str, d: int, layers: int):
    for layer in range(layers):
        for etype in EDGE_TYPES:
            store.create(f"{prefix}.l{layer}.att.{etype}", (d, d))
            store.create(f"{prefix}.l{layer}.val.{etype}", (d, d))


def relational_conv_layer(feats: Tensor, adj: dict[str, np.ndarray], store: ParameterStore,
                          prefix: str, residual: bool = True) -> Tensor:
    """One relation-aware convolution layer over typed neighborhoods.

    For each type r: logits (W_r s_i) . (W_r s_j) masked to r-neighbors,
    row-softmaxed, then sum_j a_ij (U_r s_j). Types are summed; nodes without
    r-neighbors get a zero r-contribution (all-masked softmax rows). The
    residual keeps isolated nodes equal to their input.
    """
    out = feats if residual else None
    for etype in EDGE_TYPES:
        mask = adj[etype]
        if not mask.any():
            continue
        proj = matmul(feats, store[f"{prefix}.att.{etype}"].T)
        attn = softmax_rows(matmul(proj, proj.T), mask)
        contrib = matmul(attn, matmul(feats, store[f"{prefix}.val.{etype}"].T))
        out = contrib if out is None else add(out, contrib)
    if out is None:  # graph with no edges at all and no residual
        out = mul(feats, 0.0)
    return out


def semantic_context(feats: Tensor, adj: dict[str, np.ndarray], store: ParameterStore,
                     prefix: str, cfg: EncoderConfig) -> Tensor:
    for layer in range(cfg.m_layers):
        feats = relational_conv_layer(feats, adj, store, f"{prefix}.l{layer}", cfg.residual)
    return feats


def create_vcl_params(store: ParameterStore, prefix: str, d: int):
    store.create(f"{prefix}.gate.W", (d, 3 * d))
    store.create(f"{prefix}.gate.b", (d,))
    store.create(f"{prefix}.fuse.W", (d, 2 * d))


def visual_context(feats: Tensor, frames: Tensor, seg_means: Tensor, pair_node: np.ndarray,
                   pair_frame: np.ndarray, pair_seg: np.ndarray, pool_starts: np.ndarray,
                   store: ParameterStore, prefix: str = "vcl") -> Tensor:
    """Gate each frame of a node's segment, max-pool, and fuse into the node.

    `pair_*` index one row per (node, frame-of-its-segment) pair; `pool_starts`
    delimits each node's row block. Frames and segment means are already in
    model space (shared frame projection).
    """
    gate_in = concat([gather_rows(feats, pair_node), gather_rows(seg_means, pair_seg),
                      gather_rows(frames, pair_frame)], axis=1)
    gates = sigmoid(add(matmul(gate_in, store[f"{prefix}.gate.W"].T), store[f"{prefix}.gate.b"]))
    filtered = mul(gather_rows(frames, pair_frame), gates)
    pooled = segment_max(filtered, pool_starts)
    return matmul(concat([feats, pooled], axis=1), store[f"{prefix}.fuse.W"].T)


def create_hsa_params(store: ParameterStore, prefix: str, d: int, n_p: int, layers: int):
    store.create(f"{prefix}.queries", (n_p, d))
    for layer in range(layers):
        store.create(f"{prefix}.l{layer}.q.W", (d, d))
        store.create(f"{prefix}.l{layer}.k.W", (d, d))


def aggregate_events(feats: Tensor, store: ParameterStore, prefix: str, cfg: EncoderConfig) -> Tensor:
    """Event queries attend over all object/action nodes; each layer's refined
    event node is the next layer's query. Returns the (n_p, d) event features.
    """
    if cfg.n_p < 1:
        raise ConfigError("event aggregation requires encoder.n_p >= 1")
    queries = store[f"{prefix}.queries"]
    for layer in range(cfg.event_layers):
        q = matmul(queries, store[f"{prefix}.l{layer}.q.W"].T)
        k = matmul(feats, store[f"{prefix}.l{layer}.k.W"].T)
        attn = softmax_rows(matmul(q, k.T))
        queries = matmul(attn, feats)
    return queries
