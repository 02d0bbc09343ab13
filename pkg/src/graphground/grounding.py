"""Likelihood head: fuse the graphs through z, attend segments to the fused
graph, pool with the sentence feature, and regress the interval.

The interval comes from two sigmoids sorted into (start, end), which keeps
predictions ordered inside [0, 1] for any parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import (
    ParameterStore,
    Tensor,
    add,
    concat,
    matmul,
    maximum,
    minimum,
    multihead_attention,
    sigmoid,
    slice_cols,
    softmax_rows,
    tanh,
)


@dataclass
class HeadConfig:
    heads: int = 4
    mlp_hidden: int = 0     # 0 -> model width

    def validate(self, d: int):
        if self.heads < 1 or d % self.heads:
            raise ConfigError(f"head.heads must divide encoder.d ({d})")


@dataclass
class IntervalPrediction:
    t_s: float
    t_e: float

    def as_tuple(self) -> tuple[float, float]:
        return (self.t_s, self.t_e)


def create_head_params(store: ParameterStore, d: int, cfg: HeadConfig):
    hidden = cfg.mlp_hidden or d
    for name in ("q", "k", "v", "out"):
        store.create(f"attn.{name}.W", (d, d))
    store.create("pool.query.W", (d, d))
    store.create("pool.seg.W", (d, d))
    store.create("mlp.h.W", (hidden, d))
    store.create("mlp.h.b", (hidden,))
    store.create("mlp.out.W", (2, hidden))
    store.create("mlp.out.b", (2,))


def create_fuse_params(store: ParameterStore, d: int):
    store.create("fuse.W", (d, 2 * d))


def fuse_graphs(z: Tensor, m_tilde: Tensor, h_tilde: Tensor, store: ParameterStore) -> Tensor:
    """M' = z H~ (row-stochastic mixture per video node); M_J = W_J [M~; M']."""
    mixed = matmul(z, h_tilde)
    return matmul(concat([m_tilde, mixed], axis=1), store["fuse.W"].T)


def predict_interval(segments: Tensor, fused: Tensor, q: Tensor, store: ParameterStore,
                     cfg: HeadConfig, return_alpha: bool = False):
    """Regress a sorted (t_s, t_e) pair in [0, 1] from segment features.

    segments: (T, d) projected segment means; fused: (N_m, d) joint graph.
    """
    refined = multihead_attention(segments, fused, fused, cfg.heads,
                                  store["attn.q.W"], store["attn.k.W"],
                                  store["attn.v.W"], store["attn.out.W"])
    scores = matmul(matmul(refined, store["pool.seg.W"].T), matmul(q, store["pool.query.W"].T).T)
    alpha = softmax_rows(scores.T)                     # (1, T) over segments
    pooled = matmul(alpha, refined)
    hidden = tanh(add(matmul(pooled, store["mlp.h.W"].T), store["mlp.h.b"]))
    raw = sigmoid(add(matmul(hidden, store["mlp.out.W"].T), store["mlp.out.b"]))
    a, b = slice_cols(raw, 0, 1), slice_cols(raw, 1, 2)
    pred = concat([minimum(a, b), maximum(a, b)], axis=1)  # (1, 2) ordered
    return (pred, alpha) if return_alpha else pred


def to_interval(pred: Tensor) -> IntervalPrediction:
    v = pred.value.reshape(-1)
    return IntervalPrediction(float(v[0]), float(v[1]))
