"""Full grounding model: parameters, per-example preparation, forward passes.

`prepare_example` converts a GroundingExample into parameter-independent
arrays (node embeddings, typed adjacency masks, frame blocks, ground-truth
node selection) that can be cached across training runs. `GroundingModel`
owns the ParameterStore and runs the pipeline:

    input projections -> semantic context -> visual context (video)
    -> event aggregation -> cross-graph convolution -> prior/posterior z
    -> fusion -> interval head

Training uses the posterior z; inference uses the prior and never touches
the ground truth. The variational stage can be ablated (`disable_vcc`), in
which case the graphs are fused by direct cross-modal attention and the KL
term is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspondence import (
    LatentCorrespondence,
    correspondence_kl,
    create_correspondence_params,
    create_cross_graph_params,
    cross_graph_conv,
    posterior_z,
    prior_z,
)
from .data import EmbeddingTable, GroundingExample
from .encoder import (
    EncoderConfig,
    aggregate_events,
    create_hsa_params,
    create_scl_params,
    create_vcl_params,
    semantic_context,
    visual_context,
)
from .errors import ComputationError
from .graphs import build_query_graph, build_video_graph
from .grounding import (
    HeadConfig,
    IntervalPrediction,
    create_fuse_params,
    create_head_params,
    fuse_graphs,
    predict_interval,
    to_interval,
)
from .tensor import ParameterStore, Tensor, concat, matmul, no_grad, softmax_rows, tmean


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    disable_vcc: bool = False
    emb_dim: int = 16
    frame_dim: int = 16
    seed: int = 0
    precision: str = "f64"

    def validate(self):
        self.encoder.validate()
        self.head.validate(self.encoder.d)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass(eq=False)
class PreparedExample:
    example: GroundingExample
    n_segments: int
    v_emb: np.ndarray                       # (N_v, d_emb)
    v_adj: dict[str, np.ndarray]
    v_levels: dict[str, np.ndarray]         # object/action -> node ids
    v_origins: np.ndarray                   # (N_v,) segment of each node
    v_labels: list[str]
    q_emb: np.ndarray
    q_adj: dict[str, np.ndarray]
    q_levels: dict[str, np.ndarray]
    q_labels: list[str]
    frames: np.ndarray                      # (sum K_t, d_f) segment-major
    seg_means: np.ndarray                   # (T, d_f)
    pair_node: np.ndarray                   # VCL (node, frame) pair rows
    pair_frame: np.ndarray
    pair_seg: np.ndarray
    pool_starts: np.ndarray                 # (N_v + 1,)
    gt: tuple[float, float] | None
    gt_node_idx: np.ndarray | None
    warnings: list[str] = field(default_factory=list)


def segments_overlapping(gt: tuple[float, float], n_segments: int) -> tuple[list[int], str | None]:
    """Segments [t/T, (t+1)/T) with a nonempty intersection with the closed gt.

    A degenerate zero-length gt sitting on no segment (only t=1.0) falls back
    to the nearest segment, with a warning.
    """
    a, b = gt
    t_count = n_segments
    if a == b:
        selected = [t for t in range(t_count) if t / t_count <= a < (t + 1) / t_count]
    else:
        selected = [t for t in range(t_count) if a < (t + 1) / t_count and b >= t / t_count]
    if selected:
        return selected, None
    nearest = min(range(t_count), key=lambda t: min(abs(a - t / t_count), abs(a - (t + 1) / t_count)))
    return [nearest], f"gt {gt} overlaps no segment; using nearest segment {nearest}"


def _gt_node_selection(gt, origins: np.ndarray, n_segments: int, warnings: list[str]):
    selected, warning = segments_overlapping(gt, n_segments)
    if warning:
        warnings.append(warning)
    mask = np.isin(origins, selected)
    if not mask.any():
        # selected segments carry no labels: widen to the nearest labeled one
        center = 0.5 * (gt[0] + gt[1])
        labeled = sorted(set(int(o) for o in origins),
                         key=lambda t: abs(center - (t + 0.5) / n_segments))
        mask = origins == labeled[0]
        warnings.append(f"gt segments unlabeled; using nodes of segment {labeled[0]}")
    return np.nonzero(mask)[0]


def prepare_example(example: GroundingExample, table: EmbeddingTable, precision: str = "f64") -> PreparedExample:
    """Parameter-independent example arrays; cacheable across models and seeds."""
    dtype = np.float32 if precision == "f32" else np.float64
    vg = build_video_graph(example, table)
    qg = build_query_graph(example.query, table)

    origins = np.array([n.origin for n in vg.nodes], dtype=np.intp)
    seg_sizes = [s.frame_features.shape[0] for s in example.segments]
    seg_starts = np.cumsum([0] + seg_sizes)
    frames = np.concatenate([s.frame_features for s in example.segments]).astype(dtype)
    seg_means = np.stack([s.frame_features.mean(axis=0) for s in example.segments]).astype(dtype)

    pair_node, pair_frame, pair_seg, pool_starts = [], [], [], [0]
    for node_id, seg in enumerate(origins):
        k = seg_sizes[seg]
        pair_node.extend([node_id] * k)
        pair_frame.extend(range(seg_starts[seg], seg_starts[seg] + k))
        pair_seg.extend([int(seg)] * k)
        pool_starts.append(pool_starts[-1] + k)

    warnings: list[str] = []
    if example.unlabeled_segments:
        warnings.append(f"unlabeled segments contribute no nodes: {list(example.unlabeled_segments)}")
    gt_idx = None
    if example.gt_interval is not None:
        gt_idx = _gt_node_selection(example.gt_interval, origins, len(example.segments), warnings)

    levels = lambda g: {lvl: np.asarray(ids, dtype=np.intp) for lvl, ids in g.level_index.items() if lvl != "event"}
    return PreparedExample(
        example=example,
        n_segments=len(example.segments),
        v_emb=vg.feature_matrix().astype(dtype),
        v_adj=vg.adjacency_masks(),
        v_levels=levels(vg),
        v_origins=origins,
        v_labels=[n.label for n in vg.nodes],
        q_emb=qg.feature_matrix().astype(dtype),
        q_adj=qg.adjacency_masks(),
        q_levels=levels(qg),
        q_labels=[n.label for n in qg.nodes],
        frames=frames,
        seg_means=seg_means,
        pair_node=np.asarray(pair_node, dtype=np.intp),
        pair_frame=np.asarray(pair_frame, dtype=np.intp),
        pair_seg=np.asarray(pair_seg, dtype=np.intp),
        pool_starts=np.asarray(pool_starts, dtype=np.intp),
        gt=example.gt_interval,
        gt_node_idx=gt_idx,
        warnings=warnings,
    )


@dataclass
class ForwardResult:
    pred: Tensor                                # (1, 2) ordered interval
    z_posterior: LatentCorrespondence | None
    z_prior: LatentCorrespondence | None
    kl: Tensor | None
    node_labels: tuple[list[str], list[str]]    # (video+event, language+event)
    warnings: list[str] = field(default_factory=list)

    def interval(self) -> IntervalPrediction:
        return to_interval(self.pred)


class GroundingModel:
    """Parameter owner plus the forward pipeline over prepared examples."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        enc, d = config.encoder, config.encoder.d
        store = ParameterStore(seed=config.seed, dtype=config.dtype)
        store.create("input.video_label.W", (d, config.emb_dim))
        store.create("input.query_label.W", (d, config.emb_dim))
        store.create("input.frame.W", (d, config.frame_dim))
        if enc.enable_scl:
            create_scl_params(store, "scl.video", d, enc.m_layers)
            create_scl_params(store, "scl.lang", d, enc.m_layers)
        if enc.enable_vcl:
            create_vcl_params(store, "vcl", d)
        if enc.enable_hsa:
            create_hsa_params(store, "hsa.video", d, enc.n_p, enc.event_layers)
            create_hsa_params(store, "hsa.lang", d, enc.n_p, enc.event_layers)
        if config.disable_vcc:
            store.create("fusion.vis.W", (d, d))
            store.create("fusion.lang.W", (d, d))
        else:
            create_cross_graph_params(store, d)
            create_correspondence_params(store, d)
        create_fuse_params(store, d)
        create_head_params(store, d, config.head)
        self.store = store

    # -- helpers -------------------------------------------------------------

    @staticmethod
    def _check(t: Tensor, stage: str):
        if not np.isfinite(t.value).all():
            raise ComputationError(f"non-finite values after {stage}")
        return t

    def _event_levels(self, base: dict[str, np.ndarray], n_base: int) -> dict[str, np.ndarray]:
        out = dict(base)
        if self.config.encoder.enable_hsa:
            out["event"] = np.arange(n_base, n_base + self.config.encoder.n_p, dtype=np.intp)
        else:
            out["event"] = np.empty(0, dtype=np.intp)
        return out

    # -- pipeline ------------------------------------------------------------

    def forward(self, prep: PreparedExample, use_posterior: bool) -> ForwardResult:
        cfg, enc, store = self.config, self.config.encoder, self.store
        warnings: list[str] = []

        sv = self._check(matmul(Tensor(prep.v_emb), store["input.video_label.W"].T), "input_projection")
        sh = matmul(Tensor(prep.q_emb), store["input.query_label.W"].T)
        frames = matmul(Tensor(prep.frames), store["input.frame.W"].T)
        seg_feats = matmul(Tensor(prep.seg_means), store["input.frame.W"].T)

        if enc.enable_scl:
            sv = self._check(semantic_context(sv, prep.v_adj, store, "scl.video", enc), "semantic_context")
            sh = semantic_context(sh, prep.q_adj, store, "scl.lang", enc)
        if enc.enable_vcl:
            sv = self._check(
                visual_context(sv, frames, seg_feats, prep.pair_node, prep.pair_frame,
                               prep.pair_seg, prep.pool_starts, store), "visual_context")

        # global sentence feature: mean over object/action language nodes,
        # after semantic context, before event aggregation
        q = tmean(sh, axis=0)

        if enc.enable_hsa:
            m_full = concat([sv, aggregate_events(sv, store, "hsa.video", enc)], axis=0)
            h_full = concat([sh, aggregate_events(sh, store, "hsa.lang", enc)], axis=0)
            self._check(m_full, "event_aggregation")
        else:
            m_full, h_full = sv, sh
        m_levels = self._event_levels(prep.v_levels, sv.shape[0])
        h_levels = self._event_levels(prep.q_levels, sh.shape[0])

        z_post = z_prior = kl = None
        if cfg.disable_vcc:
            attn = softmax_rows(matmul(matmul(m_full, store["fusion.vis.W"].T),
                                       matmul(h_full, store["fusion.lang.W"].T).T))
            fused_in_m, mixed_h = m_full, matmul(attn, h_full)
            fused = matmul(concat([fused_in_m, mixed_h], axis=1), store["fuse.W"].T)
        else:
            m_tilde, h_tilde, cg_warn = cross_graph_conv(m_full, h_full, m_levels, h_levels, store)
            warnings.extend(cg_warn)
            self._check(m_tilde, "cross_graph")
            z_prior = prior_z(m_tilde, h_tilde, q, store)
            if use_posterior:
                z_post = posterior_z(m_tilde, h_tilde, q, prep.gt_node_idx, store)
                kl = correspondence_kl(z_post, z_prior)
                z = z_post
            else:
                z = z_prior
            self._check(z.z, "correspondence")
            fused = fuse_graphs(z.z, m_tilde, h_tilde, store)
        self._check(fused, "fusion")

        pred = predict_interval(seg_feats, fused, q, store, cfg.head)
        self._check(pred, "head")

        event_labels = [f"event:{i}" for i in range(enc.n_p)] if enc.enable_hsa else []
        return ForwardResult(
            pred=pred,
            z_posterior=z_post,
            z_prior=z_prior,
            kl=kl,
            node_labels=(prep.v_labels + event_labels, prep.q_labels + event_labels),
            warnings=prep.warnings + warnings,
        )

    def forward_train(self, prep: PreparedExample) -> ForwardResult:
        """Full pipeline with the posterior feeding the fusion; prior kept for the KL."""
        return self.forward(prep, use_posterior=not self.config.disable_vcc)

    def infer(self, prep: PreparedExample) -> IntervalPrediction:
        """Prior-driven inference; never reads the ground-truth interval."""
        with no_grad():
            return self.forward(prep, use_posterior=False).interval()

    def save(self, path: str):
        self.store.save(path)

    def load(self, path: str):
        self.store.load(path)
