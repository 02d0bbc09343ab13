"""Initial semantic graphs for both modalities.

A video graph gets one object node per detected object label and one action
node per detected action label, per segment. A query graph gets one action
node per SRL predicate and one object node per argument span; a span serving
several predicates is duplicated per predicate. Edges are undirected and
typed: object-object within a segment (or SRL structure), action-object
within a segment (or structure), action-action between all action nodes.

Node ordering is fixed so downstream attention matrices are reproducible:
video graphs are segment-major with objects before actions; query graphs are
structure-major with the action node first. Event nodes do not exist here;
they are appended by the hierarchy aggregation stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import EmbeddingTable, GroundingExample, QueryAnnotation, phrase_embedding
from .errors import DataError

EDGE_TYPES = ("action-action", "action-object", "object-object")

OBJECT, ACTION, EVENT = "object", "action", "event"


@dataclass(frozen=True, eq=False)
class Node:
    id: int
    level: str                  # object | action | event
    feature: np.ndarray         # raw embedding-space feature
    origin: int                 # segment index or SRL structure index
    label: str


@dataclass(eq=False)
class SemanticGraph:
    nodes: list[Node]
    edges: list[tuple[int, int, str]]
    modality: str               # "video" | "language"
    level_index: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.level_index:
            self.level_index = {lvl: [n.id for n in self.nodes if n.level == lvl]
                                for lvl in (OBJECT, ACTION, EVENT)}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def feature_matrix(self) -> np.ndarray:
        return np.stack([n.feature for n in self.nodes])

    def adjacency_masks(self) -> dict[str, np.ndarray]:
        """Boolean neighbor masks per edge type; symmetric, no self entries."""
        n = self.n_nodes
        masks = {t: np.zeros((n, n), dtype=bool) for t in EDGE_TYPES}
        for i, j, t in self.edges:
            masks[t][i, j] = True
            masks[t][j, i] = True
        return masks


def _edge_type(a: Node, b: Node) -> str:
    levels = {a.level, b.level}
    if levels == {ACTION}:
        return "action-action"
    if levels == {OBJECT}:
        return "object-object"
    return "action-object"


def _connect_group(edges, group_nodes):
    """Within one segment/structure: all object-object pairs + action-object pairs."""
    objects = [n for n in group_nodes if n.level == OBJECT]
    actions = [n for n in group_nodes if n.level == ACTION]
    for i, a in enumerate(objects):
        for b in objects[i + 1:]:
            edges.append((a.id, b.id, "object-object"))
    for a in actions:
        for b in objects:
            edges.append((a.id, b.id, "action-object"))


def _connect_all_actions(edges, nodes):
    actions = [n for n in nodes if n.level == ACTION]
    for i, a in enumerate(actions):
        for b in actions[i + 1:]:
            edges.append((a.id, b.id, "action-action"))


def build_video_graph(example: GroundingExample, emb: EmbeddingTable) -> SemanticGraph:
    """Object/action nodes per segment from detected labels, typed edges."""
    nodes: list[Node] = []
    edges: list[tuple[int, int, str]] = []
    for seg in example.segments:
        group: list[Node] = []
        for label in seg.object_labels:
            group.append(Node(len(nodes) + len(group), OBJECT,
                              phrase_embedding(label.split(), emb), seg.index, label))
        for label in seg.action_labels:
            group.append(Node(len(nodes) + len(group), ACTION,
                              phrase_embedding(label.split(), emb), seg.index, label))
        _connect_group(edges, group)
        nodes.extend(group)
    if not nodes:
        raise DataError(f"example {example.query_id}: no labeled segments to build a graph from")
    _connect_all_actions(edges, nodes)
    return SemanticGraph(nodes, edges, "video")


def build_query_graph(query: QueryAnnotation, emb: EmbeddingTable) -> SemanticGraph:
    """Action node per predicate, object node per argument span, per structure."""
    if not query.srl_structures:
        raise DataError("query has no SRL structures")
    nodes: list[Node] = []
    edges: list[tuple[int, int, str]] = []
    for si, struct in enumerate(query.srl_structures):
        pred_words = query.span_lemmas(struct.predicate)
        if not pred_words:
            raise DataError(f"structure {si} has an empty predicate span")
        group = [Node(len(nodes), ACTION, phrase_embedding(pred_words, emb), si, " ".join(pred_words))]
        for span in struct.arguments:
            words = query.span_lemmas(span)
            group.append(Node(len(nodes) + len(group), OBJECT,
                              phrase_embedding(words, emb), si, " ".join(words)))
        _connect_group(edges, group)
        nodes.extend(group)
    _connect_all_actions(edges, nodes)
    return SemanticGraph(nodes, edges, "language")


def graph_to_json(graph: SemanticGraph) -> dict:
    return {
        "modality": graph.modality,
        "nodes": [
            {"id": n.id, "level": n.level, "origin": n.origin, "label": n.label,
             "feature": [float(x) for x in n.feature]}
            for n in graph.nodes
        ],
        "edges": [[i, j, t] for i, j, t in graph.edges],
    }
