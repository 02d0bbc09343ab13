"""Domain types for grounding examples, query annotations and embeddings,
plus JSONL ingestion/serialization.

The real-data path ingests externally produced SRL / dependency / detection
annotations; the synthetic path (see `world`) produces them natively. All
types are immutable after load and safe for concurrent reads.

JSONL example schema (field names normative):
  {"video_id", "query_id", "duration_s", "gt": [t_s, t_e],
   "segments": [{"frames": [[f32...]...], "objects": [...], "actions": [...]}...],
   "query": {"tokens": [{"surface","lemma","pos"}...],
             "srl": [{"pred": [i, j], "args": [[i, j]...]}...],
             "deps": [[head, dep, "rel"]...]}}
Spans are half-open token index ranges [i, j). "gt" holds a normalized
interval in [0, 1]; alternatively "gt_seconds" may be given and is divided
by "duration_s" at ingestion. Embedding files are JSONL of {"word", "vec"}.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DataError


@dataclass(frozen=True)
class Token:
    surface: str
    lemma: str
    pos: str


@dataclass(frozen=True)
class SrlStructure:
    predicate: tuple[int, int]          # half-open token span
    arguments: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class QueryAnnotation:
    tokens: tuple[Token, ...]
    srl_structures: tuple[SrlStructure, ...]
    dep_edges: tuple[tuple[int, int, str], ...]   # (head, dependent, relation)

    def lemmas(self) -> list[str]:
        return [t.lemma for t in self.tokens]

    def span_lemmas(self, span: tuple[int, int]) -> list[str]:
        return [self.tokens[i].lemma for i in range(span[0], span[1])]


@dataclass(frozen=True, eq=False)
class Segment:
    index: int
    frame_features: np.ndarray          # (K, d_f)
    object_labels: tuple[str, ...]
    action_labels: tuple[str, ...]

    @property
    def unlabeled(self) -> bool:
        return not self.object_labels and not self.action_labels


@dataclass(frozen=True, eq=False)
class GroundingExample:
    video_id: str
    query_id: str
    segments: tuple[Segment, ...]
    query: QueryAnnotation
    gt_interval: tuple[float, float] | None
    duration_s: float | None = None
    unlabeled_segments: tuple[int, ...] = ()

    def without_gt(self) -> "GroundingExample":
        """View of this example with the ground truth stripped (inference input)."""
        return replace(self, gt_interval=None)


@dataclass(frozen=True)
class QueryRecord:
    """Annotation-only corpus row, enough for split construction."""

    video_id: str
    query_id: str
    query: QueryAnnotation


@dataclass
class LineIssue:
    line: int
    query_id: str | None
    reason: str


class EmbeddingTable:
    """word -> d-vector lookup with a deterministic out-of-vocabulary policy."""

    def __init__(self, dim: int, vectors: dict[str, np.ndarray] | None = None,
                 oov_policy: str = "zero", oov_seed: int = 0):
        if oov_policy not in ("zero", "hash"):
            raise ContractError(f"unknown oov policy {oov_policy!r}")
        self.dim = dim
        self.vectors: dict[str, np.ndarray] = {}
        self.oov_policy = oov_policy
        self.oov_seed = oov_seed
        for word, vec in (vectors or {}).items():
            self.add(word, vec)

    def add(self, word: str, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ContractError(f"embedding for {word!r} has shape {vec.shape}, want ({self.dim},)")
        self.vectors[word] = vec

    def __contains__(self, word: str) -> bool:
        return word in self.vectors

    def lookup(self, word: str) -> np.ndarray:
        vec = self.vectors.get(word)
        if vec is not None:
            return vec
        if self.oov_policy == "zero":
            return np.zeros(self.dim)
        digest = hashlib.blake2b(word.encode(), digest_size=8).digest()
        rng = np.random.default_rng(np.random.SeedSequence([self.oov_seed, int.from_bytes(digest, "big")]))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)


def phrase_embedding(words: list[str], table: EmbeddingTable) -> np.ndarray:
    """Sum of per-word vectors; OOV words resolve through the table policy."""
    if not words:
        raise ContractError("phrase_embedding over an empty word list")
    out = np.zeros(table.dim)
    for w in words:
        out = out + table.lookup(w)
    return out


# ------------------------------------------------------------------ parsing


def _parse_query(blob: dict) -> QueryAnnotation:
    tokens = tuple(Token(t["surface"], t["lemma"], t["pos"]) for t in blob["tokens"])
    n = len(tokens)

    def span(raw) -> tuple[int, int]:
        i, j = int(raw[0]), int(raw[1])
        if not (0 <= i < j <= n):
            raise DataError(f"span [{i}, {j}) out of range for {n} tokens")
        return (i, j)

    srl = tuple(
        SrlStructure(span(s["pred"]), tuple(span(a) for a in s["args"]))
        for s in blob["srl"]
    )
    if not srl:
        raise DataError("query has no SRL structure")
    deps = []
    for h, d, rel in blob.get("deps", []):
        if not (0 <= int(h) < n and 0 <= int(d) < n):
            raise DataError(f"dependency edge ({h}, {d}) out of token range")
        deps.append((int(h), int(d), str(rel)))
    return QueryAnnotation(tokens, srl, tuple(deps))


def _parse_example(blob: dict, frame_dtype) -> GroundingExample:
    segments = []
    for i, seg in enumerate(blob["segments"]):
        frames = np.asarray(seg["frames"], dtype=frame_dtype)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise DataError(f"segment {i} needs at least one frame vector")
        segments.append(Segment(i, frames, tuple(seg.get("objects", ())), tuple(seg.get("actions", ()))))
    if not segments:
        raise DataError("empty segments")
    dims = {s.frame_features.shape[1] for s in segments}
    if len(dims) != 1:
        raise DataError(f"inconsistent frame dims {sorted(dims)}")
    unlabeled = tuple(s.index for s in segments if s.unlabeled)

    duration = blob.get("duration_s")
    if "gt" in blob:
        ts, te = float(blob["gt"][0]), float(blob["gt"][1])
    elif "gt_seconds" in blob:
        if not duration:
            raise DataError("gt_seconds requires duration_s")
        ts, te = float(blob["gt_seconds"][0]) / duration, float(blob["gt_seconds"][1]) / duration
    else:
        raise DataError("missing gt")
    if ts > te:
        raise DataError("inverted interval")
    if not (0.0 <= ts <= te <= 1.0):
        raise DataError(f"interval [{ts}, {te}] outside [0, 1]")

    return GroundingExample(
        video_id=str(blob["video_id"]),
        query_id=str(blob["query_id"]),
        segments=tuple(segments),
        query=_parse_query(blob["query"]),
        gt_interval=(ts, te),
        duration_s=float(duration) if duration is not None else None,
        unlabeled_segments=unlabeled,
    )


def load_corpus(path: str, embeddings: EmbeddingTable | None = None, strict: bool = False,
                precision: str = "f64") -> tuple[list[GroundingExample], list[LineIssue]]:
    """Load a JSONL corpus; invalid lines are reported (or raised when strict).

    The embedding table is accepted for interface symmetry with the synthetic
    generator; lookups happen lazily at graph-build time.
    """
    del embeddings
    dtype = np.float32 if precision == "f32" else np.float64
    examples, issues = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            qid = None
            try:
                blob = json.loads(line)
                qid = blob.get("query_id")
                examples.append(_parse_example(blob, dtype))
            except (DataError, KeyError, ValueError, TypeError) as e:
                reason = str(e) or e.__class__.__name__
                if strict:
                    raise DataError(f"line {lineno}: {reason}") from e
                issues.append(LineIssue(lineno, qid, reason))
    return examples, issues


def load_query_corpus(path: str, strict: bool = False) -> tuple[list[QueryRecord], list[LineIssue]]:
    """Lenient loader for split construction: segments/gt/frames may be absent."""
    records, issues = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            blob = None
            try:
                blob = json.loads(line)
                records.append(QueryRecord(str(blob["video_id"]), str(blob["query_id"]), _parse_query(blob["query"])))
            except (DataError, KeyError, ValueError, TypeError) as e:
                reason = str(e) or e.__class__.__name__
                if strict:
                    raise DataError(f"line {lineno}: {reason}") from e
                issues.append(LineIssue(lineno, blob.get("query_id") if isinstance(blob, dict) else None, reason))
    return records, issues


# ------------------------------------------------------------------ writing


def query_to_json(query: QueryAnnotation) -> dict:
    return {
        "tokens": [{"surface": t.surface, "lemma": t.lemma, "pos": t.pos} for t in query.tokens],
        "srl": [{"pred": list(s.predicate), "args": [list(a) for a in s.arguments]} for s in query.srl_structures],
        "deps": [[h, d, rel] for h, d, rel in query.dep_edges],
    }


def example_to_json(ex: GroundingExample) -> dict:
    blob = {
        "video_id": ex.video_id,
        "query_id": ex.query_id,
        "gt": [ex.gt_interval[0], ex.gt_interval[1]] if ex.gt_interval else None,
        "segments": [
            {
                "frames": [[float(x) for x in row] for row in s.frame_features],
                "objects": list(s.object_labels),
                "actions": list(s.action_labels),
            }
            for s in ex.segments
        ],
        "query": query_to_json(ex.query),
    }
    if ex.duration_s is not None:
        blob["duration_s"] = ex.duration_s
    return blob


def save_corpus(examples, path: str):
    with open(path, "w") as f:
        for ex in examples:
            blob = example_to_json(ex) if isinstance(ex, GroundingExample) else {
                "video_id": ex.video_id, "query_id": ex.query_id, "query": query_to_json(ex.query)}
            f.write(json.dumps(blob, sort_keys=True))
            f.write("\n")


def save_embeddings(table: EmbeddingTable, path: str):
    with open(path, "w") as f:
        for word in sorted(table.vectors):
            f.write(json.dumps({"word": word, "vec": [float(x) for x in table.vectors[word]]}, sort_keys=True))
            f.write("\n")


def load_embeddings(path: str, oov_policy: str = "zero", oov_seed: int = 0) -> EmbeddingTable:
    table = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            blob = json.loads(line)
            vec = np.asarray(blob["vec"], dtype=np.float64)
            if table is None:
                table = EmbeddingTable(vec.shape[0], oov_policy=oov_policy, oov_seed=oov_seed)
            try:
                table.add(blob["word"], vec)
            except ContractError as e:
                raise DataError(f"line {lineno}: {e}") from e
    if table is None:
        raise DataError(f"no embeddings in {path}")
    return table


def examples_equal(a: GroundingExample, b: GroundingExample) -> bool:
    """Field-wise equality (arrays compared exactly); used by round-trip tests."""
    if (a.video_id, a.query_id, a.duration_s, a.gt_interval, a.query) != (
            b.video_id, b.query_id, b.duration_s, b.gt_interval, b.query):
        return False
    if len(a.segments) != len(b.segments):
        return False
    for sa, sb in zip(a.segments, b.segments):
        if (sa.index, sa.object_labels, sa.action_labels) != (sb.index, sb.object_labels, sb.action_labels):
            return False
        if not np.array_equal(sa.frame_features, sb.frame_features):
            return False
    return True
