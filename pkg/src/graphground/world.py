"""Seeded synthetic compositional world.

Videos are sequences of segments, each carrying one (action, object) pair;
the query names one pair occurring in the video and the ground truth is the
normalized extent of the contiguous run of segments carrying it. Held-out
pairs never appear in training queries (nor in training videos), while both
their components do, which is exactly the novel-composition condition the
benchmark needs.

Two properties make the world a meaningful probe:
  * frame features carry the segment's content plus a sinusoidal encoding of
    its temporal position (scaled by `pos_scale`; set it to 0 for the
    position-free variant) - without a positional component every pipeline
    stage is permutation-equivariant over segments, so no model of this
    family could localize anything;
  * part of the lexicon is usable in both roles and videos may contain the
    reversed pair of the target as a distractor run, so word order carries
    real information (`n_shared`, `p_reverse`).

Everything is a pure function of the seed; per-example seeds are derived so
generation parallelizes without changing output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import (
    EmbeddingTable,
    GroundingExample,
    QueryAnnotation,
    QueryRecord,
    Segment,
    SrlStructure,
    Token,
)
from .errors import ConfigError, ContractError

ACTION_WORDS = ["spin", "lift", "fold", "tap", "roll", "drag", "flip", "shake",
                "tilt", "poke", "swing", "bounce"]
OBJECT_WORDS = ["box", "ball", "cup", "rope", "drum", "ring", "fan", "kite",
                "cone", "tube", "bell", "brick"]


@dataclass
class WorldConfig:
    n_actions: int = 8
    n_objects: int = 8
    n_shared: int = 6            # lemmas usable in both roles
    d_emb: int = 16
    d_frame: int = 16
    t_min: int = 4
    t_max: int = 8
    k_frames: int = 3
    noise_sigma: float = 0.1
    pos_scale: float = 1.0       # 0 disables the temporal encoding
    p_reverse: float = 0.6       # chance of a reversed-pair distractor run
    max_run: int = 3
    distractor_variety: int = 0  # distinct distractor pairs per video; 0 = unlimited
    label_noise: float = 0.0
    n_train: int = 500
    n_seen_test: int = 100
    n_novel_test: int = 100
    heldout_count: int = 6
    heldout_pairs: list[tuple[str, str]] = field(default_factory=list)
    seg_seconds: float = 2.0
    seed: int = 0

    def validate(self):
        if self.noise_sigma < 0:
            raise ConfigError("world.noise_sigma must be >= 0")
        if not (1 <= self.t_min <= self.t_max):
            raise ConfigError("world t range invalid")
        if self.k_frames < 1:
            raise ConfigError("world.k_frames must be >= 1")
        if self.n_shared > min(self.n_actions, self.n_objects):
            raise ConfigError("world.n_shared exceeds a vocabulary size")


@dataclass
class World:
    config: WorldConfig
    actions: list[str]
    objects: list[str]
    table: EmbeddingTable
    frame_proj: np.ndarray            # (d_frame, d_emb), fixed per world
    heldout: list[tuple[str, str]]
    seen_pairs: list[tuple[str, str]]


def _vocab(cfg: WorldConfig) -> tuple[list[str], list[str]]:
    def extend(base, n, prefix):
        words = list(base)
        while len(words) < n:
            words.append(f"{prefix}{len(words)}")
        return words[:n]

    actions = extend(ACTION_WORDS, cfg.n_actions, "act")
    own_objects = [w for w in OBJECT_WORDS if w not in actions]
    objects = actions[:cfg.n_shared] + extend(own_objects, cfg.n_objects - cfg.n_shared, "obj")
    return actions, objects


def _positional_encoding(t: int, t_count: int, d: int, scale: float) -> np.ndarray:
    """Temporal tag of segment t: geometric ladder of sin/cos phasors.

    Low frequencies make the run center and extent recoverable from a pooled
    mean; the high end acts as a quasi-orthogonal per-segment address that
    lets segment features bind to their graph nodes.
    """
    if scale == 0.0:
        return np.zeros(d)
    u = (t + 0.5) / t_count
    out = np.zeros(d)
    for k in range((d + 1) // 2):
        freq = 0.5 * (1.55 ** k)
        out[2 * k] = math.sin(2.0 * math.pi * freq * u)
        if 2 * k + 1 < d:
            out[2 * k + 1] = math.cos(2.0 * math.pi * freq * u)
    return scale * out


def build_world(cfg: WorldConfig) -> World:
    cfg.validate()
    actions, objects = _vocab(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE0B]))
    table = EmbeddingTable(cfg.d_emb)
    for word in sorted(set(actions) | set(objects)):
        v = rng.standard_normal(cfg.d_emb)
        table.add(word, v / np.linalg.norm(v))
    frame_proj = rng.standard_normal((cfg.d_frame, cfg.d_emb)) / math.sqrt(cfg.d_emb)

    all_pairs = [(a, o) for a in actions for o in objects if a != o]
    if cfg.heldout_pairs:
        heldout = [tuple(p) for p in cfg.heldout_pairs]
    else:
        heldout = []
        for i in range(cfg.heldout_count):
            pair = (actions[i % cfg.n_actions], objects[(i + 3) % cfg.n_objects])
            if pair[0] != pair[1]:
                heldout.append(pair)
    bad = [p for p in heldout if p not in all_pairs]
    if bad:
        raise ConfigError(f"held-out pairs invalid for this vocabulary: {bad}")
    seen = [p for p in all_pairs if p not in set(heldout)]
    for a, o in heldout:
        if not any(p[0] == a for p in seen) or not any(p[1] == o for p in seen):
            raise ConfigError(f"held-out pair ({a}, {o}) has a component absent from all training pairs")
    return World(cfg, actions, objects, table, frame_proj, heldout, seen)


def _segment_frames(world: World, pair: tuple[str, str], t: int, t_count: int,
                    rng: np.random.Generator) -> np.ndarray:
    cfg = world.config
    content = world.frame_proj @ (world.table.lookup(pair[0]) + world.table.lookup(pair[1]))
    base = content + _positional_encoding(t, t_count, cfg.d_frame, cfg.pos_scale)
    noise = rng.standard_normal((cfg.k_frames, cfg.d_frame)) * cfg.noise_sigma
    return base[None, :] + noise


def _pair_query(pair: tuple[str, str]) -> QueryAnnotation:
    tokens = (Token(pair[0], pair[0], "VERB"), Token(pair[1], pair[1], "NOUN"))
    srl = (SrlStructure((0, 1), ((1, 2),)),)
    return QueryAnnotation(tokens, srl, ((0, 1, "obj"),))


def synthesize_example(world: World, video_id: str, query_id: str, t_count: int,
                       run_start: int, run_len: int, pair: tuple[str, str],
                       distractor_pool: list[tuple[str, str]], rng: np.random.Generator,
                       reverse_run: tuple[int, int] | None = None) -> GroundingExample:
    """Deterministic single-example construction; the generator and tests share it."""
    if not (0 <= run_start and run_start + run_len <= t_count and run_len >= 1):
        raise ContractError("run does not fit the segment count")
    cfg = world.config
    pairs: list[tuple[str, str]] = []
    pool = [p for p in distractor_pool if p != pair]
    if cfg.distractor_variety and len(pool) > cfg.distractor_variety:
        pool = [pool[int(i)] for i in rng.choice(len(pool), size=cfg.distractor_variety, replace=False)]
    for t in range(t_count):
        if run_start <= t < run_start + run_len:
            pairs.append(pair)
        else:
            pairs.append(pool[int(rng.integers(len(pool)))])
    if reverse_run is not None:
        rev = (pair[1], pair[0])
        lo, hi = reverse_run
        for t in range(lo, hi):
            pairs[t] = rev

    segments = []
    for t, seg_pair in enumerate(pairs):
        action, obj = seg_pair
        if cfg.label_noise and rng.random() < cfg.label_noise:
            action = world.actions[int(rng.integers(len(world.actions)))]
        segments.append(Segment(
            index=t,
            frame_features=_segment_frames(world, seg_pair, t, t_count, rng),
            object_labels=(obj,),
            action_labels=(action,),
        ))
    gt = (run_start / t_count, (run_start + run_len) / t_count)
    return GroundingExample(
        video_id=video_id,
        query_id=query_id,
        segments=tuple(segments),
        query=_pair_query(pair),
        gt_interval=gt,
        duration_s=t_count * cfg.seg_seconds,
    )


def _reverse_slot(t_count: int, run_start: int, run_len: int, rng: np.random.Generator):
    """A contiguous free slot for the reversed-pair distractor, if any."""
    gaps = []
    if run_start >= 1:
        gaps.append((0, run_start))
    if run_start + run_len < t_count:
        gaps.append((run_start + run_len, t_count))
    gaps = [g for g in gaps if g[1] - g[0] >= 1]
    if not gaps:
        return None
    lo, hi = gaps[int(rng.integers(len(gaps)))]
    length = int(rng.integers(1, min(2, hi - lo) + 1))
    start = int(rng.integers(lo, hi - length + 1))
    return (start, start + length)


def _one_example(world: World, split: str, index: int, pair_pool, distractor_pool,
                 seed_seq) -> GroundingExample:
    cfg = world.config
    rng = np.random.default_rng(seed_seq)
    t_count = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    pair = pair_pool[int(rng.integers(len(pair_pool)))]
    run_len = int(rng.integers(1, min(cfg.max_run, max(1, t_count - 1)) + 1))
    run_start = int(rng.integers(0, t_count - run_len + 1))
    reverse = None
    rev_pair = (pair[1], pair[0])
    if rev_pair in set(distractor_pool) and rng.random() < cfg.p_reverse:
        reverse = _reverse_slot(t_count, run_start, run_len, rng)
    return synthesize_example(world, f"v-{split}-{index:05d}", f"q-{split}-{index:05d}",
                              t_count, run_start, run_len, pair, distractor_pool, rng,
                              reverse_run=reverse)


def generate_corpus(cfg: WorldConfig, workers: int = 1) -> tuple[list[GroundingExample], list[GroundingExample],
                                                                 list[GroundingExample], EmbeddingTable]:
    """(train, seen-test, novel-composition, embeddings) for one seeded world.

    Training videos never contain a held-out pair anywhere; novel-composition
    queries target held-out pairs amid seen distractors. Per-example seeds are
    pre-spawned, so the output is byte-identical for any worker count.
    """
    world = build_world(cfg)
    if cfg.n_novel_test and not world.heldout:
        raise ConfigError("novel-composition split requested but no held-out pairs configured")
    root = np.random.SeedSequence([cfg.seed, 0xC0]).spawn(cfg.n_train + cfg.n_seen_test + cfg.n_novel_test)
    tasks = []
    for i in range(cfg.n_train):
        tasks.append((world, "train", i, world.seen_pairs, world.seen_pairs, root[i]))
    off = cfg.n_train
    for i in range(cfg.n_seen_test):
        tasks.append((world, "seen", i, world.seen_pairs, world.seen_pairs, root[off + i]))
    off += cfg.n_seen_test
    for i in range(cfg.n_novel_test):
        tasks.append((world, "novel", i, world.heldout, world.seen_pairs, root[off + i]))

    if workers > 1 and len(tasks) >= 200:
        import multiprocessing

        with multiprocessing.Pool(workers) as pool:
            examples = pool.starmap(_one_example, tasks, chunksize=max(1, len(tasks) // (workers * 4)))
    else:
        examples = [_one_example(*task) for task in tasks]
    train = examples[:cfg.n_train]
    seen = examples[cfg.n_train:cfg.n_train + cfg.n_seen_test]
    novel = examples[cfg.n_train + cfg.n_seen_test:]
    return train, seen, novel, world.table


def world_config_dict(cfg: WorldConfig) -> dict:
    """Config echo plus the held-out pair list (the world manifest)."""
    world = build_world(cfg)
    blob = {k: v for k, v in vars(cfg).items()}
    blob["heldout_pairs"] = [list(p) for p in world.heldout]
    blob["actions"] = world.actions
    blob["objects"] = world.objects
    return blob


def random_baseline_miou(examples: list[GroundingExample], trials: int, seed: int = 0) -> float:
    """Monte-Carlo mean IoU of uniformly random sorted-uniform intervals vs gt."""
    if trials < 1:
        raise ContractError("random_baseline_miou needs trials >= 1")
    if not examples:
        raise ContractError("random_baseline_miou over an empty corpus")
    rng = np.random.default_rng(seed)
    total = 0.0
    for ex in examples:
        a, b = ex.gt_interval
        pts = np.sort(rng.random((trials, 2)), axis=1)
        inter = np.maximum(0.0, np.minimum(pts[:, 1], b) - np.maximum(pts[:, 0], a))
        union = (pts[:, 1] - pts[:, 0]) + (b - a) - inter
        iou = np.where(union > 0, inter / np.maximum(union, 1e-300), 0.0)
        total += float(iou.mean())
    return total / len(examples)


# ------------------------------------------------------- annotated corpus


VERB_POOL = ACTION_WORDS
NOUN_POOL = OBJECT_WORDS + ["lamp", "chair", "stone", "wheel", "glass", "plate"]
ADJ_POOL = ["red", "big", "flat", "thin", "round", "dark", "soft", "wide"]
ADV_POOL = ["slowly", "twice", "gently", "fast", "firmly", "loosely"]
PREP_POOL = ["on", "under", "near", "behind", "inside"]
TAIL_NOUNS = ["prism", "gourd", "awl", "spool", "crate", "visor", "ingot", "easel"]
TAIL_VERBS = ["nudge", "hoist", "wedge", "skim"]
SUBJECT_POOL = ["person", "man", "woman", "kid", "worker", "group"]
RARE_SUBJECTS = ["welder", "archer", "juggler", "piper", "cooper", "farrier", "ostler",
                 "glazier", "turner", "fuller", "sawyer", "tinker", "falconer", "lutist"]


def _weighted(rng, pool):
    # mild frequency skew so some lemmas stay rare enough to escape training
    w = 1.0 / (np.arange(len(pool)) + 2.0)
    return pool[int(rng.choice(len(pool), p=w / w.sum()))]


def generate_annotated_corpus(n_queries: int = 1000, seed: int = 0,
                              queries_per_video: int = 3) -> list[QueryRecord]:
    """Annotation-only queries covering all five composition patterns.

    Subjects hang off an nsubj edge, which none of the composition patterns
    consume; a slice of them are single-use rare lemmas, so every seed keeps
    some lemmas out of training entirely (novel-word candidates).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
    records = []
    rare_uses = 0
    for i in range(n_queries):
        tail = rng.random() < 0.1
        verb = _weighted(rng, TAIL_VERBS) if tail and rng.random() < 0.4 else _weighted(rng, VERB_POOL)
        noun = _weighted(rng, TAIL_NOUNS) if tail else _weighted(rng, NOUN_POOL)

        draw = rng.random()
        if draw < 0.05:
            base = RARE_SUBJECTS[rare_uses % len(RARE_SUBJECTS)]
            subject = base if rare_uses < len(RARE_SUBJECTS) else f"{base}{rare_uses // len(RARE_SUBJECTS)}"
            rare_uses += 1
        elif draw < 0.55:
            subject = _weighted(rng, SUBJECT_POOL)
        else:
            subject = None
        off = 1 if subject else 0

        tokens = ([Token(subject, subject, "NOUN")] if subject else []) + [Token(verb, verb, "VERB")]
        deps = [(off, 0, "nsubj")] if subject else []
        args = [(0, 1)] if subject else []
        template = int(rng.integers(0, 5))
        if template == 0:          # verb noun
            tokens.append(Token(noun, noun, "NOUN"))
            deps.append((off, off + 1, "obj"))
            args.append((off + 1, off + 2))
        elif template == 1:        # verb adv noun
            adv = _weighted(rng, ADV_POOL)
            tokens += [Token(adv, adv, "ADV"), Token(noun, noun, "NOUN")]
            deps += [(off, off + 1, "advmod"), (off, off + 2, "obj")]
            args.append((off + 2, off + 3))
        elif template == 2:        # verb adj noun
            adj = _weighted(rng, ADJ_POOL)
            tokens += [Token(adj, adj, "ADJ"), Token(noun, noun, "NOUN")]
            deps += [(off + 2, off + 1, "amod"), (off, off + 2, "obj")]
            args.append((off + 1, off + 3))
        elif template == 3:        # verb noun prep noun2
            prep = _weighted(rng, PREP_POOL)
            noun2 = _weighted(rng, NOUN_POOL)
            tokens += [Token(noun, noun, "NOUN"), Token(prep, prep, "ADP"), Token(noun2, noun2, "NOUN")]
            deps += [(off, off + 1, "obj"), (off + 3, off + 2, "case")]
            args += [(off + 1, off + 2), (off + 2, off + 4)]
        else:                      # verb nounA nounB (compound)
            noun2 = _weighted(rng, NOUN_POOL)
            tokens += [Token(noun, noun, "NOUN"), Token(noun2, noun2, "NOUN")]
            deps += [(off, off + 2, "obj"), (off + 2, off + 1, "compound")]
            args.append((off + 1, off + 3))
        query = QueryAnnotation(tuple(tokens), (SrlStructure((off, off + 1), tuple(args)),), tuple(deps))
        records.append(QueryRecord(f"av{i // queries_per_video:05d}", f"aq{i:05d}", query))
    return records
