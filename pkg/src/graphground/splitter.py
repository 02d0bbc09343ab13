"""Compositional re-splitting: composition extraction from dependency parses,
per-type composition tables, coverage sampling, novel-composition /
novel-word assignment, and video-disjointness propagation.

The assignment procedure, in order:
  1. extract compositions for every query and build the five tables;
  2. coverage-sample every table (one cell per row, then per uncovered
     column); queries containing a sampled composition go to training;
  3. every other query of a training video follows it into training;
  4. cells whose composition occurs in no training query while both
     component lemmas occur in training are novel-eligible; sampled cells
     send their queries to novel-composition;
  5. lemmas absent from training are sampled as novel words; their queries
     go to novel-word (novel-composition wins conflicts);
  6. remaining queries on videos touched by 4/5 go to test-trivial;
  7. anything still unassigned goes to test-trivial.

Precedence training > novel-composition > novel-word > test-trivial; every
query is assigned exactly once, and no video is shared between training and
any test split. Fixed seed, fixed corpus => identical assignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import QueryAnnotation
from .errors import ConfigError

COMPOSITION_TYPES = ("verb-noun", "adj-noun", "noun-noun", "verb-adv", "prep-noun")

SPLIT_TRAINING = "training"
SPLIT_NOVEL_COMPOSITION = "novel-composition"
SPLIT_NOVEL_WORD = "novel-word"
SPLIT_TEST_TRIVIAL = "test-trivial"
SPLITS = (SPLIT_TRAINING, SPLIT_NOVEL_COMPOSITION, SPLIT_NOVEL_WORD, SPLIT_TEST_TRIVIAL)

_NOUN_TAGS = {"NOUN", "PROPN"}


@dataclass(frozen=True)
class Composition:
    ctype: str
    first: str
    second: str

    def key(self) -> tuple[str, str, str]:
        return (self.ctype, self.first, self.second)


def extract_compositions(query: QueryAnnotation) -> list[Composition]:
    """Universal-Dependencies-style patterns over (head, dependent, relation).

    verb-noun: obj/dobj with a VERB head and a noun dependent;
    adj-noun: amod; noun-noun: compound; verb-adv: advmod on a VERB;
    prep-noun: case with an ADP dependent on a noun head (or pobj).
    Lemmas are lowercased; order within a pair is (modifier-or-verb, head).
    """
    toks = query.tokens
    out = []
    for h, d, rel in query.dep_edges:
        head, dep = toks[h], toks[d]
        hl, dl = head.lemma.lower(), dep.lemma.lower()
        if rel in ("obj", "dobj") and head.pos == "VERB" and dep.pos in _NOUN_TAGS:
            out.append(Composition("verb-noun", hl, dl))
        elif rel == "amod" and dep.pos == "ADJ" and head.pos in _NOUN_TAGS:
            out.append(Composition("adj-noun", dl, hl))
        elif rel == "compound" and dep.pos in _NOUN_TAGS and head.pos in _NOUN_TAGS:
            out.append(Composition("noun-noun", dl, hl))
        elif rel == "advmod" and head.pos == "VERB" and dep.pos == "ADV":
            out.append(Composition("verb-adv", hl, dl))
        elif rel == "case" and dep.pos == "ADP" and head.pos in _NOUN_TAGS:
            out.append(Composition("prep-noun", dl, hl))
        elif rel == "pobj" and head.pos == "ADP" and dep.pos in _NOUN_TAGS:
            out.append(Composition("prep-noun", hl, dl))
    return out


@dataclass
class CompositionTable:
    ctype: str
    cells: dict[tuple[str, str], set[str]] = field(default_factory=dict)

    def add(self, comp: Composition, query_id: str):
        self.cells.setdefault((comp.first, comp.second), set()).add(query_id)

    def rows(self) -> list[str]:
        return sorted({first for first, _ in self.cells})

    def cols(self) -> list[str]:
        return sorted({second for _, second in self.cells})

    @property
    def n_cells(self) -> int:
        return len(self.cells)


def build_tables(records) -> tuple[dict[str, CompositionTable], dict[str, list[Composition]]]:
    """(per-type tables, per-query composition lists) over the whole corpus."""
    tables = {c: CompositionTable(c) for c in COMPOSITION_TYPES}
    per_query: dict[str, list[Composition]] = {}
    for rec in records:
        comps = extract_compositions(rec.query)
        per_query[rec.query_id] = comps
        for comp in comps:
            tables[comp.ctype].add(comp, rec.query_id)
    return tables, per_query


def coverage_sample(table: CompositionTable, rng: np.random.Generator) -> set[tuple[str, str]]:
    """One uniform cell per row, then one per still-uncovered column."""
    chosen: set[tuple[str, str]] = set()
    by_row: dict[str, list[tuple[str, str]]] = {}
    by_col: dict[str, list[tuple[str, str]]] = {}
    for cell in sorted(table.cells):
        by_row.setdefault(cell[0], []).append(cell)
        by_col.setdefault(cell[1], []).append(cell)
    for row in sorted(by_row):
        cells = by_row[row]
        chosen.add(cells[int(rng.integers(len(cells)))])
    covered_cols = {c for _, c in chosen}
    for col in sorted(by_col):
        if col in covered_cols:
            continue
        cells = by_col[col]
        chosen.add(cells[int(rng.integers(len(cells)))])
    return chosen


@dataclass
class SplitConfig:
    comp_quota: dict[str, int] = field(default_factory=lambda: {c: 4 for c in COMPOSITION_TYPES})
    novel_word_count: int = 3
    drop_query_ids: set[str] = field(default_factory=set)   # external pre-filter hook

    def validate(self):
        for ctype in self.comp_quota:
            if ctype not in COMPOSITION_TYPES:
                raise ConfigError(f"unknown composition type {ctype!r}")
        if self.novel_word_count < 0:
            raise ConfigError("split.novel_word_count must be >= 0")


@dataclass
class SplitAssignment:
    assignment: dict[str, str]                         # query id -> split
    novel_compositions: dict[str, Composition]         # query id -> trigger
    novel_words: dict[str, str]                        # query id -> trigger lemma
    sampled_cover: dict[str, list[tuple[str, str]]]    # ctype -> covering cells
    shortfalls: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in SPLITS}
        for split in self.assignment.values():
            out[split] += 1
        return out

    def ids_for(self, split: str) -> list[str]:
        return [qid for qid, s in self.assignment.items() if s == split]

    def to_dict(self) -> dict:
        return {
            "counts": self.counts(),
            "novel_compositions": {qid: list(c.key()) for qid, c in sorted(self.novel_compositions.items())},
            "novel_words": dict(sorted(self.novel_words.items())),
            "sampled_cover": {c: [list(p) for p in sorted(cells)] for c, cells in self.sampled_cover.items()},
            "shortfalls": self.shortfalls,
            "dropped": self.dropped,
        }


def _query_lemmas(query: QueryAnnotation) -> set[str]:
    return {t.lemma.lower() for t in query.tokens}


def assign_splits(records, config: SplitConfig, seed: int) -> SplitAssignment:
    """Run the full re-splitting procedure over annotation records."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x59117]))
    records = [r for r in records if r.query_id not in config.drop_query_ids]
    dropped = sorted(config.drop_query_ids)
    by_id = {r.query_id: r for r in records}
    if len(by_id) != len(records):
        raise ConfigError("duplicate query ids in corpus")
    video_of = {r.query_id: r.video_id for r in records}
    queries_of_video: dict[str, list[str]] = {}
    for r in records:
        queries_of_video.setdefault(r.video_id, []).append(r.query_id)

    tables, per_query = build_tables(records)

    # 1-2: coverage sampling -> training
    sampled_cover: dict[str, list[tuple[str, str]]] = {}
    covered: set[tuple[str, str, str]] = set()
    for ctype in COMPOSITION_TYPES:
        cells = coverage_sample(tables[ctype], rng)
        sampled_cover[ctype] = sorted(cells)
        covered |= {(ctype, f, s) for f, s in cells}
    assignment: dict[str, str] = {}
    for r in records:
        if any(c.key() in covered for c in per_query[r.query_id]):
            assignment[r.query_id] = SPLIT_TRAINING

    # 3: propagate within training videos
    training_videos = {video_of[qid] for qid in assignment}
    for vid in sorted(training_videos):
        for qid in queries_of_video[vid]:
            assignment[qid] = SPLIT_TRAINING

    training_comps = {c.key() for qid, s in assignment.items() if s == SPLIT_TRAINING
                      for c in per_query[qid]}
    training_lemmas = set()
    for qid, s in assignment.items():
        if s == SPLIT_TRAINING:
            training_lemmas |= _query_lemmas(by_id[qid].query)

    shortfalls: list[str] = []

    # 4: novel compositions
    novel_comp_audit: dict[str, Composition] = {}
    for ctype in COMPOSITION_TYPES:
        eligible = sorted(
            cell for cell in tables[ctype].cells
            if (ctype, cell[0], cell[1]) not in training_comps
            and cell[0] in training_lemmas and cell[1] in training_lemmas
        )
        quota = config.comp_quota.get(ctype, 0)
        if len(eligible) < quota:
            shortfalls.append(f"{ctype}: wanted {quota} novel cells, only {len(eligible)} eligible")
        if not eligible or quota == 0:
            continue
        picked_idx = rng.choice(len(eligible), size=min(quota, len(eligible)), replace=False)
        for idx in picked_idx:
            first, second = eligible[int(idx)]
            comp = Composition(ctype, first, second)
            for qid in sorted(tables[ctype].cells[(first, second)]):
                if qid not in assignment:
                    assignment[qid] = SPLIT_NOVEL_COMPOSITION
                    novel_comp_audit[qid] = comp

    # 5: novel words
    novel_word_audit: dict[str, str] = {}
    candidates = sorted({lemma for r in records if r.query_id not in assignment
                         for lemma in _query_lemmas(r.query)} - training_lemmas)
    if len(candidates) < config.novel_word_count:
        shortfalls.append(f"novel words: wanted {config.novel_word_count}, only {len(candidates)} candidate lemmas")
    if candidates and config.novel_word_count:
        picked_idx = rng.choice(len(candidates), size=min(config.novel_word_count, len(candidates)),
                                replace=False)
        for idx in picked_idx:
            lemma = candidates[int(idx)]
            for r in records:
                if r.query_id not in assignment and lemma in _query_lemmas(r.query):
                    assignment[r.query_id] = SPLIT_NOVEL_WORD
                    novel_word_audit[r.query_id] = lemma

    # 6: twins of novel queries -> test-trivial
    touched = {video_of[qid] for qid, s in assignment.items()
               if s in (SPLIT_NOVEL_COMPOSITION, SPLIT_NOVEL_WORD)}
    for vid in sorted(touched):
        for qid in queries_of_video[vid]:
            if qid not in assignment:
                assignment[qid] = SPLIT_TEST_TRIVIAL

    # 7: leftovers
    for r in records:
        if r.query_id not in assignment:
            assignment[r.query_id] = SPLIT_TEST_TRIVIAL

    return SplitAssignment(assignment, novel_comp_audit, novel_word_audit,
                           sampled_cover, shortfalls, dropped)


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: list[str] = field(default_factory=list)


@dataclass
class ValidationReport:
    checks: list[CheckResult]
    counts: dict[str, int]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"passed": self.all_passed, "counts": self.counts,
                "checks": [{"name": c.name, "passed": c.passed, "details": c.details}
                           for c in self.checks]}


def validate_splits(records, assignment: SplitAssignment) -> ValidationReport:
    """Video disjointness, component coverage, novel-word absence, partition totality."""
    by_id = {r.query_id: r for r in records}
    split_of = assignment.assignment

    totality = CheckResult("partition-totality", True)
    missing = sorted(set(by_id) - set(split_of))
    extra = sorted(set(split_of) - set(by_id))
    if missing or extra:
        totality.passed = False
        totality.details.append(f"unassigned={missing[:5]} unknown={extra[:5]}")

    train_videos = {by_id[qid].video_id for qid, s in split_of.items()
                    if s == SPLIT_TRAINING and qid in by_id}
    test_videos = {by_id[qid].video_id for qid, s in split_of.items()
                   if s != SPLIT_TRAINING and qid in by_id}
    disjoint = CheckResult("video-disjointness", True)
    overlap = sorted(train_videos & test_videos)
    if overlap:
        disjoint.passed = False
        disjoint.details.append(f"videos in training and test: {overlap[:5]}")

    _, per_query = build_tables(records)
    training_comps = {c.key() for qid, s in split_of.items() if s == SPLIT_TRAINING and qid in by_id
                      for c in per_query[qid]}
    training_lemmas = set()
    for qid, s in split_of.items():
        if s == SPLIT_TRAINING and qid in by_id:
            training_lemmas |= _query_lemmas(by_id[qid].query)

    coverage = CheckResult("component-coverage", True)
    for qid, comp in sorted(assignment.novel_compositions.items()):
        if comp.key() in training_comps:
            coverage.passed = False
            coverage.details.append(f"{qid}: composition {comp.key()} leaked into training")
        for part in (comp.first, comp.second):
            if part not in training_lemmas:
                coverage.passed = False
                coverage.details.append(f"{qid}: component {part!r} of {comp.key()} unseen in training")

    absence = CheckResult("novel-word-absence", True)
    for qid, lemma in sorted(assignment.novel_words.items()):
        if lemma in training_lemmas:
            absence.passed = False
            absence.details.append(f"{qid}: novel word {lemma!r} occurs in training")

    return ValidationReport([totality, disjoint, coverage, absence], assignment.counts())
