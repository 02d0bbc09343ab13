"""Metrics ("R@1, IoU=m", mIoU), split-wise reporting, and the word-order
sensitivity experiment.

Reports carry percentages; `MetricsReport.mean_iou` exposes the mIoU as a
fraction for threshold comparisons. Summation uses exactly-rounded fsum so
evaluation is independent of corpus order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import EmbeddingTable, GroundingExample, QueryAnnotation, Token
from .errors import ContractError
from .model import GroundingModel, ModelConfig, PreparedExample, prepare_example
from .trainer import TrainConfig, train

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """|a n b| / |a u b| for ordered intervals; 0 when the union is degenerate."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class MetricsReport:
    label: str
    count: int
    recall: dict[float, float]          # threshold -> percent
    miou: float                         # percent

    @property
    def mean_iou(self) -> float:
        return self.miou / 100.0

    def to_dict(self) -> dict:
        return {"split": self.label, "count": self.count, "mIoU": self.miou,
                "recall": {f"R@1,IoU={t}": v for t, v in sorted(self.recall.items())}}


def evaluate_predictions(gts, preds, thresholds=DEFAULT_THRESHOLDS, label="test") -> MetricsReport:
    if len(gts) != len(preds):
        raise ContractError("prediction/ground-truth count mismatch")
    if not gts:
        raise ContractError("evaluate over an empty corpus")
    ious = [temporal_iou(p, g) for p, g in zip(preds, gts)]
    recall = {t: 100.0 * sum(1 for x in ious if x >= t) / len(ious) for t in thresholds}
    return MetricsReport(label, len(ious), recall, 100.0 * math.fsum(ious) / len(ious))


_POOL_MODEL: GroundingModel | None = None


def _pool_init(config: ModelConfig, blob: dict):
    global _POOL_MODEL
    _POOL_MODEL = GroundingModel(config)
    _POOL_MODEL.store.load_values(blob)


def _pool_infer(prep: PreparedExample):
    return _POOL_MODEL.infer(prep).as_tuple()


def infer_corpus(model: GroundingModel, prepared: list[PreparedExample],
                 workers: int = 1) -> list[tuple[float, float]]:
    """Per-example inference; result order is corpus order for any worker count."""
    if workers > 1 and len(prepared) >= 64:
        import multiprocessing

        with multiprocessing.Pool(workers, initializer=_pool_init,
                                  initargs=(model.config, model.store.to_dict())) as pool:
            return pool.map(_pool_infer, prepared, chunksize=max(1, len(prepared) // (workers * 4)))
    return [model.infer(p).as_tuple() for p in prepared]


def evaluate_model(model: GroundingModel, prepared: list[PreparedExample],
                   thresholds=DEFAULT_THRESHOLDS, label="test", workers: int = 1) -> MetricsReport:
    preds = infer_corpus(model, prepared, workers)
    gts = [p.gt for p in prepared]
    if any(g is None for g in gts):
        raise ContractError("evaluation corpus has examples without ground truth")
    return evaluate_predictions(gts, preds, thresholds, label)


def evaluate_by_composition(model: GroundingModel, prepared: list[PreparedExample],
                            thresholds=DEFAULT_THRESHOLDS) -> dict[str, MetricsReport]:
    """Per-(action, object) breakdown for single-structure synthetic queries."""
    bins: dict[str, list[PreparedExample]] = {}
    for p in prepared:
        struct = p.example.query.srl_structures[0]
        pred_lemma = " ".join(p.example.query.span_lemmas(struct.predicate))
        arg_lemma = " ".join(p.example.query.span_lemmas(struct.arguments[0])) if struct.arguments else "-"
        bins.setdefault(f"{pred_lemma} {arg_lemma}", []).append(p)
    return {key: evaluate_model(model, group, thresholds, label=key)
            for key, group in sorted(bins.items())}


def report_table(reports: list[MetricsReport], thresholds=DEFAULT_THRESHOLDS) -> str:
    """Aligned-column text table, one row per split."""
    headers = ["Split", *[f"R@1,IoU={t}" for t in thresholds], "mIoU", "n"]
    rows = [[r.label, *[f"{r.recall[t]:.2f}" for t in thresholds], f"{r.miou:.2f}", str(r.count)]
            for r in reports]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
    return "\n".join([fmt.format(*headers)] + [fmt.format(*row) for row in rows])


# ------------------------------------------------------- word-order shuffle


def shuffle_query(query: QueryAnnotation, rng: np.random.Generator) -> QueryAnnotation:
    """Permute token lemmas (and surfaces) across all predicate/argument slots.

    Role assignment is destroyed, the bag of words, spans and POS slots stay.
    """
    slots = sorted({i for s in query.srl_structures
                    for span in (s.predicate, *s.arguments)
                    for i in range(span[0], span[1])})
    perm = rng.permutation(len(slots))
    tokens = list(query.tokens)
    for k, slot in enumerate(slots):
        src = query.tokens[slots[perm[k]]]
        tokens[slot] = Token(src.surface, src.lemma, tokens[slot].pos)
    return QueryAnnotation(tuple(tokens), query.srl_structures, query.dep_edges)


def shuffle_corpus(examples: list[GroundingExample], seed: int,
                   identity: bool = False) -> list[GroundingExample]:
    """Seeded per-query shuffles; `identity` keeps every query unchanged."""
    if identity:
        return list(examples)
    out = []
    seqs = np.random.SeedSequence([seed, 0x5F]).spawn(len(examples))
    from dataclasses import replace

    for ex, seq in zip(examples, seqs):
        out.append(replace(ex, query=shuffle_query(ex.query, np.random.default_rng(seq))))
    return out


@dataclass
class SensitivityResult:
    original_r50: float
    shuffled_r50: float
    sensitivity: float | None          # percent relative degradation, None if undefined
    note: str = ""

    def to_dict(self) -> dict:
        return {"original_r50": self.original_r50, "shuffled_r50": self.shuffled_r50,
                "sensitivity": self.sensitivity, "note": self.note}


def word_order_sensitivity(train_examples: list[GroundingExample],
                           eval_examples: list[GroundingExample],
                           table: EmbeddingTable, model_cfg: ModelConfig,
                           train_cfg: TrainConfig, shuffle_seed: int | None = None,
                           identity: bool = False, log=None) -> SensitivityResult:
    """Train + evaluate on original and on shuffled queries; relative R@1,IoU=0.5 drop.

    The shuffled run re-trains from the same initialization on queries whose
    lemmas were permuted across slots (train and eval alike); ground truth is
    untouched.
    """
    shuffle_seed = train_cfg.seed if shuffle_seed is None else shuffle_seed

    def run(examples_train, examples_eval) -> float:
        model = GroundingModel(model_cfg)
        prep_train = [prepare_example(e, table, model_cfg.precision) for e in examples_train]
        prep_eval = [prepare_example(e, table, model_cfg.precision) for e in examples_eval]
        train(model, prep_train, train_cfg, log=log)
        return evaluate_model(model, prep_eval).recall[0.5]

    original = run(train_examples, eval_examples)
    shuffled = run(shuffle_corpus(train_examples, shuffle_seed, identity),
                   shuffle_corpus(eval_examples, shuffle_seed, identity))
    if original == 0.0:
        return SensitivityResult(original, shuffled, None, "undefined: original R@1,IoU=0.5 is 0")
    return SensitivityResult(original, shuffled, 100.0 * (original - shuffled) / original)
