"""Command-line harness: data generation, splitting, training, evaluation,
word-order sensitivity, gradient checking, and inspection.

Every run writes a manifest (effective config, seed, versions, wall time)
into its output directory, and is reproducible from that manifest alone:
gen/split byte-identically, train loss-sequence-identically.

Exit codes: 0 success, 1 domain error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from .config import load_config, model_config, split_config, train_config, world_config
from .data import (
    load_corpus,
    load_embeddings,
    load_query_corpus,
    save_corpus,
    save_embeddings,
)
from .errors import ConfigError, GraphGroundError
from .evaluator import (
    evaluate_by_composition,
    evaluate_model,
    evaluate_predictions,
    report_table,
    word_order_sensitivity,
)
from .graphs import build_query_graph, build_video_graph, graph_to_json
from .model import GroundingModel, prepare_example
from .splitter import SPLITS, assign_splits, validate_splits
from .tensor import grad_check
from .trainer import grounding_loss, train
from .world import generate_annotated_corpus, generate_corpus, random_baseline_miou, world_config_dict


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, default=None, help="override the seed")
    p.add_argument("--out", required=True, help="output directory")


def _json_dump(blob, path):
    with open(path, "w") as f:
        json.dump(blob, f, sort_keys=True, indent=1)
        f.write("\n")


class _Run:
    """Output directory plus the manifest written on exit."""

    def __init__(self, args, cfg):
        self.out = args.out
        os.makedirs(self.out, exist_ok=True)
        self.cfg = cfg
        self.command = args.command
        self.args = {k: v for k, v in vars(args).items() if k not in ("command", "func")}
        self.start = time.perf_counter()

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def finish(self):
        _json_dump({
            "command": self.command,
            "args": self.args,
            "config": self.cfg,
            "seed": self.cfg["seed"],
            "versions": {"graphground": __version__, "python": platform.python_version(),
                         "numpy": np.__version__},
            "wall_time_s": time.perf_counter() - self.start,
        }, self.path("manifest.json"))


def _load_table(path: str):
    return load_embeddings(path)


def _prepare_corpus(path: str, table, precision: str):
    examples, issues = load_corpus(path, precision=precision)
    for issue in issues:
        print(f"warning: {path}:{issue.line}: rejected ({issue.reason})", file=sys.stderr)
    if not examples:
        raise ConfigError(f"no valid examples in {path}")
    prepared = [prepare_example(e, table, precision) for e in examples]
    return examples, prepared


def _workers(cfg) -> int:
    w = cfg["parallel.workers"]
    return os.cpu_count() or 1 if w == 0 else max(1, int(w))


# ------------------------------------------------------------------ gen


def cmd_gen(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    run = _Run(args, cfg)
    wc = world_config(cfg)
    train_ex, seen_ex, novel_ex, table = generate_corpus(wc, workers=_workers(cfg))
    save_corpus(train_ex, run.path("train.jsonl"))
    save_corpus(seen_ex, run.path("seen_test.jsonl"))
    save_corpus(novel_ex, run.path("novel_test.jsonl"))
    save_embeddings(table, run.path("embeddings.jsonl"))
    _json_dump(world_config_dict(wc), run.path("world.json"))
    if args.annotated:
        records = generate_annotated_corpus(cfg["world.annotated_queries"], seed=cfg["seed"])
        save_corpus(records, run.path("annotated_queries.jsonl"))
    print(f"wrote {len(train_ex)} train / {len(seen_ex)} seen-test / {len(novel_ex)} novel-composition "
          f"examples to {run.out}")
    run.finish()
    return 0


# ------------------------------------------------------------------ split


def cmd_split(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    run = _Run(args, cfg)
    records, issues = load_query_corpus(args.corpus)
    for issue in issues:
        print(f"warning: {args.corpus}:{issue.line}: rejected ({issue.reason})", file=sys.stderr)
    if not records:
        raise ConfigError(f"no valid queries in {args.corpus}")
    drop = set()
    if args.drop:
        with open(args.drop) as f:
            drop = {line.strip() for line in f if line.strip()}
    assignment = assign_splits(records, split_config(cfg, drop), seed=cfg["seed"])
    kept = [r for r in records if r.query_id not in drop]
    report = validate_splits(kept, assignment)

    order = {r.query_id: i for i, r in enumerate(records)}
    for split in SPLITS:
        ids = sorted(assignment.ids_for(split), key=order.__getitem__)
        with open(run.path(split.replace("-", "_") + ".txt"), "w") as f:
            f.writelines(qid + "\n" for qid in ids)
    _json_dump({"assignment": assignment.to_dict(), "validation": report.to_dict()},
               run.path("audit.json"))
    for check in report.checks:
        print(f"check {check.name}: {'pass' if check.passed else 'FAIL'}")
    for line in assignment.shortfalls:
        print(f"shortfall: {line}")
    print("counts:", json.dumps(assignment.counts(), sort_keys=True))
    run.finish()
    return 0 if report.all_passed else 1


# ------------------------------------------------------------------ train


def _cg_experiment(args, cfg, run) -> int:
    table = _load_table(args.embeddings)
    precision = cfg["train.precision"]
    _, prep_train = _prepare_corpus(args.corpus, table, precision)
    seen_ex, prep_seen = _prepare_corpus(args.seen, table, precision)
    novel_ex, prep_novel = _prepare_corpus(args.novel, table, precision)
    baseline = random_baseline_miou(novel_ex, trials=args.baseline_trials, seed=cfg["seed"])
    threshold = 2.0 * baseline
    emb_dim, frame_dim = table.dim, novel_ex[0].segments[0].frame_features.shape[1]

    variants = ["full"] + (["no_vcc"] if args.compare_vcc else [])
    per_seed = []
    totals = {v: 0.0 for v in variants}
    print(f"random baseline mIoU (novel, {args.baseline_trials} trials/example): {baseline:.4f}; "
          f"novel threshold 2x = {threshold:.4f}")
    for i in range(args.seeds):
        seed = cfg["seed"] + i
        row = {"seed": seed}
        for variant in variants:
            mc = model_config(cfg, emb_dim, frame_dim, seed=seed, disable_vcc=(variant == "no_vcc"))
            tc = train_config(cfg, seed=seed)
            model = GroundingModel(mc)
            t0 = time.perf_counter()
            train(model, prep_train, tc)
            elapsed = time.perf_counter() - t0
            seen_rep = evaluate_model(model, prep_seen, label="seen-test")
            novel_rep = evaluate_model(model, prep_novel, label="novel-composition")
            totals[variant] += elapsed
            row[variant] = {
                "seen": seen_rep.to_dict(),
                "novel": novel_rep.to_dict(),
                "seen_miou": seen_rep.mean_iou,
                "novel_miou": novel_rep.mean_iou,
                "train_wall_s": elapsed,
            }
            print(f"seed {seed} {variant}: seen mIoU={seen_rep.mean_iou:.4f} "
                  f"novel mIoU={novel_rep.mean_iou:.4f} ({elapsed:.1f}s)")
        per_seed.append(row)

    summary = {}
    for variant in variants:
        seen_pass = sum(1 for r in per_seed if r[variant]["seen_miou"] >= 0.60)
        novel_pass = sum(1 for r in per_seed if r[variant]["novel_miou"] >= threshold)
        summary[variant] = {
            "seeds": args.seeds,
            "mean_seen_miou": sum(r[variant]["seen_miou"] for r in per_seed) / args.seeds,
            "mean_novel_miou": sum(r[variant]["novel_miou"] for r in per_seed) / args.seeds,
            "seen_miou_ge_0.60": seen_pass,
            "novel_miou_ge_2x_baseline": novel_pass,
            "train_wall_s": totals[variant],
        }
    _json_dump({"baseline_miou": baseline, "novel_threshold": threshold,
                "per_seed": per_seed, "summary": summary}, run.path("cg_report.json"))
    lines = [f"{'variant':<10} {'seen mIoU':>10} {'novel mIoU':>11} {'novel>=2x':>10}"]
    for variant in variants:
        s = summary[variant]
        lines.append(f"{variant:<10} {s['mean_seen_miou']:>10.4f} {s['mean_novel_miou']:>11.4f} "
                     f"{s['novel_miou_ge_2x_baseline']:>7}/{args.seeds}")
    table_txt = "\n".join(lines)
    with open(run.path("cg_table.txt"), "w") as f:
        f.write(table_txt + "\n")
    print(table_txt)
    run.finish()
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    run = _Run(args, cfg)
    if args.experiment == "cg":
        if not (args.seen and args.novel):
            raise ConfigError("--experiment cg requires --seen and --novel corpora")
        return _cg_experiment(args, cfg, run)
    table = _load_table(args.embeddings)
    precision = cfg["train.precision"]
    examples, prepared = _prepare_corpus(args.corpus, table, precision)
    mc = model_config(cfg, table.dim, examples[0].segments[0].frame_features.shape[1])
    model = GroundingModel(mc)
    report = train(model, prepared, train_config(cfg), out_dir=run.out, log=print)
    _json_dump(report.to_dict(), run.path("train_report.json"))
    if args.eval_corpus:
        _, prep_eval = _prepare_corpus(args.eval_corpus, table, precision)
        rep = evaluate_model(model, prep_eval, label="eval")
        _json_dump(rep.to_dict(), run.path("final_eval.json"))
        print(report_table([rep]))
    run.finish()
    return 1 if report.diverged else 0


# ------------------------------------------------------------------ eval


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    run = _Run(args, cfg)
    table = _load_table(args.embeddings)
    precision = cfg["train.precision"]
    corpora = []
    for item in args.corpus:
        label, _, path = item.rpartition("=")
        corpora.append((label or "test", path))
    first_examples, _ = load_corpus(corpora[0][1], precision=precision)
    if not first_examples:
        raise ConfigError(f"no valid examples in {corpora[0][1]}")
    mc = model_config(cfg, table.dim, first_examples[0].segments[0].frame_features.shape[1])
    model = GroundingModel(mc)
    model.load(args.checkpoint)

    reports, breakdowns = [], {}
    workers = _workers(cfg)
    for label, path in corpora:
        _, prepared = _prepare_corpus(path, table, precision)
        reports.append(evaluate_model(model, prepared, label=label, workers=workers))
        if args.by_composition:
            breakdowns[label] = {k: r.to_dict() for k, r in
                                 evaluate_by_composition(model, prepared).items()}
    blob = {"splits": [r.to_dict() for r in reports]}
    if breakdowns:
        blob["by_composition"] = breakdowns
    _json_dump(blob, run.path("metrics.json"))
    txt = report_table(reports)
    with open(run.path("table.txt"), "w") as f:
        f.write(txt + "\n")
    print(txt)
    run.finish()
    return 0


# ------------------------------------------------------------------ sensitivity


def cmd_sensitivity(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    run = _Run(args, cfg)
    table = _load_table(args.embeddings)
    precision = cfg["train.precision"]
    train_ex, _ = load_corpus(args.train_corpus, precision=precision)
    eval_ex, _ = load_corpus(args.eval_corpus, precision=precision)
    if not train_ex or not eval_ex:
        raise ConfigError("sensitivity needs non-empty train and eval corpora")
    emb_dim, frame_dim = table.dim, train_ex[0].segments[0].frame_features.shape[1]

    results = []
    for i in range(args.seeds):
        seed = cfg["seed"] + i
        res = word_order_sensitivity(
            train_ex, eval_ex, table,
            model_config(cfg, emb_dim, frame_dim, seed=seed),
            train_config(cfg, seed=seed),
            shuffle_seed=seed, identity=args.identity)
        results.append({"seed": seed, **res.to_dict()})
        print(f"seed {seed}: original R@1,IoU=0.5={res.original_r50:.2f} "
              f"shuffled={res.shuffled_r50:.2f} sensitivity={res.sensitivity}")
    defined = [r for r in results if r["sensitivity"] is not None]
    positive = sum(1 for r in defined if r["sensitivity"] > 0)
    _json_dump({"per_seed": results, "positive": positive, "defined": len(defined),
                "seeds": args.seeds}, run.path("sensitivity.json"))
    print(f"strictly positive sensitivity on {positive}/{args.seeds} seeds")
    run.finish()
    return 0


# ------------------------------------------------------------------ gradcheck


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    run = _Run(args, cfg)
    wc = world_config(cfg)
    wc.t_min = wc.t_max = args.t
    wc.n_train, wc.n_seen_test, wc.n_novel_test = 1, 0, 0
    train_ex, _, _, table = generate_corpus(wc)
    mc = model_config(cfg, table.dim, wc.d_frame)
    mc.encoder.d = args.d
    mc.encoder.n_p = args.n_p
    mc.precision = "f64"
    if mc.head.heads > args.d or args.d % mc.head.heads:
        mc.head.heads = 2
    model = GroundingModel(mc)
    prep = prepare_example(train_ex[0], table)

    def loss_fn():
        res = model.forward_train(prep)
        return grounding_loss(res.pred, prep.gt, res.z_posterior, res.z_prior, cfg["train.kl_weight"])

    report = grad_check(loss_fn, model.store, sample_count=args.samples,
                        epsilon=args.epsilon, seed=cfg["seed"])
    worst = report.worst
    groups = len({s.name for s in report.samples})
    print(f"max relative error: {report.max_rel_err:.3e} ({worst.name}[{worst.index}]) "
          f"over {len(report.samples)} samples in {groups} parameter tensors")
    _json_dump({"max_rel_err": report.max_rel_err, "worst": worst.name,
                "samples": len(report.samples), "tolerance": args.tol},
               run.path("gradcheck.json"))
    run.finish()
    return 0 if report.max_rel_err < args.tol else 1


# ------------------------------------------------------------------ inspect


def cmd_inspect(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    table = _load_table(args.embeddings)
    precision = cfg["train.precision"]
    examples, _ = load_corpus(args.corpus, precision=precision)
    if not (0 <= args.index < len(examples)):
        raise ConfigError(f"--index {args.index} out of range (corpus has {len(examples)} examples)")
    ex = examples[args.index]

    if args.what == "graph":
        graph = build_video_graph(ex, table) if args.modality == "video" else build_query_graph(ex.query, table)
        blob = graph_to_json(graph)
    else:
        mc = model_config(cfg, table.dim, ex.segments[0].frame_features.shape[1])
        if mc.disable_vcc:
            raise ConfigError("inspect z requires the variational path (ablation.disable_vcc=false)")
        model = GroundingModel(mc)
        if args.checkpoint:
            model.load(args.checkpoint)
        res = model.forward_train(prepare_example(ex, table, precision))
        blob = {
            "query_id": ex.query_id,
            "video_nodes": res.node_labels[0],
            "language_nodes": res.node_labels[1],
            "prior": [[float(x) for x in row] for row in res.z_prior.z.value],
            "posterior": [[float(x) for x in row] for row in res.z_posterior.z.value],
        }
    text = json.dumps(blob, sort_keys=True, indent=1)
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphground",
                                     description="compositional temporal grounding at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic compositional corpus")
    _add_common(p)
    p.add_argument("--annotated", action="store_true",
                   help="also write an annotation-only corpus for the splitter")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("split", help="compositional dataset re-splitting")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--drop", help="file of query ids to drop (external pre-filter hook)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model (or run the cg experiment)")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--eval-corpus", help="evaluate on this corpus after training")
    p.add_argument("--experiment", choices=["cg"], help="multi-seed experiment mode")
    p.add_argument("--seen", help="cg: seen-test corpus")
    p.add_argument("--novel", help="cg: novel-composition corpus")
    p.add_argument("--seeds", type=int, default=10, help="cg: number of seeds")
    p.add_argument("--compare-vcc", action="store_true",
                   help="cg: also run the disable_vcc ablation on the same seeds")
    p.add_argument("--baseline-trials", type=int, default=200,
                   help="cg: Monte-Carlo trials per example for the random baseline")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--corpus", required=True, nargs="+", metavar="LABEL=PATH",
                   help="one or more corpora, optionally labeled")
    p.add_argument("--by-composition", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sensitivity", help="word-order sensitivity experiment")
    _add_common(p)
    p.add_argument("--train-corpus", required=True)
    p.add_argument("--eval-corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--identity", action="store_true",
                   help="identity permutation (sanity: sensitivity must be 0)")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("gradcheck", help="full-model finite-difference gradient check")
    _add_common(p)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--t", type=int, default=4)
    p.add_argument("--n-p", type=int, default=2)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="dump a graph or the correspondence matrices")
    p.add_argument("what", choices=["graph", "z"])
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--modality", choices=["video", "language"], default="video")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except GraphGroundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
