"""Command-line entry point: ``stket <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gradcheck
from .data import AnnotationError, load_annotations, save_annotations
from .evaluation import DEFAULT_KS, EvaluationError, MetricsReport, entropy_table, evaluate
from .knowledge import (KnowledgeConfigError, build_spatial_matrix, build_temporal_matrix, load_banks,
                        save_banks)
from .model import TASKS, ModelConfig, ModelConfigError, STKET, prepare_video
from .synthetic import GenConfig, GenConfigError, generate_synthetic_dataset
from .tensorio import TensorFormatError
from .train import CheckpointError, NumericError, TrainConfigError, TrainRunConfig, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (AnnotationError, TensorFormatError, GenConfigError, ModelConfigError, KnowledgeConfigError,
               CheckpointError, EvaluationError, FileNotFoundError, NotADirectoryError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

def bundled_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("stket.configs").iterdir() if p.name.endswith(".json"))


def load_config(ref: Optional[str]) -> dict:
    """A bundled config by name, or a JSON file with optional ``generator``/``model``/``train`` sections.

    A file without any of those sections is read as model overrides.
    """
    if ref is None:
        return {}
    if ref in bundled_configs():
        doc = json.loads(resources.files("stket.configs").joinpath(f"{ref}.json").read_text())
    else:
        doc = json.loads(Path(ref).read_text())
    if not isinstance(doc, dict):
        raise ModelConfigError(f"{ref}: config must be a JSON object")
    if not {"generator", "model", "train"} & set(doc):
        doc = {"model": doc}
    return doc


def infer_model_config(videos, overrides: dict) -> ModelConfig:
    """Dataset-dependent widths come from the annotations; everything else from defaults and overrides."""
    v0 = videos[0]
    p0 = next(p for v in videos for f in v.frames for p in f.proposals)
    r0 = next((r for v in videos for f in v.frames for r in f.relationships), None)
    inferred = {"num_predicates": v0.num_predicates, "num_classes": v0.num_classes,
                "predicate_type_sizes": list(v0.predicate_type_sizes),
                "visual_dim": int(p0.visual_feature.size)}
    if r0 is not None:
        u = r0.union_feature
        if u.ndim == 3:
            inferred["union_channels"], inferred["union_size"] = int(u.shape[0]), int(u.shape[1])
    merged = {**ModelConfig().to_dict(), **inferred, **overrides}
    return ModelConfig.from_dict(merged)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def emit(args, record: dict) -> None:
    if args.log == "json":
        print(json.dumps(record, sort_keys=True), flush=True)
    else:
        print(" ".join(f"{k}={_fmt(v)}" for k, v in record.items()), flush=True)


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_gen_synth(args) -> int:
    gen = dict(load_config(args.config).get("generator", {}))
    if args.transitions:
        gen["transitions"] = json.loads(Path(args.transitions).read_text())
    for flag, key in (("videos", "num_videos"), ("frames", "frames_per_video"), ("skew", "skew"),
                      ("pair_variation", "pair_variation"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            gen[key] = value
    cfg = GenConfig.from_dict(gen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = generate_synthetic_dataset(cfg, with_detections=args.with_detections)
    videos, dyn = result[0], result[1]
    save_annotations(out / "annotations.json", videos)
    (out / "dynamics.json").write_text(dyn.to_json())
    (out / "generator.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    if args.with_detections:
        save_annotations(out / "detections.json", result[2])
    emit(args, {"command": "gen-synth", "videos": len(videos), "out": str(out)})
    return EXIT_OK


def cmd_build_knowledge(args) -> int:
    videos = load_annotations(args.annotations)
    spatial = build_spatial_matrix(videos, args.jobs).filtered(args.min_pair_count)
    temporal = build_temporal_matrix(videos, not args.no_track_ids, args.jobs)
    temporal = temporal.filtered(set(spatial.pair_counts))
    save_banks(args.out, spatial, temporal)
    emit(args, {"command": "build-knowledge", "pairs": len(spatial.pair_counts), "out": str(args.out)})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg_doc = load_config(args.config)
    videos = load_annotations(args.annotations)
    model_over = dict(cfg_doc.get("model", {}))
    if args.no_knowledge:
        model_over["use_knowledge"] = False
    train_over = dict(cfg_doc.get("train", {}))
    for flag in ("epochs", "lr", "clip_norm", "task", "checkpoint_every"):
        value = getattr(args, flag)
        if value is not None:
            train_over[flag] = value
    if args.seed is not None:
        train_over["seed"] = args.seed
    run = TrainRunConfig.from_dict(train_over)
    out = Path(args.out)
    start, state = 0, None
    if args.resume and (out / "manifest.json").exists():
        ck = load_checkpoint(out)
        model, state, start = ck.model, ck.state, ck.epoch
        spatial, temporal = ck.spatial, ck.temporal
    else:
        model = STKET(infer_model_config(videos, model_over), seed=run.seed)
        spatial = temporal = None
        if args.knowledge_dir:
            spatial, temporal = load_banks(args.knowledge_dir)
        elif model.config.use_knowledge:
            spatial = build_spatial_matrix(videos, args.jobs)
            temporal = build_temporal_matrix(videos, run.use_track_ids, args.jobs)
    prepared = [prepare_video(v, model.config, run.use_track_ids) for v in videos]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "progress.jsonl", "a" if start else "w") as fh:
        def record(r):
            fh.write(json.dumps(r, sort_keys=True) + "\n")
            emit(args, r)
        train(model, prepared, spatial, temporal, run, state, start, record, out)
    return EXIT_OK


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k values must be positive")
    return ks


def cmd_eval(args) -> int:
    ks = _parse_ks(args.k)
    ck = load_checkpoint(args.checkpoint)
    spatial, temporal = ck.spatial, ck.temporal
    if args.knowledge_dir:
        spatial, temporal = load_banks(args.knowledge_dir)
    videos = load_annotations(args.annotations)
    detections = load_annotations(args.proposals) if args.proposals else None
    report = evaluate(ck.model, videos, args.task, ks, spatial, temporal, detections, args.average, args.jobs)
    if args.report:
        Path(args.report).write_text(report.to_json())
    if args.per_predicate_csv:
        report.write_per_predicate_csv(args.per_predicate_csv)
    emit(args, {"command": "eval", "task": args.task,
                **{f"R@{k}": report.recall[str(k)] for k in ks},
                **{f"mR@{k}": report.mean_recall[str(k)] for k in ks}})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, elapsed = gradcheck.timed_suite(seeds=range(args.seeds), coords_per_seed=args.coords)
    summary = gradcheck.summarize(results, elapsed)
    emit(args, {"command": "gradcheck", **summary})
    return EXIT_OK if summary["failed"] == 0 else EXIT_NUMERIC


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_report(args) -> int:
    videos = load_annotations(args.annotations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = videos[0].predicate_names
    counts = np.zeros(videos[0].num_predicates, dtype=np.int64)
    for v in videos:
        for f in v.frames:
            for r in f.relationships:
                np.add.at(counts, list(r.predicates), 1)
    total = max(1, int(counts.sum()))
    distribution = [{"id": p, "name": names[p], "count": int(c), "fraction": float(c) / total}
                    for p, c in enumerate(counts)]
    summary = {"distribution": distribution}
    _write_csv(out / "distribution.csv", distribution)
    if args.eval_report:
        rep = MetricsReport.from_json(Path(args.eval_report).read_text())
        rep.write_per_predicate_csv(out / "per_predicate_recall.csv")
        summary["per_predicate"] = rep.per_predicate
    if args.knowledge_dir:
        _, temporal = load_banks(args.knowledge_dir)
    else:
        temporal = build_temporal_matrix(videos, not args.no_track_ids, args.jobs)
    table = entropy_table(temporal, videos[0].class_names, names)
    _write_csv(out / "entropy.csv", table)
    summary["entropy"] = table
    (out / "report.json").write_text(json.dumps(summary, indent=1))
    emit(args, {"command": "report", "out": str(out), "predicates": len(distribution), "entropy_rows": len(table)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _HelpFormatter(argparse.HelpFormatter):
    """Append meaningful defaults to help text, skipping unset ones and those already stated."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default in (None, False, argparse.SUPPRESS) or "default" in text:
            return text
        return f"{text} (default: %(default)s)"


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=None,
                   help="random seed; overrides the config's, which defaults to 0")
    g.add_argument("--jobs", type=int, default=1, help="worker processes for knowledge building and evaluation")
    g.add_argument("--log", choices=("json", "text"), default="json", help="format of progress records on stdout")

    parser = _Parser(prog="stket", description="Knowledge-embedded transformer for video scene graphs.",
                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", parents=[common], formatter_class=fmt,
                       help="sample a synthetic dataset with known dynamics")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help=f"bundled config ({', '.join(bundled_configs())}) or JSON path")
    p.add_argument("--videos", type=int, default=None, help="number of videos")
    p.add_argument("--frames", type=int, default=None, help="frames per video")
    p.add_argument("--skew", type=float, default=None, help="power-law exponent of predicate frequencies")
    p.add_argument("--pair-variation", type=float, default=None, help="per-class-pair tilt of the power law")
    p.add_argument("--transitions", default=None, help="JSON file of explicit per-type transition matrices")
    p.add_argument("--with-detections", action="store_true", help="also write noisy detections.json")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("build-knowledge", parents=[common], formatter_class=fmt,
                       help="count spatial co-occurrence and temporal transition matrices")
    p.add_argument("--annotations", required=True, help="annotation JSON")
    p.add_argument("--out", required=True, help="output directory for the banks")
    p.add_argument("--min-pair-count", type=int, default=1, help="drop class pairs seen fewer times")
    p.add_argument("--no-track-ids", action="store_true", help="link pairs across frames by IoU instead of ids")
    p.set_defaults(func=cmd_build_knowledge)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train a model")
    p.add_argument("--annotations", required=True, help="training annotation JSON")
    p.add_argument("--knowledge-dir", default=None, help="prebuilt banks (built from --annotations if absent)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--task", choices=TASKS, default=None, help="training task (default: predcls)")
    p.add_argument("--epochs", type=int, default=None, help="number of epochs (default: 10)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default: 2e-5)")
    p.add_argument("--clip-norm", type=float, default=None, help="global gradient norm limit (default: 5)")
    p.add_argument("--checkpoint-every", type=int, default=None, help="epochs between checkpoints (0: end only)")
    p.add_argument("--config", default=None, help="bundled config name or JSON overrides")
    p.add_argument("--no-knowledge", action="store_true", help="train without knowledge embeddings")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="compute R@K and mR@K")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--annotations", required=True, help="ground-truth annotation JSON")
    p.add_argument("--task", choices=TASKS, default="predcls", help="evaluation task")
    p.add_argument("--k", default=",".join(map(str, DEFAULT_KS)), help="comma-separated K values")
    p.add_argument("--report", default=None, help="write the metrics report JSON here")
    p.add_argument("--per-predicate-csv", default=None, help="write per-predicate recall CSV here")
    p.add_argument("--proposals", default=None, help="detected proposals JSON (required for sggen)")
    p.add_argument("--knowledge-dir", default=None, help="banks to use instead of the checkpoint's")
    p.add_argument("--average", choices=("micro", "macro"), default="micro", help="recall averaging")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], formatter_class=fmt,
                       help="finite-difference check of every op and the training loss")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds")
    p.add_argument("--coords", type=int, default=24, help="loss coordinates sampled per seed and task")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", parents=[common], formatter_class=fmt,
                       help="emit distribution, per-predicate recall and entropy tables")
    p.add_argument("--annotations", required=True, help="annotation JSON")
    p.add_argument("--out", required=True, help="output directory for CSV/JSON tables")
    p.add_argument("--knowledge-dir", default=None, help="banks for the entropy table")
    p.add_argument("--eval-report", default=None, help="metrics report JSON from eval")
    p.add_argument("--no-track-ids", action="store_true", help="link pairs across frames by IoU instead of ids")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, TrainConfigError) as exc:
        print(f"stket: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"stket: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"stket: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
