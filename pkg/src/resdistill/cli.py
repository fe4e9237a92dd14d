"""Command-line entry point tying data generation, training and evaluation.

Exit codes: 0 success, 2 validation error, 3 runtime failure. The default
output root comes from RESDISTILL_OUTPUT_ROOT when set.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import torch

from . import data as data_mod
from . import evaluator, figures, trainer
from .config import (ConfigError, ExperimentConfig, apply_overrides,
                     load_config, write_run_manifest)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _output_root() -> Path:
    return Path(os.environ.get("RESDISTILL_OUTPUT_ROOT", "."))


def _resolve_out(path_arg) -> Path:
    path = Path(path_arg)
    return path if path.is_absolute() else _output_root() / path


def cmd_make_data(args) -> int:
    out = _resolve_out(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: output directory {out} is not empty (use --force)",
              file=sys.stderr)
        return EXIT_VALIDATION
    if args.hires % args.factor:
        print(f"error: hires {args.hires} not divisible by factor {args.factor}",
              file=sys.stderr)
        return EXIT_VALIDATION
    samples = data_mod.make_synthetic(args.classes, args.per_class,
                                      hi_res=args.hires, seed=args.seed,
                                      factor=args.factor)
    manifest = data_mod.save_dataset(samples, out, split=args.split,
                                     factor=args.factor,
                                     student_input=args.student_input)
    print(f"wrote {len(samples)} samples to {out}")
    print(f"lo_res: {manifest.lo_res}")
    print(f"checksum: {manifest.checksum}")
    return EXIT_OK


def _load_experiment(args) -> ExperimentConfig:
    config_path = Path(args.config)
    if not config_path.exists():
        raise FileNotFoundError(f"config file not found: {config_path}")
    config = load_config(config_path)
    if args.override:
        config = apply_overrides(config, args.override)
    return config


def cmd_train(args) -> int:
    config = _load_experiment(args)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, samples = data_mod.load_dataset(args.data)
    if args.mode == "teacher":
        teacher, stats, log = trainer.train_teacher(config, samples)
        trainer.save_teacher(out / "teacher.pt", config, teacher, stats)
        log.write_csv(out / "metrics.csv")
        write_run_manifest(config, out / "manifest.txt",
                           extra={"mode": "teacher", **stats})
        print(f"teacher train accuracy: {stats['train_accuracy']:.4f}")
    else:
        if not args.teacher:
            print("error: --mode distill requires --teacher", file=sys.stderr)
            return EXIT_VALIDATION
        teacher, _ = trainer.load_teacher(args.teacher)
        if args.resume:
            student, state = trainer.resume(args.resume, config, teacher,
                                            samples, out_dir=out)
        else:
            student, state = trainer.distill_student(
                config, teacher, samples, out_dir=out,
                checkpoint_every=args.checkpoint_every)
        write_run_manifest(config, out / "manifest.txt",
                           extra={"mode": "distill", "steps": state.step,
                                  "rcd_reduction": "per_positive_mean"})
        print(f"distilled student for {state.step} steps")
    figures.render_metrics_curves(out / "metrics.csv", out / "loss_curves.png")
    print(f"outputs in {out}")
    return EXIT_OK


def _load_eval_model(path):
    try:
        model, _, _ = trainer.load_student(path)
        return model
    except trainer.CheckpointError:
        model, _ = trainer.load_teacher(path)
        return model


def cmd_eval(args) -> int:
    model = _load_eval_model(args.checkpoint)
    manifest, samples = data_mod.load_dataset(args.data)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.view == "student":
        x = evaluator.student_inputs(samples, args.input_res or manifest.lo_res,
                                     manifest.student_input)
    else:
        x = torch.stack([s.x_h for s in samples])
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)

    if args.protocol == "top1":
        acc = evaluator.top1(model, x, labels)
        (out / "top1.txt").write_text(f"top1_accuracy: {acc}\n")
        print(f"top1_accuracy: {acc:.4f}")
    elif args.protocol == "verify":
        if not args.pairs:
            print("error: --protocol verify requires --pairs", file=sys.stderr)
            return EXIT_VALIDATION
        pairs = data_mod.load_pairs_protocol(args.pairs)
        embeddings = evaluator.embeddings_by_id(model, samples, x)
        report = evaluator.verify_pairs(embeddings, pairs, bins=args.bins)
        (out / "verification.txt").write_text(report.to_text())
        report.write_scores_csv(out / "verification_scores.csv")
        figures.render_score_histogram(report, out / "verification_hist.png",
                                       bins=args.bins)
        print(f"verification_accuracy: {report.accuracy:.4f}")
    elif args.protocol == "probe":
        train, test = data_mod.split_samples(samples, args.train_per_class)
        if not train or not test:
            print("error: probe needs both splits; adjust --train-per-class",
                  file=sys.stderr)
            return EXIT_VALIDATION
        pos = {s.sample_id: i for i, s in enumerate(samples)}
        xt = x[[pos[s.sample_id] for s in train]]
        xe = x[[pos[s.sample_id] for s in test]]
        acc = evaluator.linear_probe(
            model, xt, torch.tensor([s.label for s in train]),
            xe, torch.tensor([s.label for s in test]), manifest.classes)
        (out / "probe.txt").write_text(f"probe_accuracy: {acc}\n")
        print(f"probe_accuracy: {acc:.4f}")
    elif args.protocol == "retrieve":
        gallery, probes = data_mod.split_samples(samples, args.train_per_class)
        if not gallery or not probes:
            print("error: retrieve needs both splits; adjust --train-per-class",
                  file=sys.stderr)
            return EXIT_VALIDATION
        pos = {s.sample_id: i for i, s in enumerate(samples)}
        ge, _ = evaluator.batched_forward(model, x[[pos[s.sample_id] for s in gallery]])
        pe, _ = evaluator.batched_forward(model, x[[pos[s.sample_id] for s in probes]])
        report = evaluator.retrieve(ge, torch.tensor([s.label for s in gallery]),
                                    pe, torch.tensor([s.label for s in probes]),
                                    ks=args.ks)
        (out / "retrieval.txt").write_text(report.to_text())
        print(report.to_text().strip())
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model = _load_eval_model(args.checkpoint)
    manifest, samples = data_mod.load_dataset(args.data)
    if args.view == "student":
        x = evaluator.student_inputs(samples, args.input_res or manifest.lo_res,
                                     manifest.student_input)
    else:
        x = torch.stack([s.x_h for s in samples])
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluator.export_embeddings(model, samples, x, out)
    print(f"wrote embeddings to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resdistill",
        description="Cross-resolution relational contrastive distillation runs")
    sub = parser.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-data", help="generate a paired-resolution dataset")
    mk.add_argument("--synthetic", action="store_true",
                    help="generate the seeded synthetic corpus")
    mk.add_argument("--classes", type=int, default=10)
    mk.add_argument("--per-class", type=int, default=100)
    mk.add_argument("--hires", type=int, default=32)
    mk.add_argument("--factor", type=int, default=4)
    mk.add_argument("--seed", type=int, default=5)
    mk.add_argument("--split", default="train")
    mk.add_argument("--student-input", default="native",
                    choices=["native", "bilinear_upsample"])
    mk.add_argument("--out", required=True)
    mk.add_argument("--force", action="store_true",
                    help="overwrite a nonempty output directory")
    mk.set_defaults(func=cmd_make_data)

    tr = sub.add_parser("train", help="train a teacher or distill a student")
    tr.add_argument("--config", required=True, help="YAML experiment config")
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("--out", required=True, help="run output directory")
    tr.add_argument("--mode", choices=["teacher", "distill"], default="distill")
    tr.add_argument("--teacher", help="teacher checkpoint for distill mode")
    tr.add_argument("--resume", help="resume from a mid-run checkpoint")
    tr.add_argument("--checkpoint-every", type=int, default=None,
                    help="write a checkpoint every N epochs")
    tr.add_argument("--override", nargs="*", default=[],
                    help="config overrides as key=value")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="run an evaluation protocol")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--protocol", required=True,
                    choices=["top1", "verify", "probe", "retrieve"])
    ev.add_argument("--pairs", help="pairs protocol file for verify")
    ev.add_argument("--bins", type=int, default=100)
    ev.add_argument("--view", choices=["student", "teacher"], default="student")
    ev.add_argument("--input-res", type=int, default=None)
    ev.add_argument("--train-per-class", type=int, default=50)
    ev.add_argument("--ks", type=int, nargs="*", default=[1, 10, 20])
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    ex = sub.add_parser("export-embeddings", help="dump embeddings to CSV")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--view", choices=["student", "teacher"], default="student")
    ex.add_argument("--input-res", type=int, default=None)
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (trainer.CheckpointError, trainer.TrainingDiverged, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
