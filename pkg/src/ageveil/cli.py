"""Command-line front end: each subcommand materializes one pipeline stage.

Stages cache their products under <out>/cache, so the commands compose in any
order; later ones build whatever earlier stages they still need.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import RunConfig, Pipeline, load_config, emit_report


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ageveil",
        description="Train and benchmark the age-obfuscation pipeline.")
    parser.add_argument("--config", metavar="FILE",
                        help="INI run configuration; defaults apply if omitted")
    parser.add_argument("--seed", type=int, metavar="N",
                        help="override the cohort and split seed")
    parser.add_argument("--out", metavar="DIR",
                        help="output directory (also holds the stage cache)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="materialize the synthetic cohort")
    sub.add_parser("train-teachers",
                   help="train the age teachers, the held-out age model, and "
                        "the disease, vessel, and rotation networks")
    sub.add_parser("pretrain-backbone",
                   help="pretrain the general feature backbone and the "
                        "reconstruction autoencoder")
    sub.add_parser("distill", help="distill the teacher pool into a student probe")
    sub.add_parser("train-guard", help="train one obfuscator per configured seed")

    ob = sub.add_parser("obfuscate", help="obfuscate one cohort split to an npz")
    ob.add_argument("--split", default="test",
                    choices=("train", "val", "test", "heldout"))
    ob.add_argument("--strength", type=float, default=None,
                    help="mask strength (default: configured value)")
    ob.add_argument("--guard-seed", type=int, default=None,
                    help="which trained guard to use (default: first configured)")

    sub.add_parser("evaluate", help="run the method comparison and write its tables")
    sub.add_parser("sweep", help="sweep mask strength and write the trade-off table")
    sub.add_parser("ablate", help="compare teacher-pool sizes and write the table")
    return parser


def _configure(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = replace(config, cohort_seed=args.seed, split_seed=args.seed)
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    return config


def _cmd_generate(pipe: Pipeline) -> None:
    cohort = pipe.cohort()
    sizes = " ".join(f"{name}={len(idx)}" for name, idx in cohort.splits.items())
    print(f"cohort ready: {len(cohort.images)} samples ({sizes})")
    print(f"checksum {cohort.checksum}")


def _cmd_train_teachers(pipe: Pipeline) -> None:
    for name, enc in pipe.teachers().items():
        print(f"teacher {name}: val MAE {enc.val_mae:.3f} yr")
    heldout = pipe.heldout()
    print(f"held-out age model: val MAE {heldout.val_mae:.3f} yr")
    disease = pipe.disease()
    print(f"disease classifier: val acc {disease.val_acc:.3f}")
    pipe.segmenter()
    print("vessel segmenter: trained")
    pipe.rotation()
    print("rotation network: trained")


def _cmd_pretrain_backbone(pipe: Pipeline) -> None:
    foundation = pipe.foundation()
    print(f"foundation backbone: {foundation.feature_dim}-d features")
    pipe.guard_backbone()
    print("reconstruction autoencoder: pretrained")


def _cmd_distill(pipe: Pipeline) -> None:
    student = pipe.student()
    pool = "+".join(student.pool_names) if student.pool_names else "four"
    print(f"student probe distilled from {pool}: {student.feature_dim}-d")


def _cmd_train_guard(pipe: Pipeline) -> None:
    for seed in pipe.config.guard_seeds:
        pipe.guard(seed)
        history = pipe.guard_history(seed)
        best = max(history, key=lambda h: h["score"])
        print(f"guard seed {seed}: val SSIM {best['val_ssim']:.3f}, "
              f"MAE gain {best['val_mae_gain']:.2f} yr "
              f"(epoch {best['epoch']})")


def _cmd_obfuscate(pipe: Pipeline, args) -> None:
    guard_seed = args.guard_seed
    if guard_seed is None:
        guard_seed = pipe.config.guard_seeds[0]
    strength = args.strength if args.strength is not None else pipe.config.strength
    guard = pipe.guard(guard_seed)
    split = pipe.cohort().subset(args.split)
    obf = guard.obfuscate(split.images, s=strength)
    out = Path(pipe.config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"obfuscated-{args.split}.npz"
    np.savez(path, images=obf, ages=split.ages, labels=split.labels)
    print(f"wrote {len(obf)} obfuscated {args.split} images to {path}")


def _cmd_evaluate(pipe: Pipeline) -> None:
    reports = pipe.comparison()
    paths = emit_report(pipe.config.out_dir, comparison=reports,
                        budget=pipe.budget(),
                        run_meta={"config_checksum": pipe.config.checksum()})
    for rep in reports:
        print(f"{rep.method:>10s}: AMAE {rep.amae:.2f} yr, "
              f"black-box MAE {rep.heldout_mae:.2f} yr, SSIM {rep.ssim_mean:.3f}")
    print("wrote " + ", ".join(paths))


def _cmd_sweep(pipe: Pipeline) -> None:
    points = pipe.sweep()
    paths = emit_report(pipe.config.out_dir, sweep_points=points,
                        budget=pipe.budget(),
                        run_meta={"config_checksum": pipe.config.checksum()})
    for pt in points:
        print(f"s={pt.strength:g}: AMAE {pt.amae:.2f} yr, SSIM {pt.ssim_mean:.3f}")
    print("wrote " + ", ".join(paths))


def _cmd_ablate(pipe: Pipeline) -> None:
    rows = pipe.ablation()
    paths = emit_report(pipe.config.out_dir, ablation=rows,
                        run_meta={"config_checksum": pipe.config.checksum()})
    for row in rows:
        print(f"{row['pool']:>6s} seed {row['seed']}: AMAE {row['amae']:.2f} yr, "
              f"black-box MAE {row['heldout_mae']:.2f} yr")
    print("wrote " + ", ".join(paths))


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        pipe = Pipeline(_configure(args))
        if args.command == "generate":
            _cmd_generate(pipe)
        elif args.command == "train-teachers":
            _cmd_train_teachers(pipe)
        elif args.command == "pretrain-backbone":
            _cmd_pretrain_backbone(pipe)
        elif args.command == "distill":
            _cmd_distill(pipe)
        elif args.command == "train-guard":
            _cmd_train_guard(pipe)
        elif args.command == "obfuscate":
            _cmd_obfuscate(pipe, args)
        elif args.command == "evaluate":
            _cmd_evaluate(pipe)
        elif args.command == "sweep":
            _cmd_sweep(pipe)
        elif args.command == "ablate":
            _cmd_ablate(pipe)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
