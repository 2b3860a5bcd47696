"""Command-line entry point.

    leukonet [--seed N] [--config FILE] [--out DIR] <subcommand> [flags]

Subcommands: synth, split, preprocess, train, train-hybrid, eval, inspect-dct.
Each writes its artifacts and an ``config.ini`` echo under ``--out``.
Failures print one line to stderr,
``error: code=<exit> kind=<ExceptionName> message="..."``, and exit with
2 (config), 3 (data) or 4 (numeric divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import echo_config, effective_sections, make_stage_config, make_train_config, read_config
from .data import (
    DatasetManifest, Record, center_on_canvas, fold_violations, load_images, read_folds, read_image,
    read_manifest, split_folds, synth_generate, write_folds, write_manifest, write_png,
)
from .dct import dct_layer_forward
from .exceptions import ConfigError, DataError, LeukoNetError
from .models import HYBRID_COMPONENTS, STAGES
from .stain import STAIN_SCHEMES, init_stain_matrix, rgb_to_od, sd_forward
from .tensor import Rng, Tensor
from .training import evaluate, train, train_hybrid

DEFAULT_SEED = 0
DEFAULT_OUT = "leukonet-out"

logger = logging.getLogger("leukonet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(default) -> argparse.ArgumentParser:
    # Global flags are accepted both before and after the subcommand.
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=default(DEFAULT_SEED), help=f"random seed (default {DEFAULT_SEED})")
    p.add_argument("--config", type=Path, default=default(None), help="INI file with [stage]/[dct]/[train]/[augment] sections")
    p.add_argument("--out", type=Path, default=default(Path(DEFAULT_OUT)), help=f"output directory (default {DEFAULT_OUT})")
    p.add_argument("-v", "--verbose", action="count", default=default(0))
    return p


def _stage(value: str) -> str:
    v = value.upper()
    if v not in STAGES:
        raise argparse.ArgumentTypeError(f"unknown stage {value!r}; choose from {', '.join(STAGES)}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="leukonet", description=__doc__.split("\n\n")[0], parents=[_common(lambda v: v)])
    parser.add_argument("--version", action="version", version=f"leukonet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    late = [_common(lambda v: argparse.SUPPRESS)]

    p = sub.add_parser("synth", parents=late, help="generate a synthetic two-class cell dataset")
    p.add_argument("--subjects", type=int, default=8, help="training subjects per class")
    p.add_argument("--cells", type=int, default=100, help="cells per subject")
    p.add_argument("--size", type=int, default=96, help="image side in pixels")
    p.add_argument("--test-subjects", type=int, default=1, help="held-out test subjects per class")

    p = sub.add_parser("split", parents=late, help="assign subjects to cross-validation folds")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--folds", type=int, default=4)

    p = sub.add_parser("preprocess", parents=late, help="centre cells on blank square canvases")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--canvas", type=int, default=350, help="canvas side in pixels")

    def add_training_flags(p, stages):
        p.add_argument("--manifest", type=Path, required=True)
        p.add_argument("--folds", type=Path, required=True, help="subject_id,fold file from 'split'")
        p.add_argument("--val-fold", type=int, default=0)
        p.add_argument("--stage", type=_stage, required=True, choices=stages, metavar="{" + ",".join(s.lower() for s in stages) + "}")
        p.add_argument("--aug", dest="augmentation_mode", choices=("none", "full", "normal_only"))
        p.add_argument("--lr", dest="learning_rate", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--epochs", dest="max_epochs", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--precision", choices=("float32", "float64"))

    p = sub.add_parser("train", parents=late, help="train a single-network stage")
    add_training_flags(p, ("S1", "S2", "S2C"))
    p.add_argument("--activation", choices=("relu", "prelu", "ptelu"))
    p.add_argument("--input-size", type=int)
    p.add_argument("--stain-init", choices=STAIN_SCHEMES)

    p = sub.add_parser("train-hybrid", parents=late, help="train the fusion layer over two frozen stages")
    add_training_flags(p, ("S3", "S3C"))
    p.add_argument("--ckpt", type=Path, nargs=2, required=True, metavar=("FIRST", "SECOND"),
                   help="component checkpoints: S1 then S2 (for s3) or S2C (for s3c)")

    p = sub.add_parser("eval", parents=late, help="evaluate a checkpoint")
    p.add_argument("--stage", type=_stage, required=True, metavar="{" + ",".join(s.lower() for s in STAGES) + "}")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--folds", type=Path, help="needed for --split val/train")
    p.add_argument("--val-fold", type=int, default=0)
    p.add_argument("--precision", choices=("float32", "float64"))

    p = sub.add_parser("inspect-dct", parents=late, help="dump OD, stain-quantity and DCT planes of one image")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--stain-init", choices=STAIN_SCHEMES, default="standard")
    p.add_argument("--ckpt", type=Path, help="use the learned stain matrix from this checkpoint")
    return parser


def _load_cfg(args) -> dict:
    return read_config(args.config) if args.config else {}


def _overrides(args, keys) -> dict:
    return {k: getattr(args, k, None) for k in keys}


def cmd_synth(args) -> dict:
    manifest = synth_generate(args.out, args.subjects, args.cells, args.size, Rng(args.seed), args.test_subjects)
    echo_config(args.out / "config.ini", {"synth": {
        "seed": args.seed, "subjects": args.subjects, "cells": args.cells, "size": args.size, "test_subjects": args.test_subjects,
    }})
    return {"images": len(manifest), "manifest": str(args.out / "manifest.csv")}


def cmd_split(args) -> dict:
    manifest = read_manifest(args.manifest)
    folds = split_folds(manifest, args.folds, Rng(args.seed))
    problems = fold_violations(manifest, folds)
    for p in problems:
        logger.warning("fold invariant: %s", p)
    path = write_folds(folds, args.out / "folds.csv")
    echo_config(args.out / "config.ini", {"split": {"seed": args.seed, "folds": args.folds, "manifest": args.manifest.name}})
    return {"folds": str(path), "subjects": len(folds.fold_of_subject), "violations": len(problems)}


def cmd_preprocess(args) -> dict:
    manifest = read_manifest(args.manifest)
    records = []
    for r in manifest.records:
        canvas = center_on_canvas(read_image(manifest.resolve(r)), size=args.canvas)
        rel = Path("images") / Path(r.path).with_suffix(".png").name
        if rel.as_posix() in {x.path for x in records}:
            rel = Path("images") / r.subject_id / Path(r.path).with_suffix(".png").name
        write_png(canvas, args.out / rel)
        records.append(Record(r.subject_id, r.label, rel.as_posix(), r.is_test))
    write_manifest(DatasetManifest(records, args.out), args.out / "manifest.csv")
    echo_config(args.out / "config.ini", {"preprocess": {"canvas": args.canvas, "manifest": args.manifest.name}})
    return {"images": len(records), "manifest": str(args.out / "manifest.csv")}


_TRAIN_KEYS = ("learning_rate", "momentum", "batch_size", "max_epochs", "patience", "precision")


def _write_run(args, result, stage_cfg, train_cfg) -> dict:
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt_path = result.checkpoint.save(args.out / "best.ckpt")
    result.write_log(args.out / "metrics.log")
    extra = {"run": {"seed": args.seed, "val_fold": args.val_fold, "manifest": args.manifest.name, "folds": args.folds.name}}
    echo_config(args.out / "config.ini", effective_sections(stage_cfg, train_cfg, **extra))
    if result.audit:
        (args.out / "freeze_audit.json").write_text(json.dumps(result.audit, indent=2, sort_keys=True) + "\n")
    return {"checkpoint": str(ckpt_path), "best_epoch": result.best_epoch, "val_accuracy": round(100 * result.best_accuracy, 2)}


def _train_inputs(args):
    cfg = _load_cfg(args)
    manifest = read_manifest(args.manifest)
    folds = read_folds(args.folds)
    data = load_images(manifest, "train")
    return cfg, folds, data


def cmd_train(args) -> dict:
    cfg, folds, data = _train_inputs(args)
    stage_cfg = make_stage_config(
        cfg, stage=args.stage, activation=args.activation, augmentation_mode=args.augmentation_mode,
        input_size=args.input_size, stain_init=args.stain_init,
    )
    if data.images.shape[-1] != stage_cfg.input_size or data.images.shape[-2] != stage_cfg.input_size:
        raise DataError(f"images are {data.images.shape[-2]}x{data.images.shape[-1]} but input_size is {stage_cfg.input_size}")
    train_cfg = make_train_config(cfg, args.seed, stage_cfg.augmentation_mode, **_overrides(args, _TRAIN_KEYS))
    args.out.mkdir(parents=True, exist_ok=True)
    result = train(stage_cfg, train_cfg, data, folds, args.val_fold, log_path=args.out / "metrics.log")
    return _write_run(args, result, stage_cfg, train_cfg)


def cmd_train_hybrid(args) -> dict:
    cfg, folds, data = _train_inputs(args)
    stage_cfg = make_stage_config(cfg, stage=args.stage, augmentation_mode=args.augmentation_mode)
    components = [load_checkpoint(p) for p in args.ckpt]
    expected = HYBRID_COMPONENTS[stage_cfg.stage]
    got = tuple(c.stage for c in components)
    if got != expected:
        raise ConfigError(f"{stage_cfg.stage} needs {expected[0]} and {expected[1]} checkpoints, got {got[0]} and {got[1]}")
    stage_cfg = make_stage_config(cfg, stage=args.stage, augmentation_mode=args.augmentation_mode,
                                  input_size=components[0].config.input_size)
    train_cfg = make_train_config(cfg, args.seed, stage_cfg.augmentation_mode, **_overrides(args, _TRAIN_KEYS))
    args.out.mkdir(parents=True, exist_ok=True)
    result = train_hybrid(stage_cfg, components, train_cfg, data, folds, args.val_fold, log_path=args.out / "metrics.log")
    return _write_run(args, result, stage_cfg, train_cfg)


def cmd_eval(args) -> dict:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.stage != args.stage:
        raise ConfigError(f"--stage {args.stage.lower()} does not match checkpoint stage {ckpt.stage.lower()}")
    manifest = read_manifest(args.manifest)
    if args.split in ("val", "train"):
        if args.folds is None:
            raise ConfigError(f"--split {args.split} needs --folds")
        folds = read_folds(args.folds)
        data = load_images(manifest, "train")
        in_val = np.array([folds.fold_of_subject.get(s, -1) == args.val_fold for s in data.subjects])
        data = data.subset(np.flatnonzero(in_val if args.split == "val" else ~in_val))
    else:
        data = load_images(manifest, "test" if args.split == "test" else "all")
    precision = args.precision or ckpt.meta.get("precision", "float32")
    model = ckpt.build_model().astype(precision)
    report = evaluate(model, data, precision=precision)
    report.meta = {"stage": ckpt.stage, "split": args.split, "checkpoint": args.ckpt.name}
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"metrics_{args.split}.txt"
    path.write_text(report.to_text())
    echo_config(args.out / "config.ini", {"eval": {
        "stage": ckpt.stage, "checkpoint": args.ckpt.name, "split": args.split, "precision": precision,
        "manifest": args.manifest.name, "val_fold": args.val_fold,
    }})
    return {"report": str(path), "accuracy": round(100 * report.accuracy, 2), "n": report.total}


def _plane_png(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(plane.min()), float(plane.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return (plane - lo) * scale


def cmd_inspect_dct(args) -> dict:
    cfg = _load_cfg(args)
    stage_cfg = make_stage_config(cfg, stage="S2")
    img = read_image(args.image).astype(np.float64)
    if args.ckpt is not None:
        state = load_checkpoint(args.ckpt).state
        keys = [k for k in state if k.endswith("sd.stain")]
        if not keys:
            raise DataError(f"{args.ckpt} holds no stain matrix")
        stain = state[keys[0]]
    else:
        stain = init_stain_matrix(args.stain_init, Rng(args.seed))
    od = rgb_to_od(img[None])
    q = sd_forward(od, Tensor(stain))
    od = od.data
    d = dct_layer_forward(q, stage_cfg.dct)
    args.out.mkdir(parents=True, exist_ok=True)
    np.savez(args.out / "planes.npz", od=od[0], quantities=q.data[0], dct=d.data[0], stain=stain)
    for name, arr in (("od", od[0]), ("sd", q.data[0]), ("dct", d.data[0])):
        for c in range(arr.shape[0]):
            write_png(_plane_png(arr[c]), args.out / f"{name}_{c}.png")
    echo_config(args.out / "config.ini", effective_sections(stage_cfg, None, inspect={
        "image": args.image.name, "stain_init": args.stain_init, "seed": args.seed,
    }))
    return {"planes": str(args.out / "planes.npz")}


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "train-hybrid": cmd_train_hybrid,
    "eval": cmd_eval,
    "inspect-dct": cmd_inspect_dct,
}


def _error_line(exc: BaseException, code: int) -> str:
    message = str(exc).replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")
    return f'error: code={code} kind={type(exc).__name__} message="{message}"'


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2),
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        summary = COMMANDS[args.command](args)
    except LeukoNetError as exc:
        print(_error_line(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(_error_line(exc, DataError.exit_code), file=sys.stderr)
        return DataError.exit_code
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
