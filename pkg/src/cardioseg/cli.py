"""Command line front end: phantom, train, predict, evaluate, gradcheck.

Exit codes are stable so scripts can branch on them: 0 success, 2 for
usage or configuration mistakes, 3 for unreadable or inconsistent data,
4 for numerical failures. Inputs are validated before any output file
or directory is created.

Training options beyond the flags live in a key = value config file
('#' starts a comment); unknown keys are rejected rather than ignored,
since a typo silently falling back to a default is the worst outcome a
config file can have.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional

import numpy as np

from . import engine, gradcheck as gc, metrics
from .data.augment import AugmentConfig
from .data.dataset import load_dataset, load_study, parse_kv_lines, save_dataset, save_study
from .data.phantom import generate_phantom
from .data.preprocess import PreprocessConfig
from .data.volume import VolumeStudy
from .errors import (CardiosegError, CompatibilityError, DataError, DegenerateStudyError,
                     DomainError, FormatError, LabelError, NumericalError, PairingError,
                     ParameterError, ShapeError, StatisticsError, TapeError,
                     UnsupportedError)
from .losses import LOSS_FUNCTIONS, LossConfig
from .models import ModelConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_USAGE_ERRORS = (ParameterError,)
_DATA_ERRORS = (DataError, FormatError, UnsupportedError, CompatibilityError,
                PairingError, LabelError, ShapeError, DegenerateStudyError,
                StatisticsError, OSError)
_NUMERIC_ERRORS = (NumericalError, DomainError, TapeError)


def _size_triple(text: str):
    if not re.fullmatch(r"\d+x\d+x\d+", text):
        raise argparse.ArgumentTypeError(f"size must look like ZxHxW, got {text!r}")
    z, h, w = (int(v) for v in text.split("x"))
    return z, h, w


def _loader_threads() -> int:
    raw = os.environ.get("CARDIOSEG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"CARDIOSEG_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ParameterError(f"CARDIOSEG_THREADS must be positive, got {n}")
    return n


def _load_studies(root: str) -> List[VolumeStudy]:
    threads = _loader_threads()
    if threads == 1:
        return load_dataset(root)
    if not os.path.isdir(root):
        raise DataError(f"dataset directory {root} does not exist")
    folders = sorted(os.path.join(root, name) for name in os.listdir(root)
                     if os.path.isdir(os.path.join(root, name)))
    if not folders:
        raise DataError(f"dataset directory {root} holds no studies")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        studies = list(pool.map(load_study, folders))
    studies.sort(key=lambda s: (s.patient_id, s.phase or ""))
    return studies


# ---------------------------------------------------------------------------
# train configuration file

def _parse_bool(text: str) -> bool:
    if text in ("0", "1"):
        return bool(int(text))
    raise ValueError(f"expected 0 or 1, got {text!r}")


def _parse_opt_float(text: str):
    return None if text == "none" else float(text)


def _parse_opt_int(text: str):
    return None if text == "none" else int(text)


def _parse_floats(text: str, n: int):
    parts = tuple(float(v) for v in text.split(","))
    if len(parts) != n:
        raise ValueError(f"expected {n} comma-separated values, got {text!r}")
    return parts


def _parse_opt_spacing(text: str):
    return None if text == "none" else _parse_floats(text, 3)


def _parse_ints(text: str, n: int):
    parts = tuple(int(v) for v in text.split(","))
    if len(parts) != n:
        raise ValueError(f"expected {n} comma-separated values, got {text!r}")
    return parts


_TRAIN_KEYS = {
    "dims": int,
    "loss": str,
    "epochs": int,
    "batch_size": _parse_opt_int,
    "slices": int,
    "initial_lr": float,
    "momentum": float,
    "lr_decay_factor": float,
    "lr_decay_every": int,
    "grad_clip": _parse_opt_float,
    "seed": int,
    "folds": int,
    "num_classes": int,
    "base_width": int,
    "depth": int,
    "max_width": _parse_opt_int,
    "dropout_last": float,
    "dropout_second_last": float,
    "lambda_ce": float,
    "lambda_dice": float,
    "dice_epsilon": float,
    "dice_numerator_factor": float,
    "target_spacing": _parse_opt_spacing,  # x,y,z mm or none
    "size": lambda t: _parse_ints(t, 2),   # H,W
    "z_slices": int,
    "apply_clahe": _parse_bool,
    "clahe_bins": int,
    "clahe_tiles": lambda t: _parse_ints(t, 2),
    "clahe_clip": float,
    "percentiles": lambda t: _parse_floats(t, 2),
    "rotation_degrees": lambda t: _parse_floats(t, 2),
    "scale_range": lambda t: _parse_floats(t, 2),
    "augment_probability": float,
}


def read_train_options(path: Optional[str]) -> Dict[str, object]:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = parse_kv_lines(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    options: Dict[str, object] = {}
    for key, value in raw.items():
        parser = _TRAIN_KEYS.get(key)
        if parser is None:
            raise ParameterError(f"unknown config key {key!r} in {path}")
        try:
            options[key] = parser(value)
        except ValueError as exc:
            raise ParameterError(f"bad value for {key!r} in {path}: {exc}") from exc
    return options


def build_train_config(options: Dict[str, object], dims: Optional[int],
                       loss: Optional[str]) -> engine.TrainConfig:
    opts = dict(options)
    if dims is not None:
        opts["dims"] = dims
    if loss is not None:
        opts["loss"] = loss
    dims = int(opts.pop("dims", 2))
    slices = int(opts.pop("slices", 3))

    model = ModelConfig(dims=dims,
                        in_channels=slices if dims == 2 else 1,
                        num_classes=int(opts.pop("num_classes", 4)),
                        base_width=int(opts.pop("base_width", 32)),
                        depth=int(opts.pop("depth", 4)),
                        max_width=opts.pop("max_width", None),
                        dropout_last=float(opts.pop("dropout_last", 0.5)),
                        dropout_second_last=float(opts.pop("dropout_second_last", 0.3)))
    loss_cfg = LossConfig(lambda_ce=float(opts.pop("lambda_ce", 0.5)),
                          lambda_dice=float(opts.pop("lambda_dice", 0.5)),
                          epsilon=float(opts.pop("dice_epsilon", 1e-5)),
                          dice_numerator_factor=float(opts.pop("dice_numerator_factor", 2.0)))
    prep = PreprocessConfig(target_spacing=opts.pop("target_spacing", (1.5, 1.5, 10.0)),
                            percentiles=opts.pop("percentiles", (1.0, 99.0)),
                            size=opts.pop("size", (256, 256)),
                            z_slices=int(opts.pop("z_slices", 12)),
                            clahe_bins=int(opts.pop("clahe_bins", 256)),
                            clahe_tiles=opts.pop("clahe_tiles", (8, 8)),
                            clahe_clip=float(opts.pop("clahe_clip", 0.01)),
                            apply_clahe=bool(opts.pop("apply_clahe", True)))
    aug = AugmentConfig(rotation_degrees=opts.pop("rotation_degrees", (-15.0, 15.0)),
                        scale_range=opts.pop("scale_range", (0.9, 1.1)),
                        probability=float(opts.pop("augment_probability", 0.5)))
    cfg = engine.TrainConfig(dims=dims,
                             loss=str(opts.pop("loss", "dice_ce")),
                             epochs=int(opts.pop("epochs", 10)),
                             batch_size=opts.pop("batch_size", None),
                             slices=slices,
                             initial_lr=float(opts.pop("initial_lr", 1e-3)),
                             momentum=float(opts.pop("momentum", 0.99)),
                             lr_decay_factor=float(opts.pop("lr_decay_factor", 10.0)),
                             lr_decay_every=int(opts.pop("lr_decay_every", 30)),
                             grad_clip=opts.pop("grad_clip", None),
                             seed=int(opts.pop("seed", 0)),
                             model=model, loss_cfg=loss_cfg, prep=prep, aug=aug)
    opts.pop("folds", None)
    assert not opts, f"unhandled config keys {sorted(opts)}"
    return cfg


# ---------------------------------------------------------------------------
# commands

def cmd_phantom(args) -> int:
    if args.count == 0:
        print("warning: --count 0 writes an empty dataset", file=sys.stderr)
    studies = generate_phantom(args.count, extents=args.size, rng=args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(studies, args.out)
    print(f"wrote {len(studies)} studies to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    options = read_train_options(args.config)
    cfg = build_train_config(options, args.dims, args.loss)
    cfg.validate()
    folds = int(options.get("folds", 5))

    studies = _load_studies(args.data)
    validation = None
    if args.fold is not None:
        patient_ids = sorted({s.patient_id for s in studies})
        splits = engine.make_folds(patient_ids, folds, seed=cfg.seed)
        if not 0 <= args.fold < len(splits):
            raise ParameterError(f"--fold {args.fold} out of range for {folds} folds")
        split = splits[args.fold]
        validation = [s for s in studies if s.patient_id in set(split.val_ids)]
        studies = [s for s in studies if s.patient_id in set(split.train_ids)]
        if not studies or not validation:
            raise DataError("fold split left train or validation empty")

    result = engine.train(cfg, studies, validation=validation, out_dir=args.out)
    for h in result.history:
        vd = "-" if h.val_dice is None else f"{h.val_dice:.4f}"
        print(f"epoch {h.epoch:3d}  lr {h.lr:.2e}  train_loss {h.train_loss:.4f}  val_dice {vd}")
    print(f"best epoch {result.best_epoch}; checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.slices is not None and (args.slices < 1 or args.slices % 2 == 0):
        raise ParameterError(f"--slices must be odd and positive, got {args.slices}")
    model, prep, slices = engine.load_model_for_inference(args.checkpoint)
    if args.slices is not None:
        slices = args.slices
    studies = _load_studies(args.input)
    os.makedirs(args.out, exist_ok=True)
    for study in studies:
        pred = engine.predict_study(model, study, prep, slices=slices)
        folder = save_study(pred, args.out)
        print(f"{pred.study_id()}: {folder}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    preds = _load_studies(args.pred)
    truths = _load_studies(args.truth)
    report = metrics.evaluate_cohort(preds, truths)
    table = metrics.render_report_table(report)
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
        with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write(metrics.render_report_lines(report))
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gc.run_suite(seed=0)
    failed = 0
    for r in results:
        mark = "ok" if r.ok else "FAIL"
        print(f"{r.name:45s} max_rel_err {r.max_rel_error:.3e}  {mark}")
        failed += 0 if r.ok else 1
    if failed:
        raise NumericalError(f"{failed} of {len(results)} gradient checks failed")
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cardioseg",
                                     description="Cardiac MR segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=8, help="number of patients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size_triple, default=(8, 64, 64), metavar="ZxHxW")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="fit a segmentation model")
    p.add_argument("--config", default=None, help="key = value options file")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--fold", type=int, default=None, help="cross-validation fold to hold out")
    p.add_argument("--loss", choices=sorted(LOSS_FUNCTIONS), default=None)
    p.add_argument("--dims", type=int, choices=(2, 3), default=None)
    p.add_argument("--out", required=True, help="run directory for checkpoint and history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment studies with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="dataset directory to segment")
    p.add_argument("--out", required=True, help="directory for predicted studies")
    p.add_argument("--slices", type=int, default=None, help="2D context stack override")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None, help="directory for report.txt / report.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC_ERRORS as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CardiosegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
