"""Command-line entry point: ``painattn {synth,train,eval,loocv,gradcheck}``.

Exit codes: 0 ok, 1 usage/config, 2 I/O or file format, 3 numeric failure,
4 gradient check failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import config as runcfg
from .errors import ConfigError, FormatError, NumericError
from .gradsuite import DEFAULT_SEEDS, run_gradient_suite
from .model import PainAttnNet, parse_checkpoint, save_checkpoint
from .synth import generate_cohort, read_dataset, write_csv_dataset, write_dataset
from .train import build_task_dataset, evaluate, get_task, loocv, train_epochs

log = logging.getLogger("painattn")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for I/O here
    def error(self, message):
        raise CliError(EXIT_USAGE, f"{self.prog}: {message}")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _add_common(p, *, data=True, training=False, out_help="output path"):
    p.add_argument("--config", help="key = value file; flags override its entries")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", "-o", help=out_help)
    if data:
        p.add_argument("--data", help="dataset file (.bin or .csv)")
        p.add_argument("--task", help="5way, pain-any, t0t1, t0t2, t0t3 or t0t4")
    if training:
        p.add_argument("--epochs", type=_non_negative_int)
        p.add_argument("--lr", type=float)
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--batch-size", type=_positive_int)
        p.add_argument("--heads", type=_positive_int)
        p.add_argument("--blocks", type=_positive_int)
        p.add_argument("--model", choices=runcfg.MODEL_PRESETS, help="architecture preset")
        p.add_argument("--class-weighting", action="store_true", default=None,
                       help="weight the loss by inverse class frequency")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="painattn",
                     description="Pain-level classification of EDA windows with multiscale convolutions and attention.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    _add_common(p, data=False, out_help="dataset file to write (.bin, or .csv)")
    p.add_argument("--subjects", type=_positive_int)
    p.add_argument("--noise", type=float)
    p.add_argument("--temp-mode", choices=runcfg.TEMP_MODES)

    p = sub.add_parser("train", help="train on every subject and save a checkpoint")
    _add_common(p, training=True, out_help="checkpoint file to write")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add_common(p, out_help="report JSON (default: next to the checkpoint)")
    p.add_argument("--checkpoint", help="checkpoint written by 'train'")

    p = sub.add_parser("loocv", help="leave-one-subject-out cross-validation")
    _add_common(p, training=True, out_help="manifest JSON (default: loocv-<task>.json)")
    p.add_argument("--jobs", type=_positive_int, help="folds run in parallel")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and the mini model")
    p.add_argument("--seed", type=int, action="append", help="repeatable; default 0, 1, 2")
    p.add_argument("--out", "-o", help="optional JSON report")
    return parser


# -- helpers -----------------------------------------------------------------

def _resolve(args) -> runcfg.RunConfig:
    file_values = {}
    if getattr(args, "config", None):
        try:
            file_values = runcfg.load_config_file(args.config)
        except OSError as exc:
            raise CliError(EXIT_IO, f"--config {args.config}: {exc.strerror or exc}") from None
    flags = {k: v for k, v in vars(args).items() if k in runcfg._FIELD_TYPES}
    return runcfg.resolve(file_values, flags)


def _require(cfg, key):
    if getattr(cfg, key) is None:
        raise CliError(EXIT_USAGE, f"--{key} is required")
    return getattr(cfg, key)


def _read_bytes(path, flag) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_IO, f"{flag} {path}: {exc.strerror or exc}") from None


def _load_windows(cfg):
    path = _require(cfg, "data")
    blob = _read_bytes(path, "--data")
    try:
        windows = read_dataset(path)
    except FormatError as exc:
        raise CliError(EXIT_IO, f"--data {path}: {exc}") from None
    return windows, hashlib.sha256(blob).hexdigest()


def _write_json(path, payload, flag="--out"):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"{flag} {path}: {exc.strerror or exc}") from None


def _write_loss_csv(path, curves: dict):
    """One row per (run, epoch); ``curves`` maps a run label to its loss list."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "epoch", "loss"])
            for label, losses in curves.items():
                for epoch, loss in enumerate(losses):
                    w.writerow([label, epoch, repr(float(loss))])
    except OSError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc.strerror or exc}") from None


def _manifest(command, cfg, **extra) -> dict:
    return {"command": command, "config": cfg.to_dict(), "seed": cfg.seed, **extra}


def _sibling(path, suffix) -> Path:
    p = Path(path)
    return p.with_name(p.name + suffix)


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = _require(cfg, "out")
    start = time.perf_counter()
    windows = generate_cohort(cfg.protocol_config(), seed=cfg.seed, subjects=cfg.subjects, noise=cfg.noise)
    try:
        if str(out).endswith(".csv"):
            write_csv_dataset(windows, out)
        else:
            write_dataset(windows, out, sample_rate=cfg.protocol_config().sample_rate)
    except OSError as exc:
        raise CliError(EXIT_IO, f"--out {out}: {exc.strerror or exc}") from None
    digest = hashlib.sha256(Path(out).read_bytes()).hexdigest()
    _write_json(_sibling(out, ".manifest.json"), _manifest(
        "synth", cfg, data_sha256=digest, windows=len(windows), wall_seconds=time.perf_counter() - start))
    print(f"wrote {cfg.subjects} subjects, {len(windows)} windows to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _require(cfg, "out")
    task = get_task(cfg.task)
    windows, digest = _load_windows(cfg)
    data = build_task_dataset(windows, task)
    start = time.perf_counter()
    model = PainAttnNet(cfg.model_config(task.num_classes), seed=cfg.seed)
    result = train_epochs(model, data, cfg.train_config(),
                          progress=lambda e, loss, acc: log.info("epoch %d loss %.6f acc %.4f", e, loss, acc))
    report = evaluate(model, data)
    meta = {"task": task.name, "seed": cfg.seed, "data_sha256": digest}
    try:
        save_checkpoint(model, out, meta)
    except OSError as exc:
        raise CliError(EXIT_IO, f"--out {out}: {exc.strerror or exc}") from None
    _write_loss_csv(_sibling(out, ".loss.csv"), {"train": result.losses})
    _write_json(_sibling(out, ".manifest.json"), _manifest(
        "train", cfg, data_sha256=digest, model_digest=model.cfg.digest(), windows=len(data),
        loss=result.losses, train_report=report.to_dict(), wall_seconds=time.perf_counter() - start))
    print(f"trained {task.name} on {len(data)} windows, final loss {result.losses[-1] if result.losses else float('nan'):.6f}")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    ckpt = _require(cfg, "checkpoint")
    task = get_task(cfg.task)
    blob = _read_bytes(ckpt, "--checkpoint")
    try:
        model, meta = parse_checkpoint(blob)
    except FormatError as exc:
        raise CliError(EXIT_IO, f"--checkpoint {ckpt}: {exc}") from None
    if model.cfg.num_classes != task.num_classes:
        raise CliError(EXIT_USAGE, f"--task {task.name} has {task.num_classes} classes but --checkpoint {ckpt} "
                                   f"was built for {model.cfg.num_classes}")
    windows, digest = _load_windows(cfg)
    start = time.perf_counter()
    report = evaluate(model, build_task_dataset(windows, task))
    out = cfg.out or _sibling(ckpt, f".eval-{task.name}.json")
    _write_json(out, _manifest("eval", cfg, data_sha256=digest, checkpoint_meta=meta,
                               report=report.to_dict(), wall_seconds=time.perf_counter() - start))
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_loocv(args) -> int:
    cfg = _resolve(args)
    task = get_task(cfg.task)
    windows, digest = _load_windows(cfg)

    def on_fold(fold):
        print(f"fold subject {fold.subject}: acc {fold.accuracy:.4f} baseline {fold.baseline_accuracy:.4f} "
              f"({fold.seconds:.1f}s)", flush=True)

    result = loocv(windows, task, cfg.train_config(), cfg.model_config(task.num_classes),
                   jobs=cfg.jobs, on_fold=on_fold)
    out = Path(cfg.out or f"loocv-{task.name}.json")
    folds = [{"subject": f.subject, "windows": int(len(f.y_true)), "accuracy": f.accuracy,
              "baseline_accuracy": f.baseline_accuracy, "seconds": f.seconds} for f in result.folds]
    _write_json(out, _manifest("loocv", cfg, data_sha256=digest, folds=folds,
                               report=result.report.to_dict(), baseline=result.baseline.to_dict(),
                               wall_seconds=result.seconds))
    _write_loss_csv(out.with_suffix(".loss.csv"), {f"subject{f.subject}": f.losses for f in result.folds})
    print(f"pooled over {len(folds)} folds")
    print(result.report.to_text(), end="")
    print(f"baseline acc {result.baseline.acc:.6f} kappa {result.baseline.kappa:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = tuple(args.seed) if args.seed else DEFAULT_SEEDS
    start = time.perf_counter()
    reports = run_gradient_suite(seeds, on_report=lambda r: print(r.line(), flush=True))
    ok = all(r.passed for r in reports)
    worst = max(reports, key=lambda r: r.max_rel_error)
    print(f"{len(reports)} checks, worst {worst.name} {worst.max_rel_error:.3e}: {'PASS' if ok else 'FAIL'}")
    if args.out:
        _write_json(args.out, {"command": "gradcheck", "seeds": list(seeds), "passed": ok,
                               "wall_seconds": time.perf_counter() - start,
                               "checks": [{"name": r.name, "max_rel_error": r.max_rel_error,
                                           "tolerance": r.tolerance, "checked": r.n_checked,
                                           "passed": r.passed} for r in reports]})
    return EXIT_OK if ok else EXIT_GRADCHECK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "loocv": cmd_loocv,
            "gradcheck": cmd_gradcheck}


def _setup_logging():
    level = os.environ.get("PAN_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise CliError(EXIT_USAGE, f"PAN_LOG={level!r}: choose error, info or debug")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
