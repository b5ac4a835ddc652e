"""Command-line entry point: ``msdb <command> [flags]``.

Every command reads the same flat run config (``--config FILE`` then
``--set key=value`` overrides) and logs the resolved values before it runs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import container
from .config import ConfigError, RunConfig, load_config
from .datagen import class_names, dataset_stats, generate_dataset, load_dataset, save_dataset
from .gradsuite import CASES, run_suite
from .losses import weight_curve
from .metrics import format_report
from .model import MSDBModel
from .tensor import Tensor
from .trainer import (
    ABLATIONS,
    ablation_suite,
    evaluate_model,
    format_ablation,
    load_checkpoint,
    save_checkpoint,
    train_stage,
)

log = logging.getLogger("msdb")


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    data = cfg.data if args.seed is None else replace(cfg.data, seed=args.seed)
    count = data.train_count if args.count is None else args.count
    samples = generate_dataset(data.scene(), count, cfg.model.input_size)
    save_dataset(args.out, samples, cfg.model.num_parse_classes, data.parts_per_hand)
    log.info("wrote %d samples to %s", count, args.out)
    return 0


def cmd_stats(args, cfg: RunConfig) -> int:
    samples, meta = load_dataset(args.data)
    C, P = meta["num_parse_classes"], meta["parts_per_hand"]
    stats = dataset_stats(samples, C, class_names(P))
    if args.format == "json":
        print(json.dumps(stats, indent=2))
    else:
        print(f"{'class':<16}{'fraction':>10}")
        for name, frac in stats.items():
            print(f"{name:<16}{frac:>10.4f}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    samples, _ = load_dataset(args.data)
    eval_samples = load_dataset(args.eval_data)[0] if args.eval_data else None
    if args.init:
        model, _, _ = load_checkpoint(args.init)
        if model.config != cfg.model:
            log.warning("model section ignored: using the configuration stored in %s", args.init)
    else:
        model = MSDBModel(cfg.model)
    stage = {"mask": 1, "parse": 2}[args.stage]
    epochs = args.epochs
    records, optimizer = train_stage(
        stage, samples, model, cfg.train, cfg.loss, eval_samples=eval_samples,
        epochs=epochs, from_scratch=args.from_scratch, aug=cfg.aug, log_path=args.log)
    save_checkpoint(args.out, model, optimizer, meta={"config": cfg.dump()})
    last = records[-1]
    print(f"stage {args.stage}: {len(records)} epochs, final loss {last['loss']:.5f}"
          + (f", mean_iou {last['mean_iou']:.4f}" if last["mean_iou"] is not None else ""))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    samples, meta = load_dataset(args.data)
    if args.target == "seg" and not model.config.mask_branch:
        raise ValueError("this model has no mask branch to evaluate")
    report = evaluate_model(model, samples, target=args.target)
    names = class_names(meta["parts_per_hand"]) if args.target == "parse" else \
        ["background", "left_hand", "right_hand"]
    print(format_report(report, args.format, names))
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    samples, _ = load_dataset(args.data)
    out = Path(args.out)
    (out / "parse").mkdir(parents=True, exist_ok=True)
    if model.config.mask_branch:
        (out / "seg").mkdir(parents=True, exist_ok=True)
    for start in range(0, len(samples), args.batch_size):
        chunk = samples[start:start + args.batch_size]
        seg, parse = model.predict(Tensor(np.stack([s.image for s in chunk])))
        for j in range(len(chunk)):
            i = start + j
            container.save(out / "parse" / f"{i:04d}.msdt", parse[j].astype(np.uint8))
            if seg is not None:
                container.save(out / "seg" / f"{i:04d}.msdt", seg[j].astype(np.uint8))
    log.info("wrote %d label maps to %s", len(samples), out)
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    train = load_dataset(args.train_data)[0] if args.train_data else cfg.train_set()
    test = load_dataset(args.test_data)[0] if args.test_data else cfg.test_set()
    rows = ablation_suite(args.suite, train, test, cfg.model, cfg.train, cfg.loss, cfg.aug,
                          arms=args.arms)
    print(format_ablation(rows, args.suite))
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    dtypes = {"32": (np.float32,), "64": (np.float64,), "both": (np.float32, np.float64)}
    results = run_suite(dtypes[args.precision], args.instances, args.seed, args.case)
    print(f"{'case':<26}{'dtype':<9}{'max_rel_err':>12}{'tol':>8}  result")
    for r in results:
        print(f"{r.name:<26}{r.dtype:<9}{r.max_error:>12.2e}{r.tolerance:>8.0e}  "
              f"{'pass' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in results) else 1


def cmd_weight_curve(args, cfg: RunConfig) -> int:
    alpha = cfg.loss.alpha if args.alpha is None else args.alpha
    print(f"{'r':>8} {'weight':>10}")
    for r, w in weight_curve(alpha, args.samples):
        print(f"{r:>8.4f} {w:>10.4f}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="msdb", formatter_class=fmt,
                                     description="Synthetic hand parsing experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], formatter_class=fmt, help=help_,
                           description=help_)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="scene seed; unset uses data.seed")
    p.add_argument("--count", type=int, default=None,
                   help="number of samples; unset uses data.train_count")

    p = add("stats", cmd_stats, "per-class pixel fractions of a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--format", choices=("text", "json"), default="text", help="output format")

    p = add("train", cmd_train, "run one training stage and write a checkpoint")
    p.add_argument("--stage", choices=("mask", "parse"), required=True,
                   help="mask: seg labels; parse: part labels")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--init", default=None, help="checkpoint to continue from")
    p.add_argument("--from-scratch", action="store_true",
                   help="allow the parse stage without a finished mask stage")
    p.add_argument("--eval-data", default=None, help="dataset evaluated after each epoch")
    p.add_argument("--epochs", type=int, default=None,
                   help="epoch count; unset uses train.stage1_epochs or train.stage2_epochs")
    p.add_argument("--log", default=None, help="append per-epoch JSON records here")

    p = add("eval", cmd_eval, "confusion-matrix metrics of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--target", choices=("parse", "seg"), default="parse", help="which labels to score")
    p.add_argument("--format", choices=("text", "json"), default="text", help="output format")

    p = add("predict", cmd_predict, "write argmax label maps for a dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint to run")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory (parse/ and seg/)")
    p.add_argument("--batch-size", type=int, default=16, help="images per forward pass")

    p = add("ablate", cmd_ablate, "train and compare the arms of one ablation suite")
    p.add_argument("--suite", choices=sorted(ABLATIONS), required=True, help="ablation to run")
    p.add_argument("--arms", nargs="+", default=None, help="subset of arm names")
    p.add_argument("--train-data", default=None, help="dataset; unset generates one from the data section")
    p.add_argument("--test-data", default=None, help="dataset; unset generates one from the data section")

    p = add("grad-check", cmd_grad_check, "finite-difference check of every differentiable op")
    p.add_argument("--precision", choices=("32", "64", "both"), default="both",
                   help="floating precision of the analytic pass")
    p.add_argument("--instances", type=int, default=20, help="random instances per case")
    p.add_argument("--seed", type=int, default=0, help="base seed of the instances")
    p.add_argument("--case", nargs="+", choices=sorted(CASES), default=None,
                   help="subset of cases; unset runs all")

    p = add("weight-curve", cmd_weight_curve, "class weight alpha**-r over r in [0, 1]")
    p.add_argument("--alpha", type=float, default=None, help="base alpha; unset uses loss.alpha")
    p.add_argument("--samples", type=int, default=11, help="evenly spaced ratios in [0, 1]")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    try:
        cfg = load_config(args.config, args.set)
    except (ConfigError, OSError) as exc:
        print(f"msdb {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    try:
        log.info("resolved config:\n%s", cfg.dump().rstrip())
        return args.fn(args, cfg)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"msdb {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
