"""Command-line entry point: ``cycletrain <subcommand> ...``.

Exit codes: 0 ok, 1 usage/config error, 2 data or checkpoint error,
3 numeric failure (non-finite values, gradient check above threshold).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .data import AugmentConfig, iter_batches, load_image_folder, manifest_from_origin, synth_glyphs
from .errors import CheckpointError, ConfigError, DataError, NonFiniteError, ShapeError
from .lr_finder import LrSweepConfig, run_lr_sweep
from .metrics import evaluate
from .nn.gradcheck import gradcheck_suite
from .nn.models import build_classifier
from .optim import AdamWConfig
from .pipeline import (ScheduleDefaults, load_plan, loss_curve_csv, replace_head, run_plan,
                       set_frozen, stage_schedule_csv)
from .schedule import OneCycleConfig, export_schedule, schedule_csv
from .svg import line_chart

log = logging.getLogger("cycletrain")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_data_args(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--data", metavar="ROOT", help="class-folder image tree (ROOT/<label>/*.png)")
    g.add_argument("--synthetic", action="store_true", help="use generated stroke glyphs")
    p.add_argument("--classes", type=int, default=10, help="synthetic: number of classes")
    p.add_argument("--per-class", type=int, default=100, help="synthetic: images per class")
    p.add_argument("--size", type=int, default=32, help="synthetic: image side in pixels")
    p.add_argument("--val-frac", type=float, default=0.25)
    p.add_argument("--data-seed", type=int, default=None, help="split/generator seed (default: --seed)")


def _add_adamw_args(p):
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--beta2", type=float, default=0.999)


def _add_arch_args(p):
    p.add_argument("--widths", type=int, nargs="+", default=[16, 32], help="body group widths")
    p.add_argument("--hidden", type=int, default=512, help="head hidden width")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cycletrain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("lr-find", help="LR range test; writes lrfind.csv")
    _add_data_args(p)
    _add_arch_args(p)
    _add_adamw_args(p)
    p.add_argument("--checkpoint", help="start from this checkpoint instead of a fresh network")
    p.add_argument("--start-lr", type=float, default=1e-7)
    p.add_argument("--end-lr", type=float, default=10.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--divergence-factor", type=float, default=4.0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--frozen", action="store_true", help="freeze body groups during the sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")

    p = sub.add_parser("train", help="run a stage plan")
    _add_data_args(p, required=False)
    _add_arch_args(p)
    _add_adamw_args(p)
    p.add_argument("--plan", default="default", help="plan JSON path or shipped name (default, table2)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="run")
    p.add_argument("--weights", help="initialize from a checkpoint; the head is replaced if class counts differ")
    p.add_argument("--resume", help="continue after the stage stored in this checkpoint")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--control", action="store_true",
                   help="also run a constant-LR control at the same budget")
    p.add_argument("--warmup-frac", type=float, default=0.30)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes report.json and confusion.csv")
    _add_data_args(p, required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "all"])
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")

    p = sub.add_parser("export-schedule", help="write the one-cycle schedule as CSV and SVG")
    p.add_argument("--eta-max", type=float, required=True)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--eta-min", type=float, default=None, help="default eta_max / 25")
    p.add_argument("--warmup-frac", type=float, default=0.30)
    p.add_argument("--mom-max", type=float, default=0.90)
    p.add_argument("--mom-min", type=float, default=0.85)
    p.add_argument("--out", default=".")

    p = sub.add_parser("grad-check", help="finite-difference check of every layer kind")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    return parser


# -- helpers ----------------------------------------------------------------------

def _manifest(args, fallback_origin=None):
    seed = args.data_seed if getattr(args, "data_seed", None) is not None else args.seed
    if getattr(args, "data", None):
        return load_image_folder(args.data, args.val_frac, seed)
    if getattr(args, "synthetic", False):
        return synth_glyphs(args.classes, args.per_class, args.size, seed, args.val_frac)
    if fallback_origin:
        return manifest_from_origin(fallback_origin)
    raise UsageError("one of --data or --synthetic is required")


def _native_size(manifest) -> int:
    return int(manifest.image(int(manifest.train_idx[0] if manifest.train_idx.size else 0)).shape[0])


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


@contextlib.contextmanager
def _thread_cap():
    n = os.environ.get("CYCLETRAIN_THREADS")
    if not n:
        yield
        return
    try:
        limit = int(n)
    except ValueError:
        raise UsageError(f"CYCLETRAIN_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=max(limit, 1)):
        yield


# -- subcommands -------------------------------------------------------------------

def cmd_lr_find(args) -> int:
    data = _manifest(args)
    if args.checkpoint:
        net, _, _ = load_checkpoint(args.checkpoint)
        if net.meta.get("num_classes") != data.num_classes:
            net = replace_head(net, data.num_classes, args.seed)
    else:
        net = build_classifier(1, data.num_classes, args.seed, tuple(args.widths), hidden=args.hidden)
    set_frozen(net, args.frozen)
    size = args.image_size or _native_size(data)
    cfg = LrSweepConfig(args.start_lr, args.end_lr, args.steps, divergence_factor=args.divergence_factor)
    batches = iter_batches(data, data.train_idx, args.batch_size, size, shuffle_key=(args.seed,))
    adamw = AdamWConfig(beta2=args.beta2, weight_decay=args.weight_decay)
    result = run_lr_sweep(net, list(batches), cfg, adamw)
    out = Path(args.out)
    _write(out / "lrfind.csv", result.to_csv())
    rows = result.rows
    _write(out / "lrfind.svg", line_chart(
        {"smoothed": ([np.log10(r.lr) for r in rows], [r.smoothed_loss for r in rows]),
         "raw": ([np.log10(r.lr) for r in rows], [r.raw_loss for r in rows])},
        "LR range test", "log10(lr)", "loss"))
    print(f"selected eta_max = {result.selected_eta_max:.6g}"
          f" (min smoothed loss at lr {result.best_lr:.6g}; {len(rows)} steps"
          f"{', stopped early' if result.stopped_early else ''})")
    return EXIT_OK


def cmd_train(args) -> int:
    stages = load_plan(args.plan)
    out = Path(args.out)
    start = 0
    if args.resume:
        net, _, meta = load_checkpoint(args.resume)
        start = int(meta.get("stage", -1)) + 1
        if "plan" in meta and not (args.plan and Path(args.plan).exists()):
            from .pipeline import parse_plan
            stages = parse_plan(meta["plan"])
        seed = int(meta.get("seed", args.seed))
        if seed != args.seed:
            log.info("resuming with checkpoint seed %d", seed)
            args.seed = seed
        data = _manifest(args, meta.get("data"))
    else:
        data = _manifest(args)
        if args.weights:
            net, _, _ = load_checkpoint(args.weights)
            if net.meta.get("num_classes") != data.num_classes:
                net = replace_head(net, data.num_classes, args.seed)
        else:
            net = build_classifier(1, data.num_classes, args.seed, tuple(args.widths), hidden=args.hidden)
    # describe the network actually trained, not the flags, so resumed and fine-tuned runs stay truthful
    extra = {"arch": {"widths": net.meta.get("widths", args.widths), "hidden": net.meta.get("hidden", args.hidden)}}
    aug = None if args.no_augment else AugmentConfig()
    adamw = AdamWConfig(beta2=args.beta2, weight_decay=args.weight_decay)
    runs = {}
    control_net = net.copy() if args.control else None
    sched = ScheduleDefaults(warmup_frac=args.warmup_frac)
    runs["one-cycle"] = run_plan(net, data, stages, adamw, sched, args.seed, out, start, aug, extra)
    if control_net is not None:
        control = ScheduleDefaults(warmup_frac=args.warmup_frac, policy="constant")
        runs["constant"] = run_plan(control_net, data, stages, adamw, control, args.seed, out, start, aug,
                                    extra, checkpoint_prefix="control-stage")
    _write(out / "loss_curve.csv", loss_curve_csv(runs, start + 1))
    _write(out / "schedule.csv", stage_schedule_csv(runs["one-cycle"], start + 1))
    series = {}
    for name, recs in runs.items():
        losses = [r.train_loss for rec in recs for r in rec.iterations]
        series[f"{name} train"] = (list(range(len(losses))), losses)
    _write(out / "loss_curve.svg", line_chart(series, "Training loss", "iteration", "loss"))
    summary = {"data": data.origin, "seed": args.seed, "first_stage": start + 1, "runs": {}}
    for name, recs in runs.items():
        last = recs[-1].epochs[-1] if recs else None
        summary["runs"][name] = {
            "final_val_accuracy": None if last is None else last.val_accuracy,
            "final_val_loss": None if last is None else last.val_loss,
            "stages": [[e.val_accuracy for e in rec.epochs] for rec in recs],
        }
        if last is not None:
            print(f"{name}: final validation accuracy {last.val_accuracy:.4f} (loss {last.val_loss:.4f})")
    _write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _, meta = load_checkpoint(args.checkpoint)
    data = _manifest(args, meta.get("data"))
    if net.meta.get("num_classes") not in (None, data.num_classes):
        raise DataError(f"checkpoint predicts {net.meta['num_classes']} classes, data has {data.num_classes}")
    size = args.image_size
    if size is None:
        plan = meta.get("plan")
        size = plan[int(meta.get("stage", len(plan) - 1))]["image_size"] if plan else _native_size(data)
    idx = data.split(args.split)
    rep = evaluate(net, iter_batches(data, idx, args.batch_size, size), data.num_classes)
    out = Path(args.out)
    _write(out / "report.json", rep.to_json(data.classes))
    _write(out / "confusion.csv", rep.confusion_csv(data.classes))
    print(f"accuracy {rep.accuracy:.4f}  mean loss {rep.mean_loss:.4f}  (n={rep.n}, split={args.split})")
    return EXIT_OK


def cmd_export_schedule(args) -> int:
    cfg = OneCycleConfig(args.eta_max, args.iters, args.eta_min, args.warmup_frac, args.mom_max, args.mom_min)
    points = export_schedule(cfg)
    out = Path(args.out)
    _write(out / "schedule.csv", schedule_csv(points))
    its = [p.iter for p in points]
    _write(out / "schedule.svg", line_chart({"lr": (its, [p.lr for p in points])},
                                            "One-cycle learning rate", "iteration", "learning rate"))
    _write(out / "momentum.svg", line_chart({"momentum": (its, [p.momentum for p in points])},
                                            "One-cycle momentum", "iteration", "momentum"))
    print(f"peak lr {cfg.eta_max:g} at iter {cfg.boundary} of {cfg.total_iters}; floor {cfg.eta_min:g}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = gradcheck_suite(args.seed, args.eps)
    worst = max(results.values())
    for name, err in results.items():
        flag = "ok" if err < args.threshold else "FAIL"
        print(f"{name:<24} {err:.3e}  {flag}")
    print(f"max relative error {worst:.3e} (threshold {args.threshold:g})")
    return EXIT_OK if worst < args.threshold else EXIT_NUMERIC


COMMANDS = {
    "lr-find": cmd_lr_find,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-schedule": cmd_export_schedule,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_cap():
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"cycletrain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"cycletrain: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, ShapeError, OSError) as exc:
        print(f"cycletrain: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
