"""Command line entry point: ``robustseg <subcommand> ...``.

Every subcommand prints one JSON summary line on success. Failures print a
single JSON line ``{"error": code, "message": ..., "path": ...}`` on stderr
and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from ..attack import ATTACK_KINDS
from .config import ExperimentConfig, StageError, parse_eps
from . import report, stages

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_PARTIAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise StageError("usage", f"{self.prog}: {message}")


def _magnitude(text: str):
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robustseg", description="Cross-prompt attack and singular-value defense on a toy segmenter.")
    p.add_argument("--config", help="experiment config JSON supplying defaults")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("pretrain", help="train the toy segmenter on the train split")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--paper-mirror-neck", action="store_true")

    a = sub.add_parser("attack", help="run cpa, ppa or bpa on a split")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--kind", required=True, choices=ATTACK_KINDS)
    a.add_argument("--eps", required=True, help="budget, e.g. 16/255")
    a.add_argument("--steps", type=int)
    a.add_argument("--k", type=int)
    a.add_argument("--alpha", help="step size, e.g. 2/255 (capped at eps)")
    a.add_argument("--importance", choices=("miou_drop", "logit_norm"))
    a.add_argument("--split", default="val", choices=("train", "val"))
    a.add_argument("--seed", type=int, help="random-start seed (default: dataset seed)")
    a.add_argument("--out", required=True)

    d = sub.add_parser("defend", help="train singular values on CPA examples")
    d.add_argument("--model", required=True)
    d.add_argument("--adv", required=True)
    d.add_argument("--epochs", type=int)
    d.add_argument("--lr", type=float)
    d.add_argument("--magnitude", type=_magnitude, help="defense target magnitude c, or 'auto'")
    d.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="mIoU against ground truth, optionally on adversarial inputs")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--adv")
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument("--out", help="directory for eval.json and outcomes.csv")

    r = sub.add_parser("report", help="results table and ASR series from outcome files")
    r.add_argument("--in", dest="in_dir", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--split", default="val", choices=("train", "val"))
    r.add_argument("--no-plot", action="store_true")
    return p


def _log(line: str) -> None:
    print(line, file=sys.stderr, flush=True)


def dispatch(args) -> tuple[dict, int]:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cmd = args.command
    if cmd == "gen-data":
        return stages.gen_data(args.seed, args.n, args.out, cfg.data), 0
    if cmd == "pretrain":
        pc = cfg.pretrain
        if args.epochs is not None:
            pc = replace(pc, epochs=args.epochs)
        if args.lr is not None:
            pc = replace(pc, lr=args.lr)
        mc = replace(cfg.model, paper_mirror_neck=True) if args.paper_mirror_neck else cfg.model
        return stages.pretrain_stage(args.data, args.out, pc, mc, _log), 0
    if cmd == "attack":
        ac = replace(cfg.attack, epsilon=parse_eps(args.eps))
        if args.steps is not None:
            ac = replace(ac, steps=args.steps)
        if args.k is not None:
            ac = replace(ac, k=args.k)
        if args.importance:
            ac = replace(ac, importance=args.importance)
        alpha = parse_eps(args.alpha) if args.alpha else ac.alpha
        ac = replace(ac, alpha=min(alpha, ac.epsilon))
        return stages.attack_stage(args.model, args.data, args.kind, ac, args.out, args.split, args.seed), 0
    if cmd == "defend":
        dc = cfg.defense
        for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("magnitude", "magnitude")):
            if getattr(args, flag) is not None:
                dc = replace(dc, **{key: getattr(args, flag)})
        return stages.defend_stage(args.model, args.adv, args.out, dc, _log), 0
    if cmd == "eval":
        return stages.eval_stage(args.model, args.data, args.adv, args.split, args.out), 0
    if cmd == "report":
        table = report.emit_report(args.in_dir, args.out, plot=not args.no_plot, split=args.split)
        for w in table.warnings:
            _log(json.dumps({"warning": "non_monotone", "message": w}))
        status = 0
        if table.missing:
            _log(json.dumps({"warning": "partial_cells", "missing": [list(m) for m in table.missing]}))
            status = EXIT_PARTIAL
        return {"stage": "report", "out": args.out, "rows": len(table.rows), "missing": len(table.missing),
                "warnings": len(table.warnings)}, status
    raise StageError("usage", f"unknown command {cmd!r}")


def run_command(argv) -> int:
    """Run one subcommand; returns its exit status."""
    try:
        args = build_parser().parse_args(list(argv))
        summary, status = dispatch(args)
    except StageError as exc:
        print(json.dumps(exc.record(), sort_keys=True), file=sys.stderr)
        return EXIT_USAGE if exc.code == "usage" else EXIT_ERROR
    except (FileNotFoundError, ValueError, FloatingPointError) as exc:
        rec = {"error": type(exc).__name__, "message": " ".join(str(exc).split())}
        if getattr(exc, "filename", None):
            rec["path"] = str(exc.filename)
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(summary, sort_keys=True))
    return status


def main(argv=None) -> None:
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))
