"""Command-line entry point: ``tlra {synth,train,eval,gradcheck,export-sim}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .data import BundleParseError, InvalidPatternError, SchemaError, load_bundle, save_bundle, synth_generate
from .harness import evaluate_patterns, export_similarity, gradcheck_total_loss, parse_patterns
from .model import Stage
from .trainer import CheckpointError, TrainerConfig, TrainingDiverged, run_training

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _floats(text: str, n: int, cast=float) -> tuple:
    vals = [cast(v) for v in text.split(",")]
    if len(vals) == 1:
        vals = vals * n
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected 1 or {n} comma-separated values")
    return tuple(vals)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tlra", description="Two-level reference alignment on multimodal feature bundles.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic feature bundle")
    p.add_argument("--n", type=int, default=1400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="16,12,12", help="d_l,d_a,d_v")
    p.add_argument("--seq-lens", default="8,8,8", help="T_l,T_a,T_v")
    p.add_argument("--noise", default="0.5", help="one value or three comma-separated values")
    p.add_argument("--splits", default=None, help="train,valid,test counts (default 70/15/15 percent)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON file with TrainerConfig fields")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs/tlra")

    p = sub.add_parser("eval", help="per-pattern ACC/F1 on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patterns", default=None, help='comma list such as "L,AV,AVL"; default all seven')
    p.add_argument("--csv", action="store_true", help="print CSV instead of a table")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-sim", help="prototype similarity matrix of 10+10 test samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _cmd_synth(args) -> int:
    dims = _floats(args.dims, 3, int)
    lens = _floats(args.seq_lens, 3, int)
    noise = _floats(args.noise, 3)
    splits = _floats(args.splits, 3, int) if args.splits else None
    bundle = synth_generate(args.n, dims, lens, noise, args.seed, split_counts=splits)
    save_bundle(bundle, args.out)
    print(f"wrote {len(bundle)} records to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = TrainerConfig()
    if args.config:
        config = TrainerConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
    bundle = load_bundle(args.data)
    t0 = time.time()
    res = run_training(bundle, config, args.out)
    print(f"best valid ACC {max(res.valid_acc):.4f} ({time.time() - t0:.1f}s)")
    print(f"checkpoints: {res.best_path} {res.final_path}")
    print(f"log: {res.log_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    patterns = parse_patterns(args.patterns)
    report = evaluate_patterns(args.checkpoint, load_bundle(args.data), patterns)
    print(report.to_csv() if args.csv else report.to_table())
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    worst = 0.0
    for stage in (Stage.STAGE1, Stage.STAGE2):
        for pg in (False, True):
            err = gradcheck_total_loss(args.seed, stage, prototype_grads=pg)
            print(f"stage {int(stage)} prototype_grads={pg}: max relative error {err:.3e}")
            worst = max(worst, err)
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_INVALID


def _cmd_export_sim(args) -> int:
    mat = export_similarity(args.checkpoint, load_bundle(args.data), args.seed, args.out)
    print(f"wrote {len(mat.ids)} rows to {args.out}; mean own-class similarity {mat.own_class_similarity():.4f}")
    return EXIT_OK


COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "export-sim": _cmd_export_sim,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (BundleParseError, SchemaError, InvalidPatternError, CheckpointError, TrainingDiverged,
            ValueError, KeyError, json.JSONDecodeError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
