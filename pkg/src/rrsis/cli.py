"""Command line entry point: ``synth``, ``train``, ``eval``, ``gradcheck``, ``ablate``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, apply_mode
from .data import DatasetError, SynthesisError, read_dataset, synth_dataset, write_dataset
from .gradcheck import format_results, run_gradcheck
from .training import (CheckpointError, TrainingError, ablate, evaluate_model, load_checkpoint,
                       model_from_checkpoint, train)

log = logging.getLogger("rrsis")

EXPECTED_ERRORS = (ConfigError, DatasetError, SynthesisError, CheckpointError, TrainingError,
                   OSError, ValueError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors share the generic failure code
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, args.set or ())


def cmd_synth(args) -> int:
    cfg = _config(args)
    samples = synth_dataset(args.n, args.seed, cfg.synth_config())
    manifest = write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples (seeds {args.seed}..{args.seed + args.n - 1}) to {manifest.parent}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    samples = read_dataset(args.data)
    model, records = train(cfg, samples, args.out, resume=args.resume)
    report = evaluate_model(model, samples, args.out)
    last = records[-1] if records else None
    if last:
        print(f"step {last['step']}: total {last['total']:.6f}")
    print(report.table())
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_text(ckpt["config"]).with_overrides(args.set or ())
    apply_mode(cfg)
    model, _ = model_from_checkpoint(ckpt, cfg)
    samples = read_dataset(args.data)
    out = args.out or Path(args.checkpoint).parent / "eval"
    report = evaluate_model(model, samples, out, args.overlay)
    print(report.table())
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    dtype = torch.float32 if args.float32 else torch.float64
    torch.set_num_threads(1)
    results = run_gradcheck(cfg, dtype=dtype, seed=args.seed, n_dirs=args.dirs, modules=args.module)
    print(format_results(results, args.tolerance))
    failed = [r.module for r in results if r.max_error > args.tolerance]
    if failed:
        print(f"gradcheck failed (tolerance {args.tolerance:g}): {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    samples = read_dataset(args.data)
    out = args.out or Path("ablation")
    results = ablate(cfg, samples, out)
    print((Path(out) / "ablation.txt").read_text(), end="")
    return 0 if all(r["status"] == "ok" for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rrsis", description="Desk-scale referring remote-sensing segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and score it on its training data")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report directory (default: <checkpoint dir>/eval)")
    p.add_argument("--overlay", help="write prediction overlays to this directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of every module")
    common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--float32", action="store_true", help="check float32 analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dirs", type=int, default=2, help="random directions per tensor")
    p.add_argument("--module", action="append", help="restrict to a module (repeatable)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the ablation matrix")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
