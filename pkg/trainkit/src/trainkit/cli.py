"""Command-line interface: validate / finetune / merge."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from .exportcheck import validate_export
from .finetune import DEFAULT_FRAMEWORK, FinetuneParams, launch_finetune
from .merge import linear_merge

EXIT_OK = 0
EXIT_ERROR = 1


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trainkit",
        description="Validate training exports, prepare fine-tuning runs, "
                    "and merge checkpoints.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser(
        "validate", help="check a training JSONL file against the chat schema")
    p_validate.add_argument("jsonl", help="training JSONL file")

    p_finetune = sub.add_parser(
        "finetune", help="validate an export and prepare a fine-tuning run")
    p_finetune.add_argument("jsonl", help="training JSONL file")
    p_finetune.add_argument("--base", required=True, metavar="MODEL",
                            help="base model identifier")
    p_finetune.add_argument("--epochs", type=int, default=None)
    p_finetune.add_argument("--batch", type=int, default=None,
                            help="batch size")
    p_finetune.add_argument("--lr", type=float, nargs="+", default=None,
                            metavar=("START", "END"),
                            help="learning-rate sweep endpoints (one or two "
                                 "values)")
    p_finetune.add_argument("--framework", default=DEFAULT_FRAMEWORK,
                            help=f"training framework module "
                                 f"(default: {DEFAULT_FRAMEWORK})")
    p_finetune.add_argument("--out", default=None, metavar="DIR",
                            help="run directory (default: next to the JSONL)")

    p_merge = sub.add_parser(
        "merge", help="linearly merge two safetensors checkpoints")
    p_merge.add_argument("checkpoint_a")
    p_merge.add_argument("checkpoint_b")
    p_merge.add_argument("--weights", type=float, nargs=2, default=(1.0, 1.0),
                         metavar=("WA", "WB"))
    p_merge.add_argument("--insert-manifest", default=None, metavar="JSON",
                         help="JSON map of tensor name -> shape for layers "
                              "that may be missing from one checkpoint")
    p_merge.add_argument("-o", "--out", default="merged.safetensors",
                         help="output checkpoint path "
                              "(default: merged.safetensors)")
    return parser


def _cmd_validate(args: argparse.Namespace) -> int:
    report = validate_export(args.jsonl)
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


def _cmd_finetune(args: argparse.Namespace) -> int:
    if args.lr is not None and len(args.lr) > 2:
        raise ValueError("--lr takes one or two values")
    defaults = FinetuneParams()
    lr_start, lr_end = defaults.lr_start, defaults.lr_end
    if args.lr:
        lr_start = args.lr[0]
        lr_end = args.lr[1] if len(args.lr) == 2 else args.lr[0]
    params = FinetuneParams(
        epochs=defaults.epochs if args.epochs is None else args.epochs,
        batch_size=defaults.batch_size if args.batch is None else args.batch,
        lr_start=lr_start,
        lr_end=lr_end,
    )
    handle = launch_finetune(
        args.jsonl, args.base, params,
        out_dir=args.out, framework=args.framework,
    )
    print(f"prepared fine-tuning run at {handle.run_dir}")
    print(f"manifest: {handle.manifest_path}")
    return EXIT_OK


def _cmd_merge(args: argparse.Namespace) -> int:
    summary = linear_merge(
        args.checkpoint_a,
        args.checkpoint_b,
        args.out,
        weights=(args.weights[0], args.weights[1]),
        insert_manifest=args.insert_manifest,
    )
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    handlers = {
        "validate": _cmd_validate,
        "finetune": _cmd_finetune,
        "merge": _cmd_merge,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, OSError) as exc:
        # ValueError covers SchemaError / ShapeMismatch / FormatError,
        # OSError covers EnvironmentError and missing files.
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
