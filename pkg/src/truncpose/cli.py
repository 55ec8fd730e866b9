"""Command-line front door.

Commands: generate, pipeline, ablate-confidence, eval, stats. Each is
driven by a run-config file (defaults apply when omitted) and writes
into the run directory. Exit codes: 0 success, 2 config error, 3 I/O
error, 4 empty confident set, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys

from .config import RunConfig, load_config
from .errors import ConfigError, EmptyConfidentSet, IoError, TruncposeError
from .pipeline import (
    cmd_ablate_confidence,
    cmd_eval,
    cmd_generate,
    cmd_pipeline,
    cmd_stats,
)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_EMPTY_CONFIDENT = 4

_COMMANDS = {
    "generate": cmd_generate,
    "pipeline": cmd_pipeline,
    "ablate-confidence": cmd_ablate_confidence,
    "eval": cmd_eval,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="truncpose",
        description="Self-training pipeline for truncation-aware pose regression",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", metavar="PATH", default=None,
                       help="run-config file (defaults used when omitted)")
        p.add_argument("--out", metavar="DIR", default=None,
                       help="run directory (default: config output dir)")
        p.add_argument("--seed", metavar="N", type=int, default=None,
                       help="override the master seed")
        p.add_argument("--rounds", metavar="N", type=int, default=None,
                       help="override the self-training round count")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.rounds is not None:
        cfg.rounds = args.rounds
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        _COMMANDS[args.command](cfg, cfg.out_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except IoError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except EmptyConfidentSet as e:
        print(f"empty confident set: {e}", file=sys.stderr)
        return EXIT_EMPTY_CONFIDENT
    except TruncposeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
