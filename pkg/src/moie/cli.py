"""Command-line entry point: ``moie <command> [--config PATH] [--seed N] [--out DIR] [--quiet]``.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure.
Errors print a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as config_mod
from .errors import InputError, MoieError
from .pipeline import COMMANDS, run_command


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moie", description="Carve a blackbox classifier into "
                                "interpretable experts and analyse the result.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="run configuration (JSON); defaults when omitted")
    p.add_argument("--seed", type=int, help="override the configuration seed")
    p.add_argument("--out", default="run", help="output directory (default: ./run)")
    p.add_argument("--quiet", action="store_true", help="only print errors")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config) if args.config else config_mod.default()
        if args.seed is not None:
            if args.seed < 0:
                raise InputError("seed: must be a non-negative integer")
            cfg.seed = args.seed
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        path = run_command(cfg, args.command, args.out, args.quiet)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MoieError, OSError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort one-line cause
        logging.getLogger(__name__).debug("unexpected failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    if not args.quiet:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
