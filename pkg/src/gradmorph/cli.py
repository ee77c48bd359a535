"""``gradmorph <command> --config <path> [--set k=v]... --out <dir>``

Exit codes: 0 success, 1 contract violation (bad config, bad data), 2 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import dump_config, load_config
from .pipeline import COMMANDS, run_command
from .tensor_core import ContractViolation

log = logging.getLogger("gradmorph")

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradmorph",
                                     description="Gradient-perturbation segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS + ("show-config",):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="YAML config (defaults if omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set perturb.gamma=0.1")
        if name != "show-config":
            p.add_argument("--out", type=Path, required=True, help="artifact directory")
        if name in ("perturb", "infer", "evaluate", "end2end-baseline"):
            p.add_argument("--split", choices=("train", "test"),
                           default="train" if name == "perturb" else "test")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "show-config":
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        manifest = run_command(args.command, cfg, args.out, getattr(args, "split", None))
        log.info("wrote %s", manifest)
        return EXIT_OK
    except ContractViolation as exc:
        print(f"gradmorph: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"gradmorph: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
