"""Command-line entry point: ``python -m dfkdlab <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 fixture-gate failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .pipeline import STAGES, ConfigError, GateError, Run, StageError, dump_config, load_config, run_lock

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_GATE = 0, 2, 3, 4
COMMANDS = STAGES[:-1] + ("ablate", "report", "pipeline")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dfkdlab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS, nargs="?", help="stage to run ('pipeline' runs all)")
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    parser.add_argument("--run-dir", help="run directory (overrides run.run_dir)")
    parser.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    parser.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    parser.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.run_dir is not None:
        overrides.append(f"run.run_dir={args.run_dir!r}".replace("'", '"'))
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if args.command is None:
        print("config error: a subcommand is required", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg)
    stages = STAGES if args.command == "pipeline" else (args.command,)
    try:
        with run_lock(run.dir):
            for stage in stages:
                ran = run.run_stage(stage, force=args.force)
                print(f"{stage}: {'done' if ran else 'up to date'}")
    except GateError as exc:
        print(f"fixture gate failed: {exc}", file=sys.stderr)
        return EXIT_GATE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # any other failure inside a stage
        logging.getLogger(__name__).debug("stage failure", exc_info=True)
        print(f"stage failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
