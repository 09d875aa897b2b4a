"""Command line entry point.

    spikeskip sweep|search|rs|eval --config FILE [--seed N] [--out DIR]
    spikeskip report RUN_DIR [RUN_DIR ...] [--out DIR]

Exit status: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .harness.config import ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

COMMANDS = {
    "sweep": "sweep_nskip",
    "search": "bo_search",
    "rs": "random_search",
    "eval": "eval",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spikeskip", description="Skip-connection search for spiking networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, kind in COMMANDS.items():
        p = sub.add_parser(name, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out", default=None, help="override the output directory")
    p = sub.add_parser("report", help="compare finished search runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default=None, help="directory for report CSVs")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # Heavy imports stay here so that `--help` and config errors are fast.
    from .harness.experiments import run_experiment
    from .harness.report import emit_report, format_table

    try:
        if args.command == "report":
            result = emit_report(args.runs, args.out)
            print(format_table(result["table"]))
            return EXIT_OK
        cfg = load_config(args.config).with_overrides(args.seed, args.out, COMMANDS[args.command])
        art = run_experiment(cfg)
    except ConfigError as exc:
        print(f"spikeskip: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        logging.getLogger("spikeskip").debug("failure", exc_info=True)
        print(f"spikeskip: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for key, value in art.summary.items():
        print(f"{key}={value}")
    print(f"outputs in {art.directory}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
