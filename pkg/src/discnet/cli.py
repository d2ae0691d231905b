"""Command-line entry point: ``discnet {fit,simulate,preprocess}``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .exceptions import DataValidationError, NumericalError
from .pipeline import command_fit, command_preprocess, command_simulate, load_config

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="discnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="select, refit and pool over imputation CSVs")
    p.add_argument("--data", required=True, help="directory of imputation CSVs (or one CSV)")
    p.add_argument("--config", help="YAML analysis config")
    p.add_argument("--out", required=True, help="JSON report path")

    p = sub.add_parser("simulate", help="run a benchmark scenario")
    p.add_argument("--scenario", required=True, help="YAML scenario config")
    p.add_argument("--replicates", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("preprocess", help="transform covariates of one CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="YAML analysis config")
    p.add_argument("--out", required=True, help="transformed CSV path")
    p.add_argument("--report", help="JSON transform report path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fit":
            command_fit(args.data, load_config(args.config), args.out)
        elif args.command == "simulate":
            _, summary = command_simulate(args.scenario, args.replicates, args.seed, args.out)
            if summary.get("failures"):
                print(f"{summary['failures']} replicate(s) failed", file=sys.stderr)
        else:
            command_preprocess(args.data, load_config(args.config), args.out, args.report)
    except DataValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
