"""Command line entry point.

    jumphom run <config.yaml> [--seed N] [--output DIR] [--workers N]
    jumphom validate <config.yaml>
    jumphom report <run_dir>

Exit codes: 0 success, 1 validation/configuration failure, 2 numerical
failure, 3 I/O failure.  The default output root is the
``JUMPHOM_OUTPUT_ROOT`` environment variable, falling back to ``./runs``.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import ExperimentConfig
from .errors import ConfigurationError, JumphomError, NumericalError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jumphom",
        description="effective-model experiments for periodic jump kernels in random time",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="path to the YAML config")
    p_run.add_argument("--seed", type=int, default=None, help="override the master seed")
    p_run.add_argument("--output", default=None, help="output root directory")
    p_run.add_argument(
        "--workers",
        type=int,
        default=1,
        help="worker pool bound (replica jobs are independent; results are "
        "reduced in replica order either way)",
    )

    p_val = sub.add_parser("validate", help="validate a config without running")
    p_val.add_argument("config", help="path to the YAML config")

    p_rep = sub.add_parser("report", help="render report.csv and figures for a run")
    p_rep.add_argument("run_dir", help="artifact directory of a finished run")
    return parser


def _output_root(arg_value) -> str:
    if arg_value:
        return arg_value
    return os.environ.get("JUMPHOM_OUTPUT_ROOT", "runs")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            config = ExperimentConfig.load(args.config)
            issues = config.validate()
            if issues:
                for issue in issues:
                    print(f"INVALID {args.config}: {issue}", file=sys.stderr)
                return EXIT_VALIDATION
            print(f"OK {args.config}: kind={config.kind} seed={config.seed}")
            return EXIT_OK
        if args.command == "run":
            from .runner import run_experiment

            config = ExperimentConfig.load(args.config, seed_override=args.seed)
            out_dir = run_experiment(config, _output_root(args.output))
            print(f"wrote {out_dir}")
            return EXIT_OK
        if args.command == "report":
            from .report import render_report

            written = render_report(args.run_dir)
            for path in written:
                print(f"wrote {path}")
            return EXIT_OK
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except JumphomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
