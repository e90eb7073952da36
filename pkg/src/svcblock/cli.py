"""Command-line driver.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import workflow
from .config import DEFAULTS, ConfigError, RunConfig
from .covariance import NotPositiveDefiniteError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

STEPS = {
    "simulate": workflow.cmd_simulate,
    "select": workflow.cmd_select,
    "fit": workflow.cmd_fit,
    "diagnose": workflow.cmd_diagnose,
    "predict": workflow.cmd_predict,
    "run": workflow.run_all,
}

HELP = {
    "simulate": "write synthetic plots, blowdowns and rasters from a known truth",
    "select": "backward predictor selection by LOO MSPE",
    "fit": "sample the posterior of each configured model",
    "diagnose": "DIC, WAIC and LOO cross-validation scores",
    "predict": "areal and block totals for every blowdown",
    "run": "simulate, select, fit, diagnose and predict in turn",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="svcblock", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in HELP.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="INI run configuration")
    cp = sub.add_parser("config", help="configuration utilities")
    cp.add_argument("action", choices=["print-defaults"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "config":
        sys.stdout.write(DEFAULTS)
        return EXIT_OK
    try:
        cfg = RunConfig.load(args.config)
        files = STEPS[args.command](cfg)
    except (NotPositiveDefiniteError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RuntimeError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
