"""Command-line entry point.

Everything an experiment needs lives in one JSON run-spec file; flags only
carry paths, parallelism and verbosity. Exit codes: 0 success, 2 run-spec
problems, 3 data-file problems, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import DataFileError, NumericError, SpecError
from .pipeline import (cmd_gen, cmd_plot, cmd_run_reference, cmd_run_target,
                       cmd_sweep, load_run_spec)

EXIT_OK = 0
EXIT_SPEC = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("calib_il")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calib-il",
        description=(
            "Memoryless class-incremental learning workbench with "
            "transferable prediction-bias correction."),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "gen": "generate the reference and target datasets",
        "run-reference": "train references and fit their calibration tables",
        "run-target": "train targets and compare raw/bic/adbic/oracle",
        "sweep": "ablation over reference count plus halved-data protocol",
        "plot": "render SVG charts from the metrics CSVs",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--spec", required=(name != "plot"),
                       help="JSON run-spec file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel worker processes (default 1)")
        p.add_argument("--verbose", action="store_true",
                       help="debug-level logging")
    return parser


def _seed_override() -> int | None:
    raw = os.environ.get("CALIB_IL_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise SpecError(f"CALIB_IL_SEED must be an integer, got {raw!r}") from None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(message)s",
        stream=sys.stdout,
    )
    try:
        if args.jobs < 1:
            raise SpecError("--jobs must be >= 1")
        spec = None
        if args.spec is not None:
            spec = load_run_spec(args.spec, seed_override=_seed_override())
        if args.command == "gen":
            cmd_gen(spec, args.out)
        elif args.command == "run-reference":
            cmd_run_reference(spec, args.out, jobs=args.jobs)
        elif args.command == "run-target":
            cmd_run_target(spec, args.out, jobs=args.jobs)
        elif args.command == "sweep":
            cmd_sweep(spec, args.out, jobs=args.jobs)
        elif args.command == "plot":
            cmd_plot(spec, args.out)
    except SpecError as exc:
        log.error(kv_error("spec", exc))
        return EXIT_SPEC
    except DataFileError as exc:
        log.error(kv_error("data", exc))
        return EXIT_DATA
    except NumericError as exc:
        log.error(kv_error("numeric", exc))
        return EXIT_NUMERIC
    log.info("event=done command=%s" % args.command)
    return EXIT_OK


def kv_error(kind: str, exc: Exception) -> str:
    return f"event=error kind={kind} message={str(exc)!r}"


if __name__ == "__main__":
    sys.exit(main())
