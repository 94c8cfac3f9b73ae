"""Command line entry point.

    freqlab {solve,frequency,whitney,critical,verify,run} --config PATH [--out DIR] [--threads N] [--cache DIR]

Exit codes: 0 all hard checks pass, 1 a hard check failed, 2 usage or
configuration error, 3 numerical failure (solver did not converge).
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .grid import ResolutionError
from .pipeline import STAGES, run_stages, write_artifacts
from .solve import ConvergenceError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = {
    "solve": ("solve",),
    "frequency": ("frequency",),
    "whitney": ("whitney",),
    "critical": ("critical",),
    "verify": ("frequency", "whitney", "critical"),
    "run": STAGES,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="freqlab", description="Frequency-function laboratory for (2,q)-growth minimizers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "solve": "minimize the energy and write field.bin + field.json",
        "frequency": "radial frequency scan: frequency.csv + monotonicity.json",
        "whitney": "Whitney cube decomposition: whitney.json",
        "critical": "critical-set detection and box dimension: critical.json",
        "verify": "run every check on the cached (or freshly solved) field; report.json only",
        "run": "all stages and all artifacts",
    }
    for name in COMMANDS:
        s = sub.add_parser(name, help=helps[name])
        s.add_argument("--config", required=True, help="flat key = value config file")
        s.add_argument("--out", default=None, help="output directory (default: output.dir from the config)")
        s.add_argument("--threads", type=int, default=1, help="worker threads for the radial scan")
        s.add_argument("--cache", default=None, help="directory of solved fields keyed by config fingerprint")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("freqlab: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"freqlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.get("output.dir")
    stages = COMMANDS[args.command]
    try:
        solved, report, artifacts = run_stages(cfg, stages, cache_dir=args.cache, threads=args.threads)
    except ConvergenceError as exc:
        print(f"freqlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ResolutionError, ValueError) as exc:
        print(f"freqlab: error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "verify":
        artifacts = {}
    written = write_artifacts(out, artifacts, report)
    for c in report.checks:
        flag = "PASS" if c.passed else ("FAIL" if c.hard else "note")
        print(f"{flag:4s} {c.name}: {c.value}")
    for path in written:
        print(f"wrote {path}")
    if not report.passed:
        print(f"freqlab: hard checks failed: {', '.join(report.failures())}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
