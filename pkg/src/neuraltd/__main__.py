"""Command line: ``python -m neuraltd <command> --config spec.toml``.

Exit status is 0 when every run and probe succeeded, 2 when some failed
(the rest are still written) and 1 on fatal errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from neuraltd.errors import ConfigurationError, DiagnosticsError, NumericError
from neuraltd.runner import ExperimentSpec, run_experiment

log = logging.getLogger("neuraltd")

COMMANDS = {
    "train": "one training run (first width, first seed unless --seed)",
    "sweep": "the spec as written: every width x seed, or its declared kind",
    "diagnose": "spectral and structural probes",
    "figure1": "training curves per width plus the sigma ratio table",
    "oracle": "exact Q tables and the projected fixed point",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuraltd", description="Neural TD / Q-learning laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON or TOML experiment spec")
        p.add_argument("--out", help="output directory (default: the spec's output field)")
        p.add_argument("--seed", type=int, help="replace the seed list with this single seed")
        p.add_argument("--threads", type=int, default=1, help="concurrent runs (default 1)")
    return parser


def _specialize(spec: ExperimentSpec, command, seed) -> ExperimentSpec:
    changes = {}
    sweep = dict(spec.sweep)
    if seed is not None:
        sweep["seeds"] = [seed]
    if command == "train":
        changes["kind"] = "sweep"
        sweep["widths"] = spec.widths[:1]
        sweep["seeds"] = sweep.get("seeds", spec.seeds)[:1]
    elif command != "sweep":
        changes["kind"] = command
    changes["sweep"] = sweep
    return dataclasses.replace(spec, **changes)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        log.error("--threads must be >= 1")
        return 1
    try:
        spec = _specialize(ExperimentSpec.load(args.config), args.command, args.seed)
        bundle = run_experiment(spec, args.out, args.threads)
    except (ConfigurationError, DiagnosticsError, NumericError, OSError, KeyError, TypeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    for failure in bundle.failures:
        log.warning("failed: %s", failure)
    log.info("wrote %s (%d runs, %d failures)", bundle.out_dir, len(bundle.run_csvs), len(bundle.failures))
    return 0 if bundle.ok else 2


if __name__ == "__main__":
    sys.exit(main())
