"""Command-line entry point: ``fairdistill <command> --config run.yaml --out runs/x``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .exceptions import ConfigError, FairDistillError, ManifestMismatch
from .pipeline import SWEEP_AXES, cmd_pipeline, cmd_report, cmd_sweep, format_table, load_config, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

STAGE_COMMANDS = {"train-teacher": "teacher", "distill": "distill", "generate": "generate", "evaluate": "evaluate"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_args(p, needs_out=True):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", required=needs_out, help="run directory")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--resume", action="store_true", help="reuse valid artifacts in --out")

    run_args(sub.add_parser("pipeline", help="run every stage"))
    for name in STAGE_COMMANDS:
        run_args(sub.add_parser(name, help=f"run stages up to {name}"))
    sw = sub.add_parser("sweep", help="one pipeline per value of a config axis")
    run_args(sw)
    sw.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sw.add_argument("--values", nargs="+", default=None, help="override the axis values")
    rp = sub.add_parser("report", help="merge run directories into one table")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("--out", default=None)
    return parser


def _sweep_values(axis, values):
    if values is None or axis == "loss-kind":
        return values
    try:
        return [float(v) for v in values]
    except ValueError:
        raise ConfigError(f"sweep values for {axis} must be numbers") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            table = cmd_report(args.runs, args.out)
            print(format_table(table))
            return EXIT_OK
        cfg = load_config(args.config, args.seed)
        if args.command == "pipeline":
            manifest = cmd_pipeline(cfg, args.out, resume=args.resume)
            print(json.dumps(manifest["timings_ms"], indent=2, sort_keys=True))
        elif args.command == "sweep":
            rows = cmd_sweep(cfg, args.out, args.axis, _sweep_values(args.axis, args.values), resume=args.resume)
            failed = [r for r in rows if r["status"] != "ok"]
            print(f"{len(rows) - len(failed)}/{len(rows)} sweep cells succeeded")
        else:
            until = STAGE_COMMANDS[args.command]
            run_stage(cfg, args.out, until, resume=args.resume)
    except (ConfigError, ManifestMismatch) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FairDistillError as e:
        print(f"stage failed: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
