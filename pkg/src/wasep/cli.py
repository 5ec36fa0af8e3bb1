"""Command-line entry point: ``wasep <subcommand> [--config FILE] [--key=value ...]``.

Exit codes: 0 success, 2 rejected configuration or input, 3 a check of
the experiment failed (or a downstream invariant was violated).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .experiments import DEFAULTS, ExperimentConfig, ValidationError, apply_overrides, run_experiment

__all__ = ["main", "SUBCOMMANDS", "EXIT_OK", "EXIT_VALIDATION", "EXIT_ACCEPTANCE"]

EXIT_OK, EXIT_VALIDATION, EXIT_ACCEPTANCE = 0, 2, 3

SUBCOMMANDS = {
    "simulate": "simulate",
    "hydro": "hydro",
    "hydro-limit": "hydro_limit",
    "hydrostatics": "hydrostatics",
    "action": "action",
    "duality": "duality",
    "periodic": "periodic",
    "contraction": "contraction",
    "couple": "coupling",
    "martingale": "martingale",
    "phase-scan": "phase_scan",
    "continuity": "continuity",
}

log = logging.getLogger("wasep")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wasep", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"wasep {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kind in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {kind} experiment",
                           description=f"Run the {kind} experiment.  Unrecognised "
                                       "--key=value options override configuration entries.")
        p.add_argument("--config", type=Path, help="JSON configuration document")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--print-config", action="store_true",
                       help="print the resolved configuration and exit")
    r = sub.add_parser("report", help="summarise run directories")
    r.add_argument("runs", nargs="+", type=Path)
    r.add_argument("--gnuplot", action="store_true",
                   help="write whitespace-separated .dat copies of every CSV table")
    d = sub.add_parser("defaults", help="print the default configuration of an experiment")
    d.add_argument("kind", choices=sorted(DEFAULTS))
    return parser


def _resolve(args, extra) -> ExperimentConfig:
    kind = SUBCOMMANDS[args.command]
    doc = {}
    if args.config is not None:
        with open(args.config) as fh:
            doc = json.load(fh)
        if doc.setdefault("kind", kind) != kind:
            raise ValidationError(f"configuration is for {doc['kind']!r}, not {kind!r}")
    doc["kind"] = kind
    doc = apply_overrides(doc, extra)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["output"] = str(args.out)
    return ExperimentConfig.from_dict(doc)


def _csv_to_dat(path: Path) -> Path:
    target = path.with_suffix(".dat")
    with open(path, newline="") as fh, open(target, "w") as out:
        rows = list(csv.reader(fh))
        if rows:
            out.write("# " + " ".join(rows[0]) + "\n")
            for row in rows[1:]:
                out.write(" ".join(v if v != "" else "nan" for v in row) + "\n")
    return target


def _report(args) -> int:
    status = EXIT_OK
    for run in args.runs:
        path = run / "report.json" if run.is_dir() else run
        try:
            with open(path) as fh:
                rep = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"{run}: unreadable report ({exc})", file=sys.stderr)
            status = max(status, EXIT_VALIDATION)
            continue
        verdict = "PASS" if rep.get("passed") else "FAIL"
        checks = ", ".join(f"{k}={'ok' if v else 'FAILED'}" for k, v in rep.get("checks", {}).items())
        print(f"{verdict} {rep.get('kind')} [{run}] {checks}")
        if not rep.get("passed"):
            status = EXIT_ACCEPTANCE
        if args.gnuplot and run.is_dir():
            for table in sorted(run.glob("*.csv")):
                print(f"  wrote {_csv_to_dat(table)}")
    return status


def main(argv=None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        if extra:
            parser.error(f"unrecognised arguments: {' '.join(extra)}")
        return _report(args)
    if args.command == "defaults":
        print(json.dumps({"kind": args.kind, **DEFAULTS[args.kind]}, indent=2))
        return EXIT_OK
    bad = [e for e in extra if not (e.startswith("--") and "=" in e)]
    if bad:
        parser.error(f"unrecognised arguments: {' '.join(bad)}")
    try:
        cfg = _resolve(args, extra)
        if args.print_config:
            print(json.dumps(cfg.to_dict(), indent=2))
            return EXIT_OK
        report = run_experiment(cfg)
    except (ValidationError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RuntimeError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    summary = {"kind": report.kind, "passed": report.passed, "checks": report.checks,
               "wall_clock": round(report.manifest.wall_clock, 3)}
    print(json.dumps(summary, indent=2))
    return EXIT_OK if report.passed else EXIT_ACCEPTANCE


if __name__ == "__main__":
    sys.exit(main())
