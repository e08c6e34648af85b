"""Command line entry point: ``ppdelab <kind> --config cfg.json [--out dir] [--seed n] [--threads n]``."""

from __future__ import annotations

import argparse
import json
import os
import sys

from ppdelab.errors import ConfigError
from ppdelab.experiments import KINDS, ExperimentConfig, report_json, run, validate

EXIT_PASS, EXIT_FAIL, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppdelab", description="Path-dependent FBSDE / PPDE experiments.")
    ap.add_argument("kind", choices=KINDS)
    ap.add_argument("--config", help="JSON config file (kind in the file must match, or be omitted)")
    ap.add_argument("--out", help="directory for report.json and CSV tables")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--threads", type=int, help="worker threads for nested solves")
    return ap


def _load(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", ["<root>: not an object"])
    if doc.get("kind", args.kind) != args.kind:
        raise ConfigError("invalid configuration", [f"kind: config says {doc['kind']!r}, command is {args.kind!r}"])
    doc["kind"] = args.kind
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.threads is not None:
        doc["threads"] = args.threads
    cfg = ExperimentConfig.from_dict(doc)
    diags = validate(cfg)
    if diags:
        raise ConfigError("invalid configuration", diags)
    return cfg


def _invalid(exc) -> int:
    print(f"error: {exc}", file=sys.stderr)
    for d in getattr(exc, "diagnostics", None) or []:
        print(f"  {d}", file=sys.stderr)
    return EXIT_INVALID


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except (ConfigError, ValueError, OSError, TypeError) as exc:
        return _invalid(exc)
    try:
        if args.out:
            os.makedirs(args.out, exist_ok=True)
        report = run(cfg, args.out)
    except ConfigError as exc:
        return _invalid(exc)
    except Exception as exc:  # module diagnostics surface as runtime errors
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    text = report_json(report)
    if args.out:
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_FAIL if report["body"]["passed"] is False else EXIT_PASS


if __name__ == "__main__":
    sys.exit(main())
