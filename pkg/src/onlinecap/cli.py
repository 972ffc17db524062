"""Command line entry point: ``onlinecap run|ingest-run|report``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

import yaml

from .experiment import (PRESETS, ConfigError, IngestError, RunConfig, ingest_stream, report_from_raw,
                         run, write_raw_logs)
from .metrics import report_csv, report_json

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

log = logging.getLogger("onlinecap")


def _load(path: str, args) -> RunConfig:
    if path in PRESETS and not os.path.exists(path):
        raw = {"preset": path}
    else:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a mapping")
    for flag in ("seed", "reps", "jobs", "out", "stride"):
        v = getattr(args, flag, None)
        if v is not None:
            raw[flag] = v
    if getattr(args, "raw_logs", False):
        raw["raw_logs"] = True
    return RunConfig.from_dict(raw)


def _emit(result, out: Optional[str]) -> None:
    csv_text = report_csv(result.reports)
    if out is None:
        sys.stdout.write(csv_text)
        return
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.csv"), "w") as fh:
        fh.write(csv_text)
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report_json(result.reports))
    if result.raw:
        write_raw_logs(os.path.join(out, "raw_logs.csv"), result)
    log.info("wrote %s", out)


def cmd_run(args) -> int:
    cfg = _load(args.config, args)
    _emit(run(cfg), cfg.out)
    return EXIT_OK


def cmd_ingest_run(args) -> int:
    cfg = _load(args.config, args)
    data = ingest_stream(cfg)
    _emit(run(cfg, data_override=data), cfg.out)
    return EXIT_OK


def cmd_report(args) -> int:
    reports = report_from_raw(args.raw_logs, args.stride or 1)
    text = report_csv(reports)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.csv"), "w") as fh:
            fh.write(text)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            fh.write(report_json(reports))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="onlinecap",
                                description="Selective conformal prediction intervals on online streams.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML config file or the name of a preset")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--reps", type=int)
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--stride", type=int)
        sp.add_argument("--out", help="output directory (default: report CSV on stdout)")
        sp.add_argument("--raw-logs", action="store_true", help="also write per-step run logs")

    sp = sub.add_parser("run", help="simulate a scenario")
    common(sp)
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("ingest-run", help="run on streams read from CSV files")
    common(sp)
    sp.set_defaults(func=cmd_ingest_run)
    sp = sub.add_parser("report", help="rebuild the report from raw run logs")
    sp.add_argument("raw_logs")
    sp.add_argument("--stride", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    sub.add_parser("presets", help="list preset names").set_defaults(
        func=lambda a: print("\n".join(sorted(PRESETS))) or EXIT_OK)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
