"""Command-line entry point: ``fbsde-gauss {check,solve,simulate,bounds,verify}``.

Exit codes: 0 pass, 1 runtime error, 2 a density/tail/Malliavin check failed,
3 the structural assumptions failed.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

from . import __version__
from ._kernels import backend_name
from .pipeline import ConfigError, Pipeline, canonical_json, config_hash, load_config

log = logging.getLogger("fbsde_gauss")

EXIT_OK, EXIT_RUNTIME, EXIT_CHECK, EXIT_ASSUMPTION = 0, 1, 2, 3


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def cmd_check(pipe, out, args):
    rep = pipe.report(args.mode)
    text = rep.to_json() + "\n"
    _write(out / f"assumptions_{args.mode}.json", text)
    sys.stdout.write(text)
    return EXIT_OK if rep.passed else EXIT_ASSUMPTION


def cmd_solve(pipe, out, args):
    pipe.solution.to_csv(out / "solution.csv")
    pipe.write_curves_csv(out / "curves.csv")
    _write(out / "constants.json", canonical_json(pipe.constants_summary()))
    return EXIT_OK if pipe.report("X").passed else EXIT_ASSUMPTION


def cmd_simulate(pipe, out, args):
    pipe.paths.to_csv(out / "paths_summary.csv", out / "terminal.csv")
    return EXIT_OK


def cmd_bounds(pipe, out, args):
    rows = pipe.bounds_rows()
    with open(out / "bounds.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = ["component", "t", "lower_name", "lower", "upper_name", "upper", "status"]
        w.writerow(keys)
        for r in rows:
            w.writerow([_csv_value(r[k]) for k in keys])
    _write(out / "constants.json", canonical_json(pipe.constants_summary()))
    return EXIT_OK


def cmd_verify(pipe, out, args):
    report = pipe.verify(out_dir=out)
    _write(out / "report.json", canonical_json(report))
    for mode in ("X", "Y", "Z"):
        _write(out / f"assumptions_{mode}.json", pipe.report(mode).to_json() + "\n")
    if report["exit_code"] != EXIT_ASSUMPTION:
        pipe.paths.to_csv(out / "paths_summary.csv")
    log.info("verdict: %s", report["verdict"])
    return report["exit_code"]


COMMANDS = {"check": cmd_check, "solve": cmd_solve, "simulate": cmd_simulate,
            "bounds": cmd_bounds, "verify": cmd_verify}


def build_parser():
    p = argparse.ArgumentParser(prog="fbsde-gauss", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path, help="YAML run configuration")
        sp.add_argument("--out", type=Path, default=None,
                        help="output directory (default: the config's 'output' field)")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads; results do not depend on it")
        sp.add_argument("--seed", type=int, default=None, help="override mc.seed")
        sp.add_argument("--no-cache", action="store_true", help="do not read or write the cache")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "check":
            sp.add_argument("--mode", choices=("X", "Y", "Z"), default="X")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.time()
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    try:
        cfg = load_config(args.config, seed=args.seed)
    except ConfigError as exc:
        for pointer, msg in exc.errors:
            print(f"config error at {pointer or '/'}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out if args.out is not None else cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "resolved_config.json", canonical_json(cfg))
    pipe = Pipeline(cfg, threads=args.threads, use_cache=not args.no_cache)
    try:
        code = COMMANDS[args.command](pipe, out, args)
    except Exception as exc:  # noqa: BLE001 (every runtime failure maps to exit 1)
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    meta = {
        "command": args.command, "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "elapsed_seconds": round(time.time() - start, 3), "exit_code": code,
        "threads": args.threads, "backend": backend_name(), "version": __version__,
        "python": platform.python_version(), "config_path": str(args.config),
        "config_hash": config_hash(cfg), "out_dir": str(out),
        "cache_dir": str(pipe.cache_dir), "cache": pipe.cache_events,
    }
    _write(out / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
