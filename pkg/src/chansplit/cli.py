"""Command-line entry point.

    chansplit run <scenario> [--config FILE] [--seed S ...] [--out DIR] [--format csv|json] [--set k=v ...]
    chansplit list-scenarios
    chansplit gradcheck
    chansplit synth --kind ar1 --length L --seed S --out file.csv

Failures exit nonzero and print one JSON line ``{"error": ..., "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from . import __version__
from .config import SCENARIOS, ConfigError, parse_config, parse_override


def _cmd_run(args) -> int:
    from .runners import emit_results, run

    overrides = dict(parse_override(s) for s in args.set or [])
    if args.seed:
        overrides["seeds"] = args.seed
    if args.out:
        overrides["out_dir"] = args.out
    if args.format:
        overrides["format"] = args.format
    cfg = parse_config(args.config, overrides, scenario=args.scenario)
    result = run(cfg)
    for path in emit_results(result, cfg.out_dir, cfg.format, cfg):
        print(path)
    return 0


def _cmd_list(args) -> int:
    from .runners import RUNNERS, SCENARIO_INFO

    for name in SCENARIOS:
        print(f"{name:14s} {RUNNERS[name].__name__:18s} {SCENARIO_INFO[name]}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:28s} rel_err={r.max_rel_error:.3e}  tol={r.tolerance:g}")
    failed = [r for r in results if not r.ok]
    if failed:
        _error("GradcheckFailed", f"{len(failed)} of {len(results)} checks exceeded tolerance")
        return 1
    return 0


def _cmd_synth(args) -> int:
    from .data import synth_series, write_series_csv

    write_series_csv(args.out, synth_series(args.kind, args.length, seed=args.seed), column=args.column)
    print(args.out)
    return 0


def _error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chansplit", description="Channel-aware split learning experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and sweep one scenario")
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--config", help="flat YAML config file")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable); replaces the seed list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("list-scenarios", help="list the scenarios and what each sweep shows")
    p.set_defaults(func=_cmd_list)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic series as CSV")
    p.add_argument("--kind", choices=("ar1", "sine_noise"), default="ar1")
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--column", default="value")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        _error("ConfigError", str(e))
    except (FileNotFoundError, PermissionError, IsADirectoryError) as e:
        _error("IOError", str(e))
    except OSError as e:
        _error("IOError", str(e))
    except ValueError as e:
        _error(type(e).__name__, str(e))
    return 2


if __name__ == "__main__":
    sys.exit(main())
