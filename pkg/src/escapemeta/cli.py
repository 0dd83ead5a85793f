"""``escapemeta`` command line.

Every subcommand reads one config file, writes its outputs and a manifest
into the output directory and exits with 0 iff all assertions listed in the
config's ``[acceptance]`` section pass.
"""
from __future__ import annotations

import argparse
import sys
import time

from .config import ConfigError, load_config

COMMANDS = ("escape", "qk", "metastable", "mc", "dump-operator", "validate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="escapemeta", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, metavar="PATH")
        if name != "validate":
            s.add_argument("--jobs", type=int, default=1, metavar="K", help="worker processes (default 1)")
            s.add_argument("--seed", type=int, default=None, metavar="S", help="override the [mc] seed")
            s.add_argument("--out", default=None, metavar="DIR", help="override the output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "validate":
        print(f"{args.config}: ok ({cfg.kind}, sha256 {cfg.sha256()[:12]})")
        return 0
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_output(args.out)
    if args.jobs < 1:
        print("--jobs must be at least 1", file=sys.stderr)
        return 2
    from .experiments import run_experiment

    t0 = time.perf_counter()
    man, _ = run_experiment(cfg, args.command, args.jobs)
    for a in man.assertions:
        print(f"{'PASS' if a['passed'] else 'FAIL'}  {a['metric']} {a['condition']}  (got {a['value']!r})")
    print(f"{cfg.name}: {len(man.files)} files in {cfg.output.directory} "
          f"[{time.perf_counter() - t0:.1f} s]", file=sys.stderr)
    return 0 if man.all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
