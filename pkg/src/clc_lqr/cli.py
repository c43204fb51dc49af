"""``clc-lqr <method> --config PATH [--seed N] [--out DIR]``

Exit status 0 on success, 2 for configuration errors, 1 for any other
failure. Errors go to stderr as ``key = value`` lines.
"""
from __future__ import annotations

import argparse
import sys

from .errors import CLCError, ConfigError
from .harness import METHODS, load_config, run


def _error(kind, exc):
    print(f"error.type = {kind}", file=sys.stderr)
    print(f"error.message = {exc}", file=sys.stderr)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="clc-lqr", description="Combined learning-and-control experiments.")
    p.add_argument("method", choices=METHODS)
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    args = p.parse_args(argv)
    try:
        cfg = load_config(args.config, method=args.method, seed=args.seed, output=args.out)
    except OSError as exc:
        _error("ConfigError", exc)
        return 2
    except ConfigError as exc:
        _error("ConfigError", exc)
        return 2
    try:
        report = run(cfg)
    except CLCError as exc:
        _error(type(exc).__name__, exc)
        return 1
    for f in report.files:
        print(f)
    print(f"total_episodes = {report.total_episodes}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
