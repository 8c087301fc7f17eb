"""Command-line entry point: run, grid, aggregate, combine."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment as X
from .engine import NonFiniteLossError

log = logging.getLogger("dfl")


def _ints(text):
    return [int(s) for s in text.split(",") if s.strip()]


def _pair(text):
    try:
        m, s = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MEAN,STD, got {text!r}") from None
    return m, s


def _load(path, seed=None, out=None):
    cfg = X.parse_config(Path(path).read_text()) if path else X.RunConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, out=out)
    return cfg


def cmd_run(args):
    cfg = _load(args.config, args.seed, args.out)
    try:
        rdir = X.run_single(cfg)
    except NonFiniteLossError as exc:
        log.error("run aborted: %s", exc)
        return 2
    print(rdir)
    return 0


def cmd_grid(args):
    cfg = _load(args.config, out=args.out)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    rows = X.grid_search(cfg, args.k, args.t, seeds, jobs=args.jobs)
    sys.stdout.write(X.format_summary(rows, cfg))
    return 1 if any(r.failures for r in rows) else 0


def cmd_aggregate(args):
    dirs = X.collect_run_dirs(args.dirs)
    finals = [X.final_test_acc(d) for d in dirs]
    try:
        mean, std = X.aggregate_seeds(finals)
    except X.AggregationError as exc:
        log.error("%s", exc)
        return 1
    print("n,mean,std")
    print(f"{len(finals)},{X.fmt(mean)},{X.fmt(std)}")
    return 0


def cmd_combine(args):
    mean, std = X.combine_group_stats(*args.a, *args.b)
    print("mean,std,rounded")
    print(f"{X.fmt(mean)},{X.fmt(std)},{X.pm(mean, std)}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="dfl", description="Teacher-pool self-distillation with head resets")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("--config", help="key=value config file (defaults apply to missing keys)")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("grid", help="K x T grid over several seeds")
    g.add_argument("--config")
    g.add_argument("--k", type=_ints, default=[1, 2, 4, 8])
    g.add_argument("--t", type=_ints, default=[1, 20, 50, 100])
    g.add_argument("--seeds", type=int, default=5)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--out")
    g.set_defaults(func=cmd_grid)

    a = sub.add_parser("aggregate", help="mean/std of final test accuracy over run directories")
    a.add_argument("dirs", nargs="+")
    a.set_defaults(func=cmd_aggregate)

    c = sub.add_parser("combine", help="merge two equal-size groups' mean/std")
    c.add_argument("--a", type=_pair, required=True)
    c.add_argument("--b", type=_pair, required=True)
    c.set_defaults(func=cmd_combine)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except X.ConfigError as exc:
        log.error("config error: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
