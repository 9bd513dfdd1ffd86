"""Command-line driver for sampling, fitting, and optimisation campaigns."""
from __future__ import annotations

import argparse
import json
import sys

from .campaign import (
    RunConfig,
    cmd_fit,
    cmd_optimize,
    cmd_pareto,
    cmd_sample,
    cmd_stochastic,
    cmd_superstructure,
    cmd_surface,
)

_COMMANDS = {
    "sample": cmd_sample,
    "fit": cmd_fit,
    "optimize": cmd_optimize,
    "superstructure": cmd_superstructure,
    "pareto": cmd_pareto,
    "stochastic": cmd_stochastic,
    "surface": cmd_surface,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surropt",
        description="Surrogate-based black-box optimization campaigns",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--objective", default=None)
    return parser


def _load_config(args) -> RunConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    if args.objective is not None:
        data["objective"] = args.objective
    return RunConfig.from_dict(data)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    cfg = _load_config(args)
    result = _COMMANDS[args.command](cfg)
    if args.command == "sample":
        for config, ds in result.items():
            print(f"{config}: {ds.n} samples, "
                  f"{int(ds.t.sum()) if ds.t is not None else ds.n} converged")
    elif args.command == "fit":
        print(json.dumps(result.report, indent=1))
    elif args.command == "surface":
        for config, path in result.items():
            print(f"{config}: {path}")
    else:
        printable = {k: v for k, v in result.items() if k != "records"}
        print(json.dumps(printable, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
