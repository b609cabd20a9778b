"""Command-line experiment runner.

Verbs: variance-sweep, eig-compare, dump-inverse, solve, hierarchy.
Each takes --config FILE plus --set section.key=value overrides; common
knobs also have direct flags.  Exit codes: 0 ok, 2 config error,
3 numerical failure.
"""

import argparse
import sys

from .config import ConfigError, ExperimentConfig
from . import experiments


def _add_common(p):
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config entry")
    p.add_argument("--dims", default=None, help="lattice extents, e.g. 16,16")
    p.add_argument("--mass", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", default=None, help="output directory")


def _load_config(args):
    overrides = list(args.overrides)
    if args.dims is not None:
        overrides.append(f"lattice.dims={args.dims}")
    if args.mass is not None:
        overrides.append(f"operator.mass={args.mass}")
    if args.beta is not None:
        overrides.append(f"gauge.beta={args.beta}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.output is not None:
        overrides.append(f"run.output_dir={args.output}")
    return ExperimentConfig.from_file(args.config, overrides)


def build_parser():
    ap = argparse.ArgumentParser(prog="mgtrace", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb, helptext in [
        ("variance-sweep", "variance vs deflation rank and probing level"),
        ("eig-compare", "inversion counts across eigensolver strategies"),
        ("dump-inverse", "dense |A^-1| heatmap data, deflated and probed"),
        ("solve", "one-off linear solve with the configured solver"),
        ("hierarchy", "build and dump the multigrid hierarchy"),
    ]:
        p = sub.add_parser(verb, help=helptext)
        _add_common(p)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        if args.verb == "variance-sweep":
            outdir = experiments.run_variance_sweep(cfg)
        elif args.verb == "eig-compare":
            outdir = experiments.run_eigensolver_comparison(cfg)
        elif args.verb == "dump-inverse":
            outdir = experiments.dump_inverse_magnitudes(cfg)
        elif args.verb == "solve":
            outdir = experiments.run_solve(cfg)
        elif args.verb == "hierarchy":
            outdir = experiments.run_hierarchy(cfg)
        else:  # pragma: no cover
            return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    print(outdir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
