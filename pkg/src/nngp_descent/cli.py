"""Command line entry point.

    nngp-descent spectrum --config cfg.txt --out runs/fig1
    nngp-descent descent  --config cfg.json --seed 7 --threads 4
    nngp-descent variance --out runs/var
    nngp-descent limits   --config cfg.txt --format json

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 violated integrability hypotheses.  ``NNGP_DESCENT_OUT`` sets the
default output root.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import OUTPUT_ROOT_ENV, ExperimentConfig
from .errors import (
    EXIT_CONFIG,
    EXIT_HYPOTHESIS,
    EXIT_NUMERICAL,
    EXIT_OK,
    ConfigError,
    HypothesisViolationError,
    InvalidArgumentError,
    NumericalError,
)
from .experiments import RUNNERS

_SUBCOMMANDS = {
    "spectrum": "spectrum",
    "descent": "descent",
    "variance": "variance-scaling",
    "limits": "limits",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nngp-descent",
        description="double-descent experiments for finite-width NNGP kernels",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kind in _SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {kind} experiment")
        p.add_argument("--config", help="flat key=value or .json config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--threads", type=int, help="worker threads for trials")
        p.add_argument("--format", choices=("csv", "json"),
                       help="result table format")
        p.set_defaults(kind=kind)
    return parser


def _resolve_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if cfg.kind != args.kind:
            raise ConfigError(
                f"config kind {cfg.kind!r} does not match subcommand {args.kind!r}"
            )
    else:
        cfg = ExperimentConfig(kind=args.kind)
        if args.kind == "descent":
            cfg.N_list = [5, 10, 25, 50, 80, 100, 125, 200, 400, 700, 1000]
            cfg.n, cfg.d, cfg.trials = 100, 200, 30
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.format is not None:
        cfg.output_format = args.format
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if args.out:
        cfg.out_dir = args.out
    elif root:
        cfg.out_dir = os.path.join(root, cfg.kind)
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        manifest = RUNNERS[cfg.kind](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HypothesisViolationError as exc:
        print(f"hypothesis violation: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except (NumericalError, InvalidArgumentError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"wrote {len(manifest.outputs)} files to {cfg.out_dir}")
    for key, value in sorted(manifest.extras.items()):
        print(f"  {key}: {value}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
