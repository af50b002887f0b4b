"""Command-line interface: `mgd run`, `mgd compare`, `mgd heatmap`."""
from __future__ import annotations

import argparse
import sys

from .harness import ConfigError, compare, dump_feature_heatmap, run


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mgd",
        description="Masked-generative feature distillation experiment runner. "
                    "Set MGD_THREADS=1 for the single-thread reference mode.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment config")
    p_run.add_argument("config", help="path to a key = value config file")
    p_run.add_argument("--jobs", type=int, default=1,
                       help="parallel workers for sweep/ablation members (default 1)")

    p_cmp = sub.add_parser("compare", help="tabulate result.json files from run dirs")
    p_cmp.add_argument("dirs", nargs="+", help="run directories to compare")
    p_cmp.add_argument("--out", required=True, help="output CSV path")

    p_map = sub.add_parser("heatmap", help="dump a stage activation heatmap as PGM")
    p_map.add_argument("checkpoint", help="model checkpoint path")
    p_map.add_argument("config", help="config describing the model and dataset")
    p_map.add_argument("--index", type=int, default=0, help="validation image index")
    p_map.add_argument("--stage", required=True, help="stage name, e.g. stage3")
    p_map.add_argument("--out", required=True, help="output PGM path")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return run(args.config, jobs=args.jobs)
    if args.command == "compare":
        try:
            compare(args.dirs, args.out)
        except OSError as exc:
            print(f"compare failed: {exc}", file=sys.stderr)
            return 3
        return 0
    try:
        dump_feature_heatmap(args.checkpoint, args.config, args.index, args.stage, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"heatmap failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
