"""Command line: ``trjmcmc {run,ground-truth,validate} CONFIG [--seed N] [--out-dir DIR] [--threads N] [--dry-run]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .config import ConfigError, config_to_dict, load_config
from .experiments import StageError, run_experiment, run_ground_truth, validate_config
from .samplers import format_model

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _parser():
    p = argparse.ArgumentParser(prog="trjmcmc", description="Transport reversible jump experiments.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, text in [("run", "run an experiment"), ("ground-truth", "estimate reference model probabilities"),
                       ("validate", "check a config and print it with defaults filled in")]:
        s = sub.add_parser(verb, help=text)
        s.add_argument("config", help="YAML experiment config")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out-dir", default="runs/out", help="artifact directory (default: runs/out)")
        s.add_argument("--threads", type=int, default=1, help="worker threads for MBE replicates")
        s.add_argument("--dry-run", action="store_true", help="validate and write the manifest only")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        validate_config(cfg)
    except (OSError, ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.verb == "validate":
        print(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True))
        return EXIT_OK
    try:
        if args.verb == "run":
            m = run_experiment(cfg, args.out_dir, threads=args.threads, dry_run=args.dry_run)
            print(f"{m.status}: {len(m.artifacts)} artifact(s) in {args.out_dir}")
        elif args.dry_run:
            print("dry-run: config is valid")
        else:
            gt, _ = run_ground_truth(cfg, args.out_dir)
            for k, p in gt.probs.items():
                print(f"pi({format_model(k)}) = {p:.5f} +- {gt.se[k]:.5f} [{gt.method}]")
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
