"""Run every config in configs/ (or the ones named) and write results/<name>/.

    python3 scripts/run_experiments.py                # all four
    python3 scripts/run_experiments.py sas toy --seed 3
"""
import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from trjmcmc.config import load_config
from trjmcmc.experiments import run_experiment, run_ground_truth

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("names", nargs="*", help="config stems, default: every configs/*.yaml")
    ap.add_argument("--out", default=str(ROOT / "results"))
    ap.add_argument("--seed", type=int)
    ap.add_argument("--skip-ground-truth", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    names = args.names or sorted(p.stem for p in (ROOT / "configs").glob("*.yaml"))
    failed = []
    for name in names:
        cfg = load_config(ROOT / "configs" / f"{name}.yaml")
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        out = Path(args.out) / name
        t0 = time.perf_counter()
        if not args.skip_ground_truth:
            gt, _ = run_ground_truth(cfg, out / "ground_truth")
            print(f"[{name}] ground truth ({gt.method}): " +
                  ", ".join(f"{k}={p:.4f}" for k, p in gt.probs.items()))
        m = run_experiment(cfg, out)
        print(f"[{name}] {m.status} in {time.perf_counter() - t0:.0f} s -> {out}")
        if m.status != "complete":
            failed.append(name)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
