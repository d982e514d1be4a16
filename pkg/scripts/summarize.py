"""Print a table of chain occupancies and MBE replicate statistics for results/<name>/."""
import argparse
import csv
import json
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]


def ground_truth(run):
    path = run / "ground_truth" / "ground_truth.csv"
    if not path.exists():
        return {}
    with open(path) as f:
        return {r["k"]: (float(r["pi"]), float(r["se"])) for r in csv.DictReader(f)}


def summarize(run):
    summary = json.loads((run / "summary.json").read_text())
    gt = ground_truth(run)
    if not gt and "true_probs" in summary:
        gt = {k: (p, 0.0) for k, p in summary["true_probs"].items()}
    print(f"== {run.name} ({summary['experiment']})")
    if gt:
        print("   reference   " + "  ".join(f"{k}: {p:.4f}" for k, (p, _) in gt.items()))
    for kind, s in summary.get("chains", {}).items():
        cells = "  ".join(f"{k}: {p:.4f}+-{s['pooled_se'][k]:.4f}" for k, p in s["pooled"].items())
        acc = s["across_acceptance"]
        print(f"   chain {kind:<20} {cells}  across acc {acc:.3f}" if acc is not None else f"   chain {kind:<20} {cells}")
    mbe = run / "mbe_replicates.csv"
    if mbe.exists():
        rows = {}
        with open(mbe) as f:
            for r in csv.DictReader(f):
                if not r["flags"]:
                    rows.setdefault((r["proposal_kind"], r["k"]), []).append(float(r["pi_hat"]))
        for (kind, k), v in sorted(rows.items()):
            v = np.array(v)
            sd = v.std(ddof=1) if v.size > 1 else float("nan")
            print(f"   mbe   {kind:<20} {k}: mean {v.mean():.4f} median {np.median(v):.4f} sd {sd:.2e} (n={v.size})")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("runs", nargs="*", help="result directories, default: every results/*/")
    args = ap.parse_args()
    runs = [Path(r) for r in args.runs] or sorted(p.parent for p in (ROOT / "results").glob("*/summary.json"))
    for run in runs:
        summarize(run)


if __name__ == "__main__":
    main()
