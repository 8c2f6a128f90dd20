"""Train one DCSD model and summarise how the confidence coefficient evolves.

Prints per-epoch mean confidence and mean distillation term from the
training log; handy for checking that confidence rises as the stored
predictions improve.

    python scripts/confidence_trace.py --preset smoke --out runs/trace
"""

import argparse
import sys
from collections import defaultdict
from pathlib import Path

from dcsd.cli import main
from dcsd.trainer import read_log

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="smoke")
    ap.add_argument("--out", default="runs/trace")
    ap.add_argument("--temperature", type=float, default=4.0)
    args = ap.parse_args()
    out = Path(args.out)
    code = main(["train", "--preset", args.preset, "--out", str(out), "--mode", "dcsd", "--temperature", str(args.temperature)])
    if code:
        sys.exit(code)
    by_epoch = defaultdict(list)
    for row in read_log(out / "train_log.csv"):
        if row["confidence_mean"]:
            by_epoch[int(row["epoch"])].append((float(row["confidence_mean"]), float(row["dcsd"])))
    print(f"{'epoch':>5} {'confidence':>11} {'dcsd':>11}")
    for epoch, vals in sorted(by_epoch.items()):
        c = sum(v[0] for v in vals) / len(vals)
        d = sum(v[1] for v in vals) / len(vals)
        print(f"{epoch:>5} {c:>11.4f} {d:>11.3e}")
