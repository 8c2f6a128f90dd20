"""Desk-scale Base/SD/DCSD comparison on an unseen synthetic center.

Runs the 5-seed benchmark, the generalization-gap report and the T=1/T=4
ablation with the ``desk`` preset, then prints the three tables.

    python scripts/desk_reproduction.py --out runs/desk
"""

import argparse
import sys
from pathlib import Path

from dcsd.cli import main


def run(argv):
    code = main(argv)
    if code:
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seeds", default="1,2,3,4,5")
    ap.add_argument("--skip-ablation", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    run(["benchmark", "--preset", "desk", "--out", str(out), "--seeds", args.seeds])
    run(["gap-report", "--preset", "desk", "--out", str(out)])
    if not args.skip_ablation:
        run(["ablate-temperature", "--preset", "desk", "--out", str(out / "ablation"), "--temperatures", "1,4"])
