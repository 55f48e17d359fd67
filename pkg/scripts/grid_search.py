"""Grid over g_B/g_L and beta on delayed recall; prints an accuracy table.

Usage: python scripts/grid_search.py [--out runs/grid] [--threads 1] [key=value ...]
"""

import argparse
import csv
import sys
from pathlib import Path

from spikewm.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/grid")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("overrides", nargs="*", help="key=value config overrides")
    args = ap.parse_args()
    argv = ["grid-search", f"--out={args.out}", f"--threads={args.threads}"] + [f"--{kv}" for kv in args.overrides]
    code = cli_main(argv)
    if code:
        sys.exit(code)
    with (Path(args.out) / "grid.csv").open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    betas = sorted({float(r["beta"]) for r in rows})
    gbs = sorted({float(r["gb_over_gl"]) for r in rows})
    acc = {(float(r["gb_over_gl"]), float(r["beta"])): float(r["final_accuracy"]) for r in rows}
    print("g_B/g_L \\ beta " + " ".join(f"{b:>7.2f}" for b in betas))
    for gb in gbs:
        print(f"{gb:>14.2f} " + " ".join(f"{acc[(gb, b)]:>7.3f}" for b in betas))


if __name__ == "__main__":
    main()
