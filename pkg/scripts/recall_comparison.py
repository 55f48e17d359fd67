"""MCN vs parameter-matched LIF on delayed recall, several seeds.

Usage: python scripts/recall_comparison.py --seeds 0 1 2 [--delay 30] [--out runs/recall]
"""

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from spikewm.cli import run_seq
from spikewm.config import RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--delay", type=int, default=30)
    ap.add_argument("--T", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--out", default="runs/recall")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        for kind in ("mcn", "lif"):
            cfg = RunConfig({"run.seed": seed, "seq.neuron": kind, "task.T": args.T,
                             "task.delay": args.delay, "seq.epochs": args.epochs})
            t0 = time.perf_counter()
            _, curve, acc = run_seq(cfg)
            secs = time.perf_counter() - t0
            rows.append((kind, seed, acc, secs))
            print(f"{kind} seed {seed}: test accuracy {acc:.3f} ({secs:.0f}s)", flush=True)
    with (out / "recall.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("neuron", "seed", "test_accuracy", "seconds"))
        w.writerows(rows)
    for kind in ("mcn", "lif"):
        accs = [r[2] for r in rows if r[0] == kind]
        print(f"{kind}: median {np.median(accs):.3f} over {len(accs)} seeds")


if __name__ == "__main__":
    main()
