"""Train the spiking world model and agent on PendulumLite for several seeds.

Extra ``key=value`` arguments override config keys, e.g. ``loop.steps=20000``.

Usage: python scripts/pendulum_run.py --seeds 0 1 2 [loop.train_every=25 ...]
"""

import argparse
import time

import numpy as np

from spikewm.config import RunConfig
from spikewm.training import WMRun, random_baseline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("overrides", nargs="*", help="key=value config overrides")
    args = ap.parse_args()
    overrides = dict(kv.split("=", 1) for kv in args.overrides)

    finals, randoms = [], []
    for seed in args.seeds:
        cfg = RunConfig({**overrides, "run.seed": seed})
        run = WMRun(cfg.loop(), cfg.wm(), cfg.agent(), cfg.neuron())
        t0 = time.perf_counter()

        def on_row(row):
            if row["update"] % 100 == 0:
                print(f"  seed {seed} step {row['env_step']} loss {row['loss']:.3f} "
                      f"imag_return {row.get('imag_return', float('nan')):.2f} "
                      f"train_return {row['train_return']:.1f} ({time.perf_counter() - t0:.0f}s)", flush=True)

        res = run.run(on_row=on_row)
        base = random_baseline(cfg["loop.env"], cfg["loop.eval_episodes"], seed, cfg["loop.max_episode_steps"])
        finals.append(res.final_eval)
        randoms.append(base)
        evals = ", ".join(f"{s}:{r:.1f}" for s, r in res.eval_returns)
        print(f"seed {seed}: evals [{evals}] random {base:.2f} ({res.seconds:.0f}s)", flush=True)
    g, r = np.median(finals), np.median(randoms)
    print(f"median greedy {g:.2f} vs random {r:.2f}; ratio of distances to zero {r / g:.2f}")


if __name__ == "__main__":
    main()
