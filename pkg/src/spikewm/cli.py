"""Command-line entry point: ``spikewm <command> [--config FILE] [--key=value ...]``.

Exit codes: 0 success, 1 configuration error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from spikewm.config import RunConfig
from spikewm.envs import load_episodes, make_env, save_episodes
from spikewm.errors import ConfigError, FormatError, NumericError, ParameterError
from spikewm.neuron import NeuronParams
from spikewm.tasks import (TrainConfig, build_classifier, generate, lif_param_count,
                           matched_lif_width, mcn_param_count, read_spk1, train_classifier, write_curve_csv, write_spk1)
from spikewm.training import WMRun
from spikewm.world_model import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("train-seq", "train-wm", "trace", "grid-search", "gen-data")
TRACE_COLUMNS = ("tick", "neuron", "v_apical", "v_basal", "u", "z", "spike")

log = logging.getLogger("spikewm")


def _parse_overrides(tokens: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            k, v = tok[2:].split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for {tok!r}")
            k, v = tok[2:], tokens[i + 1]
            i += 1
        out[k] = v
        i += 1
    return out


def resolve_config(config_path: str | None, overrides: dict[str, str]) -> RunConfig:
    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    for k, v in overrides.items():
        cfg.set(k, v)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(cfg.to_text())
    return out


def _task_classifier(cfg: RunConfig, kind: str, params: NeuronParams, seed: int):
    task = cfg.task()
    kw = dict(tau_ro=cfg["seq.tau_ro"], learnable_decay=cfg["seq.learnable_decay"],
              input_scale=cfg["seq.input_scale"], recurrent_scale=cfg["seq.recurrent_scale"],
              self_gain_b=cfg["seq.self_gain_b"], self_gain_a=cfg["seq.self_gain_a"])
    return task, build_classifier(kind, task, cfg["seq.hidden"], params, seed, **kw)


def run_seq(cfg: RunConfig, params: NeuronParams | None = None, epochs: int | None = None):
    """Train one sequence classifier; returns ``(model, curve, final_accuracy)``."""
    kind = cfg["seq.neuron"]
    if kind not in ("mcn", "lif"):
        raise ConfigError(f"seq.neuron must be mcn or lif, got {kind!r}")
    params = params or cfg.neuron()
    seed = cfg["run.seed"]
    task, model = _task_classifier(cfg, kind, params, seed)
    data = generate(task, cfg["task.n_samples"])
    tc = TrainConfig(batch_size=cfg["seq.batch_size"], lr=cfg["seq.lr"], clip_norm=cfg["seq.clip_norm"], seed=seed)
    epochs = cfg["seq.epochs"] if epochs is None else epochs
    if epochs < 0:
        raise ConfigError("seq.epochs must be >= 0")
    curve, acc = train_classifier(model, data, epochs, tc, task.readout_start())
    return model, curve, acc


def cmd_train_seq(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    task = cfg.task()
    n = cfg["seq.hidden"]
    width = matched_lif_width(task.channels, n, task.n_classes)
    print(f"parameter counts: mcn={mcn_param_count(task.channels, n, task.n_classes)} "
          f"lif={lif_param_count(task.channels, width, task.n_classes)} (lif width {width})")
    model, curve, acc = run_seq(cfg)
    write_curve_csv(out / "metrics.csv", curve)
    save_checkpoint(out / "checkpoint.swm", {"model": model}, cfg.digest)
    print(f"final test accuracy {acc:.4f} ({cfg['seq.neuron']}, {len(curve) // 2 - 1} epochs)")
    return EXIT_OK


def cmd_train_wm(cfg: RunConfig, resume: str | None = None) -> int:
    out = _out_dir(cfg)
    run = WMRun(cfg.loop(), cfg.wm(), cfg.agent(), cfg.neuron())
    if resume:
        _, extra = load_checkpoint(resume, run.modules(), run.optimizers())
        run.env_steps, run.n_updates, run.n_episodes = (int(x) for x in extra["counters"])
        if run.agent is not None and "return_scale" in extra:
            run.agent.return_scale.value = float(extra["return_scale"][0])
        episodes = Path(resume).with_name("episodes.swe")
        if episodes.exists():
            for ep in load_episodes(episodes):
                run.buffer.add(ep)
        print(f"resumed from {resume} at env step {run.env_steps}")

    def on_row(row):
        if row["update"] % 100 == 0:
            print(f"step {row['env_step']} update {row['update']} loss {row['loss']:.4f}", flush=True)

    result = run.run(out / "metrics.csv", on_row)
    run.save(out / "checkpoint.swm", cfg.digest)
    save_episodes(out / "episodes.swe", list(run.buffer.episodes), cfg.digest)
    for step, ret in result.eval_returns:
        print(f"eval step {step}: mean greedy return {ret:.3f}")
    return EXIT_OK


def trace_rows(trace: dict[str, np.ndarray], tick0: int = 0):
    """Yield CSV rows from ``[T, n]`` trace arrays (batch already selected)."""
    T, n = trace["z"].shape
    for t in range(T):
        for i in range(n):
            yield (tick0 + t, i, trace["v_apical"][t, i], trace["v_basal"][t, i], trace["u"][t, i],
                   trace["z"][t, i], int(trace["spike"][t, i]))


def collect_trace(cfg: RunConfig) -> dict[str, np.ndarray]:
    """Per-tick MCN internals ``[ticks, n]`` from an env rollout or a task sample."""
    seed = cfg["run.seed"]
    ckpt = cfg["trace.checkpoint"]
    if cfg["trace.source"] == "task":
        _, model = _task_classifier(cfg, "mcn", cfg.neuron(), seed)
        if ckpt:
            load_checkpoint(ckpt, {"model": model})
        data = generate(cfg.task(), 1)
        x = np.swapaxes(data.spikes[:1], 0, 1).astype(float)
        _, _, tr = model.body.forward(x, x, record=True)
        return {k: v[:, 0] for k, v in tr.items()}
    if cfg["trace.source"] != "env":
        raise ConfigError(f"trace.source must be env or task, got {cfg['trace.source']!r}")
    run = WMRun(cfg.loop(), cfg.wm(), cfg.agent(), cfg.neuron())
    if ckpt:
        load_checkpoint(ckpt, run.modules())
    wm, agent = run.wm, run.agent
    env = make_env(cfg["loop.env"], cfg["loop.max_episode_steps"])
    rng = np.random.default_rng([seed, 0x78ACE])
    obs = env.reset(seed)
    state = wm.initial_state(1)
    a_prev = np.zeros((1, wm.act_dim))
    parts: dict[str, list] = {}
    for _ in range(cfg["trace.steps"]):
        state, _, _, tr = wm.observe_step(state, a_prev, obs[None], rng, record=True)
        for k, v in tr.items():
            parts.setdefault(k, []).append(v[:, 0])
        if agent is not None:
            a_prev = agent.policy(wm.features(state).value, "greedy").action
        else:
            a_prev = rng.uniform(-1.0, 1.0, (1, wm.act_dim))
        obs, _, cont = env.step(a_prev[0])
        if cont == 0.0:
            break
    return {k: np.concatenate(v) for k, v in parts.items()}


def gate_rate_correlation(trace: dict[str, np.ndarray]) -> float:
    """Pearson correlation across ticks of mean gate value and population firing rate."""
    z = trace["z"].mean(axis=1)
    r = trace["spike"].mean(axis=1)
    if z.std() == 0 or r.std() == 0:
        return float("nan")
    return float(np.corrcoef(z, r)[0, 1])


def cmd_trace(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    trace = collect_trace(cfg)
    with (out / "trace.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace_rows(trace):
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    rates = trace["spike"].mean(axis=0)
    duty = (trace["z"] > 0.5).mean(axis=0)
    with (out / "trace_summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("neuron", "firing_rate", "gate_duty_cycle", "mean_gate"))
        for i in range(len(rates)):
            w.writerow((i, repr(float(rates[i])), repr(float(duty[i])), repr(float(trace["z"][:, i].mean()))))
    corr = gate_rate_correlation(trace)
    T, n = trace["z"].shape
    print(f"traced {T} ticks x {n} neurons; mean rate {rates.mean():.4f}; "
          f"gate/rate correlation {corr:.4f}")
    return EXIT_OK


def _grid_cell(args) -> tuple[float, float, float, float]:
    text, gb, beta, epochs = args
    cfg = RunConfig.from_text(text)
    try:
        base = cfg.neuron()
        params = base.with_(g_B=gb * base.g_L, beta=beta)
        _, curve, acc = run_seq(cfg, params, epochs)
        return gb, beta, acc, curve[-1].loss
    except (NumericError, ParameterError, FloatingPointError) as e:
        log.warning("grid cell g_B/g_L=%s beta=%s failed: %s", gb, beta, e)
        return gb, beta, float("nan"), float("nan")


def cmd_grid_search(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    gbs, betas = cfg.float_list("grid.gb_over_gl"), cfg.float_list("grid.beta")
    cells = [(cfg.to_text(), gb, b, cfg["grid.epochs"]) for gb in sorted(gbs) for b in sorted(betas)]
    threads = cfg["run.threads"]
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            rows = list(pool.map(_grid_cell, cells))
    else:
        rows = []
        for c in cells:
            rows.append(_grid_cell(c))
            print(f"g_B/g_L={c[1]} beta={c[2]} -> accuracy {rows[-1][2]:.4f}", flush=True)
    with (out / "grid.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("gb_over_gl", "beta", "final_accuracy", "final_loss"))
        for r in rows:
            w.writerow([repr(float(x)) for x in r])
    return EXIT_OK


def cmd_gen_data(cfg: RunConfig) -> int:
    task = cfg.task()
    n = cfg["data.n"]
    if n < 0:
        raise ConfigError("data.n must be >= 0")
    data = generate(task, n)
    path = Path(cfg["data.out"])
    write_spk1(path, data)
    back = read_spk1(path)
    hist = np.bincount(back.labels, minlength=task.n_classes)
    print(f"wrote {len(back)} samples to {path}; class histogram {hist.tolist()}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikewm", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--resume", help="checkpoint to resume train-wm from")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, _parse_overrides(rest))
        if cfg["run.threads"] < 1:
            raise ConfigError("run.threads must be >= 1")
        if cfg["run.threads"] > 1:
            print("note: results are deterministic only with --threads 1", file=sys.stderr)
        handlers = {"train-seq": cmd_train_seq, "trace": cmd_trace,
                    "grid-search": cmd_grid_search, "gen-data": cmd_gen_data}
        if args.command == "train-wm":
            return cmd_train_wm(cfg, args.resume)
        return handlers[args.command](cfg)
    except (ConfigError, ParameterError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
