"""Interleaved data collection, world-model training and imagination training."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spikewm.agent import Agent, AgentConfig
from spikewm.autodiff import AdamConfig
from spikewm.envs import EpisodeRecorder, ReplayBuffer, Trajectory, make_env
from spikewm.errors import ConfigError
from spikewm.neuron import NeuronParams
from spikewm.world_model import WMConfig, WMTrainer, WorldModel, WorldModelState, save_checkpoint

log = logging.getLogger(__name__)

EVAL_SEED_BASE = 1_000_000
METRIC_COLUMNS = ("env_step", "update", "loss", "pred_obs", "pred_reward", "pred_continue", "dyn_kl",
                  "rep_kl", "grad_norm", "actor_loss", "critic_loss", "imag_return", "entropy",
                  "train_return", "eval_return")


@dataclass(frozen=True)
class LoopConfig:
    env: str = "pendulum-lite"
    max_episode_steps: int = 200
    steps: int = 50_000
    prefill: int = 2_000
    train_every: int = 40
    updates: int = 1
    batch_size: int = 16
    seq_len: int = 32
    capacity: int = 100_000
    agent: bool = True
    lr: float = 1e-3
    clip_norm: float = 100.0
    eval_every: int = 10_000
    eval_episodes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.prefill < 0:
            raise ConfigError("steps and prefill must be >= 0")
        if self.train_every < 1 or self.updates < 1:
            raise ConfigError("train_every and updates must be >= 1")
        if self.seq_len < 2 or self.batch_size < 1:
            raise ConfigError("need seq_len >= 2 and batch_size >= 1")


class Policy:
    """Tracks the posterior world-model state of a single environment."""

    def __init__(self, wm: WorldModel, agent: Agent | None, mode: str, rng: np.random.Generator):
        self.wm, self.agent, self.mode, self.rng = wm, agent, mode, rng
        self.state: WorldModelState | None = None
        self.a_prev = np.zeros((1, wm.act_dim))

    def __call__(self, obs, t: int) -> np.ndarray:
        if t == 0:
            self.state = self.wm.initial_state(1)
            self.a_prev = np.zeros((1, self.wm.act_dim))
        self.state, _, _ = self.wm.observe_step(self.state, self.a_prev, obs[None], self.rng)
        out = self.agent.policy(self.wm.features(self.state).value, self.mode)
        self.a_prev = out.action
        return out.action[0]


def random_policy(rng: np.random.Generator, act_dim: int):
    return lambda obs, t: rng.uniform(-1.0, 1.0, act_dim)


def run_episode(env, policy, seed: int) -> Trajectory:
    obs = env.reset(seed)
    rec = EpisodeRecorder(obs, env.spec.act_dim)
    for t in range(env.spec.max_episode_steps):
        action = policy(obs, t)
        obs, reward, cont = env.step(action)
        rec.add(action, obs, reward, cont)
        if cont == 0.0:
            break
    return rec.finish()


def evaluate_policy(env_name: str, policy, episodes: int = 10, max_episode_steps: int = 200) -> float:
    """Mean undiscounted return over fixed evaluation seeds."""
    env = make_env(env_name, max_episode_steps)
    return float(np.mean([run_episode(env, policy, EVAL_SEED_BASE + i).rewards.sum()
                          for i in range(episodes)]))


def random_baseline(env_name: str, episodes: int = 10, seed: int = 0, max_episode_steps: int = 200) -> float:
    env = make_env(env_name, max_episode_steps)
    rng = np.random.default_rng([seed, 0x2A2D])
    return evaluate_policy(env_name, random_policy(rng, env.spec.act_dim), episodes, max_episode_steps)


@dataclass
class RunResult:
    rows: list[dict] = field(default_factory=list)
    eval_returns: list[tuple[int, float]] = field(default_factory=list)
    episodes: list[Trajectory] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_eval(self) -> float:
        return self.eval_returns[-1][1] if self.eval_returns else float("nan")


class WMRun:
    """Owns every stateful piece of a world-model training run."""

    def __init__(self, loop: LoopConfig, wm_cfg: WMConfig | None = None, agent_cfg: AgentConfig | None = None,
                 params: NeuronParams | None = None):
        self.loop = loop
        self.env = make_env(loop.env, loop.max_episode_steps)
        spec = self.env.spec
        wm_cfg = wm_cfg or WMConfig()
        agent_cfg = agent_cfg or AgentConfig()
        self.wm = WorldModel(spec.obs_dim, spec.act_dim, wm_cfg, params, seed=loop.seed)
        self.trainer = WMTrainer(self.wm, AdamConfig(lr=loop.lr, clip_norm=loop.clip_norm), seed=loop.seed)
        self.agent = Agent(wm_cfg.feature_dim, spec.act_dim, agent_cfg, wm_cfg.ticks, params, seed=loop.seed) \
            if loop.agent else None
        self.buffer = ReplayBuffer(loop.capacity, seed=loop.seed)
        self.rng = np.random.default_rng([loop.seed, 0x5EED])
        self.env_steps = 0
        self.n_updates = 0
        self.n_episodes = 0

    def modules(self) -> dict:
        mods = {"wm": self.wm}
        if self.agent is not None:
            mods.update(actor=self.agent.actor, critic=self.agent.critic)
        return mods

    def optimizers(self) -> dict:
        opts = {"wm": self.trainer.opt}
        if self.agent is not None:
            opts.update(actor=self.agent.actor_opt, critic=self.agent.critic_opt)
        return opts

    def save(self, path, digest: str = ""):
        extra = {"counters": np.array([self.env_steps, self.n_updates, self.n_episodes], dtype=float)}
        if self.agent is not None:
            extra["return_scale"] = np.array([self.agent.return_scale.value])
        save_checkpoint(path, self.modules(), digest, self.optimizers(), extra)

    def behaviour_policy(self):
        if self.agent is None or self.env_steps < self.loop.prefill:
            return random_policy(self.rng, self.env.spec.act_dim)
        return Policy(self.wm, self.agent, "explore", self.rng)

    def greedy_policy(self):
        if self.agent is None:
            return random_policy(np.random.default_rng([self.loop.seed, 0x2A2D]), self.env.spec.act_dim)
        return Policy(self.wm, self.agent, "greedy", np.random.default_rng([self.loop.seed, 0xE7A1]))

    def update(self) -> dict[str, float]:
        loop = self.loop
        batch = self.buffer.sample(loop.batch_size, loop.seq_len)
        metrics, res = self.trainer.step(batch, keep_states=self.agent is not None)
        if self.agent is not None:
            metrics.update(self.agent.train_step(self.wm, WorldModelState.concat(res.states)))
        self.n_updates += 1
        return metrics

    def run(self, csv_path=None, on_row=None) -> RunResult:
        loop = self.loop
        result = RunResult()
        t0 = time.perf_counter()
        next_train = max(loop.prefill, loop.seq_len)
        next_eval = loop.eval_every
        row: dict = {}
        while self.env_steps < loop.steps:
            traj = self._collect_episode()
            result.episodes.append(traj)
            train_return = float(traj.rewards.sum())
            while self.env_steps >= next_train and next_train <= loop.steps:
                for _ in range(loop.updates):
                    row = {"env_step": next_train, "update": self.n_updates + 1, **self.update(),
                           "train_return": train_return}
                    result.rows.append(row)
                    if on_row:
                        on_row(row)
                next_train += loop.train_every
            if loop.eval_every and self.env_steps >= next_eval:
                self._evaluate(result, next_eval)
                next_eval += loop.eval_every
        if not result.eval_returns or result.eval_returns[-1][0] != self.env_steps:
            self._evaluate(result, self.env_steps)
        result.seconds = time.perf_counter() - t0
        if csv_path is not None:
            write_metrics_csv(csv_path, result.rows)
        return result

    def _collect_episode(self) -> Trajectory:
        remaining = self.loop.steps - self.env_steps
        seed = int(np.random.default_rng([self.loop.seed, self.n_episodes]).integers(2 ** 31))
        env = make_env(self.loop.env, min(self.loop.max_episode_steps, max(remaining, 2)))
        traj = run_episode(env, self.behaviour_policy(), seed)
        self.buffer.add(traj)
        self.env_steps += len(traj) - 1
        self.n_episodes += 1
        return traj

    def _evaluate(self, result: RunResult, step: int):
        ret = evaluate_policy(self.loop.env, self.greedy_policy(), self.loop.eval_episodes,
                              self.loop.max_episode_steps)
        result.eval_returns.append((step, ret))
        row = {"env_step": step, "update": self.n_updates, "eval_return": ret}
        result.rows.append(row)
        log.info("step %d eval_return %.3f", step, ret)


def write_metrics_csv(path, rows: list[dict]):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow(["" if r.get(c) is None else repr(r[c]) if isinstance(r.get(c), float) else r[c]
                        for c in METRIC_COLUMNS])
