"""Deterministic toy control environments and a sequence replay buffer."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from spikewm.container import EPISODE_MAGIC, read_container, write_container
from spikewm.errors import ContractError


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    max_episode_steps: int
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise ContractError("dims must be >= 1")
        if self.max_episode_steps < 2:
            raise ContractError("max_episode_steps must be >= 2")


def wrap_angle(theta: float) -> float:
    """Wrap into (-pi, pi]."""
    w = math.fmod(theta + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


class PendulumLite:
    """Torque-limited pendulum swing-up. ``theta = 0`` is upright.

    Rod dynamics ``omega' = omega + (3g/2l sin(theta) + 3/(m l^2) tau) dt``
    followed by ``theta' = theta + omega' dt`` (symplectic Euler), torque
    ``tau = max_torque * action``.
    """

    name = "pendulum-lite"
    g, m, l, dt = 10.0, 1.0, 1.0, 0.05
    max_speed = 8.0
    max_torque = 2.0
    max_cost = math.pi ** 2 + 0.1 * 8.0 ** 2 + 0.001

    def __init__(self, max_episode_steps: int = 200):
        self.spec = EnvSpec(obs_dim=3, act_dim=1, max_episode_steps=max_episode_steps)
        self.theta = math.pi
        self.omega = 0.0
        self.t = 0
        self.clip_count = 0

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng([int(seed), 0x9E7D])
        self.set_state(rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0))
        return self.observe()

    def set_state(self, theta: float, omega: float):
        self.theta = wrap_angle(float(theta))
        self.omega = float(np.clip(omega, -self.max_speed, self.max_speed))
        self.t = 0

    def observe(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta), self.omega / self.max_speed])

    def step(self, action):
        a = float(np.asarray(action, dtype=float).reshape(-1)[0])
        if not -1.0 <= a <= 1.0:
            self.clip_count += 1
            a = min(max(a, -1.0), 1.0)
        cost = self.theta ** 2 + 0.1 * self.omega ** 2 + 0.001 * a * a
        torque = self.max_torque * a
        acc = 3.0 * self.g / (2.0 * self.l) * math.sin(self.theta) + 3.0 / (self.m * self.l ** 2) * torque
        self.omega = min(max(self.omega + acc * self.dt, -self.max_speed), self.max_speed)
        self.theta = wrap_angle(self.theta + self.omega * self.dt)
        self.t += 1
        cont = 0.0 if self.t >= self.spec.max_episode_steps else 1.0
        return self.observe(), -cost / self.max_cost, cont

    def render(self, size: int = 16, width: float = 1.0) -> np.ndarray:
        """Grey-scale ``[size, size]`` image of the rod, anti-aliased by distance to the segment."""
        c = (size - 1) / 2.0
        tip = np.array([c + 0.9 * c * math.sin(self.theta), c - 0.9 * c * math.cos(self.theta)])
        ys, xs = np.mgrid[0:size, 0:size].astype(float)
        p = np.stack([xs, ys], axis=-1) - c
        d = tip - c
        s = np.clip((p @ d) / max(d @ d, 1e-12), 0.0, 1.0)
        dist = np.linalg.norm(p - s[..., None] * d, axis=-1)
        return np.clip(1.0 - dist / width, 0.0, 1.0)


class SparseReacherLite:
    """Planar two-joint arm; reward 1 while the fingertip is within the goal radius.

    Joint accelerations are ``gain * action - damping * velocity``; links have
    length 0.5 so the reachable disc has radius 1.
    """

    name = "sparse-reacher-lite"
    dt, gain, damping, max_speed = 0.05, 10.0, 1.0, 10.0
    link = 0.5
    goal_radius = 0.1

    def __init__(self, max_episode_steps: int = 200):
        self.spec = EnvSpec(obs_dim=10, act_dim=2, max_episode_steps=max_episode_steps)
        self.q = np.zeros(2)
        self.qd = np.zeros(2)
        self.goal = np.zeros(2)
        self.t = 0
        self.clip_count = 0

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng([int(seed), 0x4EAC])
        self.q = rng.uniform(-math.pi, math.pi, 2)
        self.qd = np.zeros(2)
        r = 0.9 * math.sqrt(rng.uniform(0.05, 1.0))
        phi = rng.uniform(-math.pi, math.pi)
        self.goal = np.array([r * math.cos(phi), r * math.sin(phi)])
        self.t = 0
        return self.observe()

    def fingertip(self) -> np.ndarray:
        a1, a12 = self.q[0], self.q[0] + self.q[1]
        return self.link * np.array([math.cos(a1) + math.cos(a12), math.sin(a1) + math.sin(a12)])

    def observe(self) -> np.ndarray:
        tip = self.fingertip()
        return np.concatenate([np.cos(self.q), np.sin(self.q), self.qd / self.max_speed,
                               self.goal, tip - self.goal])

    def step(self, action):
        a = np.asarray(action, dtype=float).reshape(-1)[:2]
        if np.any(np.abs(a) > 1.0):
            self.clip_count += 1
            a = np.clip(a, -1.0, 1.0)
        self.qd = np.clip(self.qd + (self.gain * a - self.damping * self.qd) * self.dt,
                          -self.max_speed, self.max_speed)
        self.q = np.array([wrap_angle(x) for x in self.q + self.qd * self.dt])
        self.t += 1
        reward = 1.0 if np.linalg.norm(self.fingertip() - self.goal) < self.goal_radius else 0.0
        cont = 0.0 if self.t >= self.spec.max_episode_steps else 1.0
        return self.observe(), reward, cont


ENVS = {PendulumLite.name: PendulumLite, SparseReacherLite.name: SparseReacherLite}


def make_env(name: str, max_episode_steps: int = 200):
    try:
        return ENVS[name](max_episode_steps)
    except KeyError:
        raise ContractError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


def env_reset(env, seed: int) -> np.ndarray:
    return env.reset(seed)


def env_step(env, action):
    return env.step(action)


# ------------------------------------------------------------------- replay

@dataclass
class Trajectory:
    """One episode, time-major. ``actions[t]`` is the action that led to
    ``obs[t]`` (zero at the first step); ``rewards[t]`` arrived with ``obs[t]``."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    continues: np.ndarray
    is_first: np.ndarray

    def __post_init__(self):
        n = len(self.obs)
        if not (len(self.actions) == len(self.rewards) == len(self.continues) == len(self.is_first) == n):
            raise ContractError("trajectory fields must have equal length")
        if not np.all(np.isin(self.continues, (0.0, 1.0))):
            raise ContractError("continue flags must be 0 or 1")

    def __len__(self):
        return len(self.obs)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"obs": self.obs, "actions": self.actions, "rewards": self.rewards,
                "continues": self.continues, "is_first": self.is_first.astype(float)}

    @classmethod
    def from_arrays(cls, d: dict[str, np.ndarray]) -> "Trajectory":
        return cls(d["obs"], d["actions"], d["rewards"], d["continues"], d["is_first"] > 0.5)


class EpisodeRecorder:
    def __init__(self, obs0: np.ndarray, act_dim: int):
        self.obs = [np.asarray(obs0, dtype=float)]
        self.actions = [np.zeros(act_dim)]
        self.rewards = [0.0]
        self.continues = [1.0]

    def add(self, action, obs, reward: float, cont: float):
        self.actions.append(np.asarray(action, dtype=float).reshape(-1))
        self.obs.append(np.asarray(obs, dtype=float))
        self.rewards.append(float(reward))
        self.continues.append(float(cont))

    def finish(self) -> Trajectory:
        n = len(self.obs)
        first = np.zeros(n, dtype=bool)
        first[0] = True
        return Trajectory(np.array(self.obs), np.array(self.actions), np.array(self.rewards),
                          np.array(self.continues), first)


def rollout(env, policy, seed: int) -> Trajectory:
    """Run one episode. ``policy(obs, t) -> action``."""
    obs = env.reset(seed)
    rec = EpisodeRecorder(obs, env.spec.act_dim)
    for t in range(env.spec.max_episode_steps):
        action = policy(obs, t)
        obs, reward, cont = env.step(action)
        rec.add(action, obs, reward, cont)
        if cont == 0.0:
            break
    return rec.finish()


@dataclass
class WMBatch:
    obs: np.ndarray        # [B, L, obs_dim]
    actions: np.ndarray    # [B, L, act_dim]
    rewards: np.ndarray    # [B, L]
    continues: np.ndarray  # [B, L]
    is_first: np.ndarray   # [B, L] bool

    def __post_init__(self):
        B, L = self.rewards.shape
        if L < 2:
            raise ContractError("sequence length must be >= 2")
        if self.obs.shape[:2] != (B, L) or self.actions.shape[:2] != (B, L):
            raise ContractError("batch fields disagree on [B, L]")
        if not np.all(np.isin(self.continues, (0.0, 1.0))):
            raise ContractError("continues must be binary")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    def concat(self, other: "WMBatch") -> "WMBatch":
        return WMBatch(*(np.concatenate([a, b]) for a, b in zip(
            (self.obs, self.actions, self.rewards, self.continues, self.is_first),
            (other.obs, other.actions, other.rewards, other.continues, other.is_first))))


@dataclass
class ReplayBuffer:
    """Episodes with oldest-first eviction once more than ``capacity`` steps are stored."""

    capacity: int
    seed: int = 0
    allow_span: bool = False
    episodes: deque = field(default_factory=deque)
    steps: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng([self.seed, 0xB0FF])

    def add(self, traj: Trajectory):
        self.episodes.append(traj)
        self.steps += len(traj)
        while self.steps > self.capacity and len(self.episodes) > 1:
            self.steps -= len(self.episodes.popleft())

    def __len__(self):
        return self.steps

    def sample(self, B: int, L: int, seed=None) -> WMBatch:
        """Uniform over valid (episode, offset) starts; ``seed`` makes it reproducible."""
        if not self.episodes:
            raise ContractError("cannot sample from an empty replay buffer")
        rng = self._rng if seed is None else (
            seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed))
        lengths = np.array([len(e) for e in self.episodes])
        n_starts = np.maximum(lengths - L + 1, 0)
        if n_starts.sum() == 0:
            if not self.allow_span:
                raise ContractError(f"no stored episode has length >= {L}")
            return self._sample_spanning(B, L, rng)
        flat = rng.integers(0, int(n_starts.sum()), size=B)
        bounds = np.cumsum(n_starts)
        out = []
        for f in flat:
            ep = int(np.searchsorted(bounds, f, side="right"))
            off = int(f - (bounds[ep] - n_starts[ep]))
            e = self.episodes[ep]
            out.append(tuple(a[off:off + L] for a in
                             (e.obs, e.actions, e.rewards, e.continues, e.is_first)))
        return WMBatch(*(np.stack(parts) for parts in zip(*out)))

    def _sample_spanning(self, B: int, L: int, rng) -> WMBatch:
        fields = [np.concatenate(parts) for parts in zip(*[
            (e.obs, e.actions, e.rewards, e.continues, e.is_first) for e in self.episodes])]
        total = len(fields[0])
        if total < L:
            raise ContractError(f"buffer holds {total} steps, fewer than L={L}")
        starts = rng.integers(0, total - L + 1, size=B)
        return WMBatch(*(np.stack([f[s:s + L] for s in starts]) for f in fields))


def buffer_add(buf: ReplayBuffer, traj: Trajectory):
    buf.add(traj)


def buffer_sample(buf: ReplayBuffer, B: int, L: int, seed=None) -> WMBatch:
    return buf.sample(B, L, seed)


def save_episodes(path, episodes, digest: str = ""):
    write_container(path, EPISODE_MAGIC, [e.to_arrays() for e in episodes], digest)


def load_episodes(path) -> list[Trajectory]:
    records, _ = read_container(path, EPISODE_MAGIC)
    return [Trajectory.from_arrays(r) for r in records]
