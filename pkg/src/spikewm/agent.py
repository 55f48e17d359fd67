"""Spiking actor-critic trained on imagined rollouts of the world model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from spikewm import autodiff as ad
from spikewm.autodiff import Adam, AdamConfig, Tape, Tracked
from spikewm.errors import ConfigError, ContractError, NumericError
from spikewm.layers import BinGrid, Module, SpikingHead, twohot_nll
from spikewm.neuron import NeuronParams
from spikewm.world_model import WorldModel, WorldModelState

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class AgentConfig:
    horizon: int = 15
    gamma: float = 0.997
    lam: float = 0.95
    entropy: float = 3e-4
    head_units: int = 64
    discrete: bool = False
    min_std: float = 0.1
    max_std: float = 1.0
    return_decay: float = 0.99
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    clip_norm: float = 100.0
    imag_starts: int = 64

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if not 0.0 < self.min_std < self.max_std:
            raise ConfigError("need 0 < min_std < max_std")


@dataclass
class PolicyOutput:
    """``mean``/``std`` describe the pre-squash Gaussian (continuous) and
    ``logits`` the categorical (discrete). ``raw`` is the pre-squash sample or
    the class index."""

    action: np.ndarray
    raw: np.ndarray
    log_prob: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    logits: np.ndarray | None = None


class Actor(Module):
    def __init__(self, feature_dim: int, act_dim: int, cfg: AgentConfig, ticks: int = 8,
                 params: NeuronParams | None = None, seed: int = 0):
        rng = np.random.default_rng([seed, 0xAC70])
        self.cfg, self.act_dim = cfg, act_dim
        n_out = act_dim if cfg.discrete else 2 * act_dim
        self.head = SpikingHead(feature_dim, cfg.head_units, n_out, ticks, params, rng)

    def dist(self, features):
        """Tracked ``(mean, std)`` or ``(logits, None)``."""
        out = self.head.forward(features)
        if self.cfg.discrete:
            return out, None
        A = self.act_dim
        mean = out[..., :A]
        std = ad.sigmoid(out[..., A:]) * (self.cfg.max_std - self.cfg.min_std) + self.cfg.min_std
        return mean, std

    def log_prob(self, features, raw: np.ndarray):
        """Tracked log-density of the stored samples (pre-squash for Gaussians)."""
        a, b = self.dist(features)
        if self.cfg.discrete:
            onehot = np.eye(self.act_dim)[raw.astype(int)]
            return ad.tsum(ad.log_softmax(a) * onehot, axis=-1)
        z = (raw - a) / b
        return ad.tsum(ad.square(z) * -0.5 - ad.log(b), axis=-1) - 0.5 * LOG_2PI * self.act_dim

    def entropy(self, features):
        a, b = self.dist(features)
        if self.cfg.discrete:
            lp = ad.log_softmax(a)
            return -ad.tsum(ad.exp(lp) * lp, axis=-1)
        return ad.tsum(ad.log(b), axis=-1) + 0.5 * (1.0 + LOG_2PI) * self.act_dim


def gaussian_entropy(std) -> float:
    std = np.asarray(std, dtype=float)
    return float(np.sum(np.log(std)) + 0.5 * (1.0 + LOG_2PI) * std.size)


class Critic(Module):
    def __init__(self, feature_dim: int, cfg: AgentConfig, ticks: int = 8,
                 params: NeuronParams | None = None, seed: int = 0, grid: BinGrid | None = None):
        rng = np.random.default_rng([seed, 0xC217])
        self.grid = grid or BinGrid()
        self.head = SpikingHead(feature_dim, cfg.head_units, len(self.grid), ticks, params, rng, out_scale=0.0)

    def logits(self, features) -> Tracked:
        return self.head.forward(features)


def _features(wm_or_none, x):
    if isinstance(x, WorldModelState):
        return wm_or_none.features(x)
    return ad._t(x)


def act(actor: Actor, features, mode: str = "explore", rng=None) -> PolicyOutput:
    """Sample (``explore``) or take the mode (``greedy``) of the policy at ``features [B, F]``."""
    if mode not in ("explore", "greedy"):
        raise ContractError(f"mode must be explore or greedy, got {mode!r}")
    a, b = actor.dist(features)
    if actor.cfg.discrete:
        logits = a.value
        z = logits - logits.max(-1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        if mode == "greedy":
            idx = logits.argmax(-1)
        else:
            rng = rng if rng is not None else np.random.default_rng()
            u = rng.random(logits.shape[:-1] + (1,))
            idx = np.minimum((np.cumsum(np.exp(lp), -1) < u).sum(-1), actor.act_dim - 1)
        action = np.eye(actor.act_dim)[idx]
        return PolicyOutput(action, idx.astype(float), np.take_along_axis(lp, idx[..., None], -1)[..., 0],
                            logits=logits)
    mean, std = a.value, b.value
    if mode == "greedy":
        raw = mean.copy()
    else:
        rng = rng if rng is not None else np.random.default_rng()
        raw = mean + std * rng.standard_normal(mean.shape)
    action = np.tanh(raw)
    logp = (-0.5 * ((raw - mean) / std) ** 2 - np.log(std) - 0.5 * LOG_2PI
            - np.log(1.0 - action ** 2 + 1e-6)).sum(-1)
    return PolicyOutput(action, raw, logp, mean=mean, std=std)


def value(critic: Critic, features) -> np.ndarray:
    return critic.grid.mean(critic.logits(features))


@dataclass
class ImaginedRollout:
    features: np.ndarray   # [H+1, N, F]
    actions: np.ndarray    # [H, N, A]
    raw: np.ndarray        # [H, N, A] or [H, N]
    rewards: np.ndarray    # [H, N]
    continues: np.ndarray  # [H, N]
    values: np.ndarray     # [H+1, N]
    states: list | None = None

    def __post_init__(self):
        H = len(self.actions)
        if H < 1:
            raise ContractError("horizon must be >= 1")
        if not (len(self.rewards) == len(self.continues) == H and len(self.values) == len(self.features) == H + 1):
            raise ContractError("rollout lengths inconsistent")

    @property
    def horizon(self) -> int:
        return len(self.actions)


def imagine(actor: Actor, critic: Critic, wm: WorldModel, start: WorldModelState, H: int,
            rng=None, keep_states: bool = False) -> ImaginedRollout:
    """Roll the prior forward ``H`` steps under the exploring policy.

    Runs without a tape: nothing here can send gradients into the world model.
    """
    if H < 1:
        raise ContractError("horizon must be >= 1")
    if ad.is_recording():
        raise ContractError("imagine must run outside a tape")
    state = start.detach()
    feats = [wm.features(state).value]
    actions, raws, states = [], [], [state] if keep_states else None
    for _ in range(H):
        pol = act(actor, feats[-1], "explore", rng)
        state = wm.imagine_step(state, pol.action, rng)
        actions.append(pol.action)
        raws.append(pol.raw)
        feats.append(wm.features(state).value)
        if keep_states:
            states.append(state)
    F = np.stack(feats)
    H1, N, D = F.shape
    flat = F[1:].reshape(H * N, D)
    rewards = wm.reward_mean(flat).reshape(H, N)
    conts = wm.cont_prob(flat).reshape(H, N)
    values = value(critic, F.reshape(H1 * N, D)).reshape(H1, N)
    return ImaginedRollout(F, np.stack(actions), np.stack(raws), rewards, conts, values, states)


def lambda_returns(rewards, continues, values, gamma: float, lam: float) -> np.ndarray:
    """``R_h = r_h + gamma c_h ((1 - lam) v_{h+1} + lam R_{h+1})`` with ``R_H = v_H``.

    ``rewards``/``continues`` have ``H`` leading entries, ``values`` ``H + 1``.
    """
    rewards, continues, values = (np.asarray(x, dtype=float) for x in (rewards, continues, values))
    H = len(rewards)
    if len(continues) != H or len(values) != H + 1:
        raise ContractError(f"lengths mismatch: rewards {H}, continues {len(continues)}, values {len(values)}")
    if not 0.0 <= lam <= 1.0 or not 0.0 <= gamma <= 1.0:
        raise ContractError("gamma and lam must lie in [0, 1]")
    out = np.empty_like(rewards)
    nxt = values[H]
    for h in range(H - 1, -1, -1):
        nxt = rewards[h] + gamma * continues[h] * ((1.0 - lam) * values[h + 1] + lam * nxt)
        out[h] = nxt
    return out


def continue_weights(continues) -> np.ndarray:
    """``w_0 = 1``, ``w_h = prod_{k<h} c_k``."""
    c = np.asarray(continues, dtype=float)
    return np.concatenate([np.ones_like(c[:1]), np.cumprod(c[:-1], axis=0)])


class ReturnScale:
    """EMA of the 5th-95th percentile range of returns."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.value = 0.0

    def update(self, returns: np.ndarray) -> float:
        lo, hi = np.percentile(returns, [5.0, 95.0])
        self.value = self.decay * self.value + (1.0 - self.decay) * float(hi - lo)
        return self.scale

    @property
    def scale(self) -> float:
        return max(1.0, self.value)


def actor_loss(actor: Actor, rollout: ImaginedRollout, returns: np.ndarray, scale: float = 1.0,
               weights: np.ndarray | None = None):
    """``-mean(w * (adv * log pi + eta * H))`` with stop-gradient advantages."""
    H, N = returns.shape
    feats = rollout.features[:-1].reshape(H * N, -1)
    adv = ((returns - rollout.values[:-1]) / scale).reshape(H * N)
    w = (np.ones((H, N)) if weights is None else weights).reshape(H * N)
    raw = rollout.raw.reshape(H * N, *rollout.raw.shape[2:])
    logp = actor.log_prob(feats, raw)
    ent = actor.entropy(feats)
    eta = actor.cfg.entropy
    loss = -ad.mean((logp * adv + ent * eta) * w)
    return loss, float(np.mean(ent.value))


def critic_loss(critic: Critic, rollout: ImaginedRollout, returns: np.ndarray,
                weights: np.ndarray | None = None):
    """Continue-weighted twohot NLL of stop-gradient returns."""
    H, N = returns.shape
    feats = rollout.features[:-1].reshape(H * N, -1)
    w = (np.ones((H, N)) if weights is None else weights).reshape(H * N)
    nll = twohot_nll(critic.logits(feats), returns.reshape(H * N), critic.grid)
    return ad.mean(nll * w)


class Agent:
    """Actor, critic, their optimizers and the return normalizer."""

    def __init__(self, feature_dim: int, act_dim: int, cfg: AgentConfig | None = None, ticks: int = 8,
                 params: NeuronParams | None = None, seed: int = 0):
        self.cfg = cfg = cfg or AgentConfig()
        self.actor = Actor(feature_dim, act_dim, cfg, ticks, params, seed)
        self.critic = Critic(feature_dim, cfg, ticks, params, seed)
        self.actor_opt = Adam(self.actor.parameters(), AdamConfig(lr=cfg.actor_lr, clip_norm=cfg.clip_norm))
        self.critic_opt = Adam(self.critic.parameters(), AdamConfig(lr=cfg.critic_lr, clip_norm=cfg.clip_norm))
        self.return_scale = ReturnScale(cfg.return_decay)
        self.rng = np.random.default_rng([seed, 0xA6E7])

    def policy(self, features, mode: str = "explore") -> PolicyOutput:
        return act(self.actor, features, mode, self.rng)

    def train_step(self, wm: WorldModel, start: WorldModelState) -> dict[str, float]:
        cfg = self.cfg
        if cfg.imag_starts and start.batch > cfg.imag_starts:
            idx = np.sort(self.rng.choice(start.batch, cfg.imag_starts, replace=False))
            start = WorldModelState.from_arrays([a[idx] for a in start.arrays()], start.step_index)
        roll = imagine(self.actor, self.critic, wm, start, cfg.horizon, self.rng)
        returns = lambda_returns(roll.rewards, roll.continues, roll.values, cfg.gamma, cfg.lam)
        weights = continue_weights(roll.continues)
        scale = self.return_scale.update(returns)
        self.actor.zero_grad()
        self.critic.zero_grad()
        with Tape() as tape:
            a_loss, ent = actor_loss(self.actor, roll, returns, scale, weights)
            c_loss = critic_loss(self.critic, roll, returns, weights)
            total = a_loss + c_loss
            if not np.isfinite(total.value):
                raise NumericError(f"non-finite agent loss: actor {a_loss.value}, critic {c_loss.value}")
            tape.backward(total)
        a_norm = self.actor_opt.step()
        c_norm = self.critic_opt.step()
        return {"actor_loss": float(a_loss.value), "critic_loss": float(c_loss.value),
                "imag_return": float(returns.mean()), "entropy": ent, "return_scale": scale,
                "value_mean": float(roll.values.mean()), "actor_grad_norm": a_norm,
                "critic_grad_norm": c_norm}


def agent_train_step(agent: Agent, wm: WorldModel, replay_batch) -> dict[str, float]:
    """Posterior states from a replay batch, then one imagination update."""
    _, _, _, states = wm.observe_sequence(replay_batch, agent.rng, keep_states=True)
    return agent.train_step(wm, WorldModelState.concat(states))
