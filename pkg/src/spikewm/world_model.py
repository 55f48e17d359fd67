"""Spiking world model: MCN recurrent backbone with stochastic latents.

One environment step runs ``ticks`` simulation ticks of every spiking layer:

* the encoder turns the observation into spikes ``S^ob``;
* the fusion layer turns the previous latent and action into spikes ``S^in``;
* the MCN layer consumes ``S^in`` (dendrites and soma) and emits ``S^h``;
* the prior reads ``S^h``; the posterior reads ``S^ob`` and ``S^h``.

Heads (observation, reward, continue) read the feature vector
``[trace(S^h), z]`` through small spiking networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from spikewm import autodiff as ad
from spikewm.autodiff import Adam, AdamConfig, Tape, Tracked
from spikewm.container import CHECKPOINT_MAGIC, read_container, write_container
from spikewm.envs import WMBatch
from spikewm.errors import ConfigError, ContractError, NumericError
from spikewm.layers import (BinGrid, LIFDenseLayer, MCNLayer, MCNLayerState, Module, ReadoutLayer,
                            SpikingHead, bernoulli_nll, gaussian_latent_sample, gaussian_nll,
                            kl_categorical, kl_gaussian, latent_sample, leaky_trace,
                            twohot_nll, unimix_logits)
from spikewm.neuron import NeuronParams

LOSS_KEYS = ("pred_obs", "pred_reward", "pred_continue", "dyn_kl", "rep_kl")


@dataclass(frozen=True)
class WMConfig:
    ticks: int = 8
    enc_units: int = 64
    fuse_units: int = 64
    hidden: int = 64
    head_units: int = 64
    latent: str = "categorical"   # or "gaussian"
    groups: int = 8
    classes: int = 8
    unimix: float = 0.01
    free_nats: float = 1.0
    free_per_group: bool = False
    kl_balance: bool = True
    dyn_weight: float = 0.5
    rep_weight: float = 0.1
    obs_weight: float = 1.0
    feat_tau: float = 4.0
    enc_scale: float = 3.0
    fuse_scale: float = 4.0
    mcn_input_scale: float = 6.0
    mcn_recurrent_scale: float = 1.0
    self_gain_b: float = 2.0
    self_gain_a: float = 2.0
    reward_bins: int = 41
    learnable_decay: bool = False

    def __post_init__(self):
        if self.latent not in ("categorical", "gaussian"):
            raise ConfigError(f"latent must be categorical or gaussian, got {self.latent!r}")
        for name in ("ticks", "enc_units", "fuse_units", "hidden", "head_units", "groups", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.unimix < 1.0:
            raise ConfigError("unimix must lie in [0, 1)")
        if self.feat_tau < 1.0:
            raise ConfigError("feat_tau must be >= 1")

    @property
    def latent_dim(self) -> int:
        return self.groups * self.classes

    @property
    def feature_dim(self) -> int:
        return self.hidden + self.latent_dim


@dataclass
class WorldModelState:
    """Recurrent MCN state, latent sample ``z`` (flattened), and the ``S^h`` trace."""

    mcn: MCNLayerState
    z: Tracked
    feat_h: Tracked
    step_index: int = 0

    @property
    def batch(self) -> int:
        return self.z.shape[0]

    def detach(self) -> "WorldModelState":
        return WorldModelState(self.mcn.detach(), ad.detach(self.z), ad.detach(self.feat_h), self.step_index)

    def arrays(self) -> list[np.ndarray]:
        m = self.mcn
        return [m.v_basal.value, m.v_apical.value, m.u.value, m.s.value, self.z.value, self.feat_h.value]

    @classmethod
    def from_arrays(cls, arrays, step_index: int = 0) -> "WorldModelState":
        vb, va, u, s, z, f = (Tracked(np.array(a)) for a in arrays)
        return cls(MCNLayerState(vb, va, u, s), z, f, step_index)

    @staticmethod
    def concat(states: list["WorldModelState"]) -> "WorldModelState":
        parts = [np.concatenate(xs) for xs in zip(*(s.arrays() for s in states))]
        return WorldModelState.from_arrays(parts, states[0].step_index)


@dataclass
class HeadOutput:
    reward_logits: Tracked
    reward_mean: np.ndarray
    cont_logit: Tracked
    cont_prob: np.ndarray
    obs_mean: Tracked


class WorldModel(Module):
    def __init__(self, obs_dim: int, act_dim: int, cfg: WMConfig | None = None,
                 params: NeuronParams | None = None, seed: int = 0):
        cfg = cfg or WMConfig()
        params = params or NeuronParams()
        rng = np.random.default_rng([seed, 0x3D11])
        self.cfg, self.params = cfg, params
        self.obs_dim, self.act_dim = obs_dim, act_dim
        D, F, T = cfg.latent_dim, cfg.feature_dim, cfg.ticks
        n_stats = D if cfg.latent == "categorical" else 2 * D
        self.grid = BinGrid(cfg.reward_bins)
        ld = cfg.learnable_decay
        self.encoder = LIFDenseLayer(obs_dim, cfg.enc_units, params, rng, cfg.enc_scale, learnable_decay=ld)
        self.fuse = LIFDenseLayer(D + act_dim, cfg.fuse_units, params, rng, cfg.fuse_scale, learnable_decay=ld)
        self.mcn = MCNLayer(cfg.fuse_units, cfg.hidden, cfg.fuse_units, params, rng,
                            input_scale=cfg.mcn_input_scale, recurrent_scale=cfg.mcn_recurrent_scale,
                            self_gain_b=cfg.self_gain_b, self_gain_a=cfg.self_gain_a, learnable_decay=ld)
        self.prior = ReadoutLayer(cfg.hidden, n_stats, cfg.feat_tau, rng, bias=True)
        self.post_obs = ReadoutLayer(cfg.enc_units, n_stats, cfg.feat_tau, rng)
        self.post_h = ReadoutLayer(cfg.hidden, n_stats, cfg.feat_tau, rng, bias=True)
        self.decoder = SpikingHead(F, cfg.head_units, obs_dim, T, params, rng)
        self.reward = SpikingHead(F, cfg.head_units, len(self.grid), T, params, rng, out_scale=0.0)
        self.cont = SpikingHead(F, cfg.head_units, 1, T, params, rng)

    # --------------------------------------------------------------- state

    def initial_state(self, batch: int) -> WorldModelState:
        cfg = self.cfg
        if cfg.latent == "categorical":
            z = np.full((batch, cfg.latent_dim), 1.0 / cfg.classes)
        else:
            z = np.zeros((batch, cfg.latent_dim))
        return WorldModelState(MCNLayerState.zeros(batch, cfg.hidden), Tracked(z),
                               Tracked(np.zeros((batch, cfg.hidden))), 0)

    def reset_rows(self, state: WorldModelState, keep: np.ndarray) -> WorldModelState:
        """Replace rows with ``keep == 0`` by the initial state."""
        keep = np.asarray(keep, dtype=float).reshape(-1, 1)
        if np.all(keep == 1.0):
            return state
        init = self.initial_state(state.batch)
        z = state.z * keep + init.z.value * (1.0 - keep)
        return WorldModelState(state.mcn.masked(keep), z, state.feat_h * keep, state.step_index)

    # -------------------------------------------------------------- pieces

    def encode(self, obs) -> Tracked:
        obs = np.asarray(obs, dtype=float)
        if not np.all(np.isfinite(obs)):
            raise NumericError("observation contains non-finite values")
        spikes, _ = self.encoder.forward_current(obs, self.cfg.ticks)
        return spikes

    def fuse_prev(self, z_prev, a_prev) -> Tracked:
        """``S^in``: spikes ``[ticks, B, fuse_units]`` from the previous latent and action."""
        a_prev = ad._t(np.asarray(a_prev, dtype=float) if not isinstance(a_prev, Tracked) else a_prev)
        x = ad.concat([ad._t(z_prev), a_prev], axis=-1)
        spikes, _ = self.fuse.forward_current(x, self.cfg.ticks)
        return spikes

    def _core(self, prev: WorldModelState, a_prev, record: bool = False):
        s_in = self.fuse_prev(prev.z, a_prev)
        out = self.mcn.forward(s_in, s_in, prev.mcn, record=record)
        s_h, mcn_state = out[0], out[1]
        feat_h = leaky_trace(s_h, self.cfg.feat_tau)
        prior = self._shape_stats(self.prior.forward(s_h))
        if record:
            return s_h, mcn_state, feat_h, prior, out[2]
        return s_h, mcn_state, feat_h, prior

    def _shape_stats(self, flat: Tracked) -> Tracked:
        cfg = self.cfg
        B = flat.shape[0]
        if cfg.latent == "categorical":
            return flat.reshape(B, cfg.groups, cfg.classes)
        return flat.reshape(B, 2, cfg.latent_dim)

    def _sample(self, stats: Tracked, rng, mode: str) -> Tracked:
        B = stats.shape[0]
        if self.cfg.latent == "categorical":
            lat = latent_sample(stats, rng, mode, self.cfg.unimix)
        else:
            lat = gaussian_latent_sample(stats, rng, mode)
        return lat.st.reshape(B, self.cfg.latent_dim)

    def posterior_from(self, s_ob: Tracked, s_h: Tracked) -> Tracked:
        return self._shape_stats(self.post_obs.forward(s_ob) + self.post_h.forward(s_h))

    # ----------------------------------------------------------- interface

    def observe_step(self, prev: WorldModelState, a_prev, obs, rng=None, mode: str = "sample",
                     record: bool = False):
        """Returns ``(posterior state, posterior stats, prior stats)``; with
        ``record`` a fourth item holds the MCN per-tick internals."""
        s_ob = self.encode(np.asarray(obs, dtype=float).reshape(prev.batch, self.obs_dim))
        core = self._core(prev, a_prev, record)
        s_h, mcn_state, feat_h, prior = core[:4]
        post = self.posterior_from(s_ob, s_h)
        z = self._sample(post, rng, mode)
        out = (WorldModelState(mcn_state, z, feat_h, prev.step_index + 1), post, prior)
        return out + (core[4],) if record else out

    def imagine_step(self, state: WorldModelState, action, rng=None, mode: str = "sample") -> WorldModelState:
        _, mcn_state, feat_h, prior = self._core(state, action)
        z = self._sample(prior, rng, mode)
        return WorldModelState(mcn_state, z, feat_h, state.step_index + 1)

    def features(self, state: WorldModelState) -> Tracked:
        return ad.concat([state.feat_h, state.z], axis=-1)

    def predict_heads(self, state_or_features) -> HeadOutput:
        f = state_or_features
        if isinstance(f, WorldModelState):
            f = self.features(f)
        f = ad._t(f)
        r = self.reward.forward(f)
        c = self.cont.forward(f)[..., 0]
        o = self.decoder.forward(f)
        return HeadOutput(r, self.grid.mean(r), c, 1.0 / (1.0 + np.exp(-c.value)), o)

    def reward_mean(self, features) -> np.ndarray:
        return self.grid.mean(self.reward.forward(features))

    def cont_prob(self, features) -> np.ndarray:
        c = self.cont.forward(features).value[..., 0]
        return 1.0 / (1.0 + np.exp(-c))

    def kl_terms(self, post: Tracked, prior: Tracked):
        """Per-row ``(dyn, rep)`` KL terms with stop-gradients and free nats."""
        cfg = self.cfg
        if cfg.latent == "categorical":
            q, p = unimix_logits(post, cfg.unimix), unimix_logits(prior, cfg.unimix)
            kl = lambda a, b: kl_categorical(a, b, cfg.free_nats, cfg.free_per_group)
        else:
            q, p = post, prior
            kl = lambda a, b: kl_gaussian(a, b, free_nats=cfg.free_nats)
        if not cfg.kl_balance:
            both = kl(q, p)
            return both, both
        return kl(ad.detach(q), p), kl(q, ad.detach(p))

    def observe_sequence(self, batch: WMBatch, rng=None, mode: str = "sample", keep_states: bool = False):
        """Posterior rollout over a ``[B, L]`` batch.

        The state is zeroed at the start of every sequence and wherever
        ``is_first`` is set. Returns features ``[L, B, F]``, posterior and prior
        statistics ``[L, B, ...]`` and optionally the per-step states.
        """
        B, L = batch.shape
        s_ob = self.encode(batch.obs.reshape(B * L, self.obs_dim))
        T = s_ob.shape[0]
        s_ob = s_ob.reshape(T, B, L, s_ob.shape[-1])
        post_obs = self.post_obs.forward(s_ob)  # [B, L, stats]
        state = self.initial_state(B)
        feats, posts, priors, states = [], [], [], []
        for t in range(L):
            first = batch.is_first[:, t]
            a_prev = batch.actions[:, t]
            if np.any(first):
                keep = 1.0 - first.astype(float)
                state = self.reset_rows(state, keep)
                a_prev = a_prev * keep[:, None]
            s_h, mcn_state, feat_h, prior = self._core(state, a_prev)
            post = self._shape_stats(post_obs[:, t] + self.post_h.forward(s_h))
            z = self._sample(post, rng, mode)
            state = WorldModelState(mcn_state, z, feat_h, state.step_index + 1)
            feats.append(self.features(state))
            posts.append(post)
            priors.append(prior)
            if keep_states:
                states.append(state.detach())
        return ad.stack(feats), ad.stack(posts), ad.stack(priors), states


@dataclass
class LossResult:
    total: Tracked
    components: dict[str, float]
    features: Tracked
    states: list = field(default_factory=list)


def wm_loss(model: WorldModel, batch: WMBatch, rng=None, mode: str = "sample",
            keep_states: bool = False) -> LossResult:
    """Mean over ``B * L`` of prediction NLLs plus weighted KL terms."""
    B, L = batch.shape
    cfg = model.cfg
    feats, post, prior, states = model.observe_sequence(batch, rng, mode, keep_states)
    F = feats.shape[-1]
    flat = feats.reshape(L * B, F)
    heads = model.predict_heads(flat)
    tm = lambda a: np.swapaxes(a, 0, 1).reshape(L * B, *a.shape[2:])
    obs_t, rew_t, cont_t = tm(batch.obs), tm(batch.rewards), tm(batch.continues)
    nll_obs = gaussian_nll(heads.obs_mean, obs_t)
    nll_rew = twohot_nll(heads.reward_logits, rew_t, model.grid)
    nll_cont = bernoulli_nll(heads.cont_logit, cont_t)
    dyn, rep = model.kl_terms(post, prior)
    if cfg.kl_balance:
        kl_total = dyn * cfg.dyn_weight + rep * cfg.rep_weight
    else:
        kl_total = dyn
    per_step = nll_obs * cfg.obs_weight + nll_rew + nll_cont + kl_total.reshape(L * B)
    total = ad.mean(per_step)
    comps = {"pred_obs": float(nll_obs.value.mean()), "pred_reward": float(nll_rew.value.mean()),
             "pred_continue": float(nll_cont.value.mean()), "dyn_kl": float(dyn.value.mean()),
             "rep_kl": float(rep.value.mean())}
    if not np.isfinite(total.value):
        raise NumericError(f"non-finite world-model loss; components {comps}")
    return LossResult(total, comps, feats, states)


class WMTrainer:
    """World model plus its optimizer."""

    def __init__(self, model: WorldModel, opt: AdamConfig | None = None, seed: int = 0):
        self.model = model
        self.opt = Adam(model.parameters(), opt or AdamConfig())
        self.rng = np.random.default_rng([seed, 0x7A1E])

    def step(self, batch: WMBatch, keep_states: bool = False) -> tuple[dict[str, float], LossResult]:
        self.model.zero_grad()
        with Tape() as tape:
            res = wm_loss(self.model, batch, self.rng, keep_states=keep_states)
            tape.backward(res.total)
        norm = self.opt.step()
        metrics = dict(res.components, loss=float(res.total.value), grad_norm=norm)
        return metrics, res


def wm_train_step(trainer: WMTrainer, batch: WMBatch) -> dict[str, float]:
    return trainer.step(batch)[0]


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path, modules: dict[str, Module], digest: str = "",
                    optimizers: dict[str, Adam] | None = None, extra: dict[str, np.ndarray] | None = None):
    """One ``SWM1`` record: ``<part>/<param>`` arrays, ``opt:<part>/...`` moments, ``extra/...``."""
    rec: dict[str, np.ndarray] = {}
    for part, mod in modules.items():
        for name, arr in mod.state_dict().items():
            rec[f"{part}/{name}"] = arr
    for part, opt in (optimizers or {}).items():
        for name, arr in opt.state_arrays().items():
            rec[f"opt:{part}/{name}"] = arr
    for name, arr in (extra or {}).items():
        rec[f"extra/{name}"] = np.asarray(arr, dtype=float)
    write_container(path, CHECKPOINT_MAGIC, [rec], digest)


def load_checkpoint(path, modules: dict[str, Module], optimizers: dict[str, Adam] | None = None):
    """Load arrays into ``modules`` (strict); returns ``(digest, extra arrays)``."""
    records, digest = read_container(path, CHECKPOINT_MAGIC)
    if len(records) != 1:
        raise ContractError(f"checkpoint holds {len(records)} records, expected 1")
    rec = records[0]
    for part, mod in modules.items():
        pre = f"{part}/"
        mod.load_state_dict({k[len(pre):]: v for k, v in rec.items() if k.startswith(pre)})
    for part, opt in (optimizers or {}).items():
        pre = f"opt:{part}/"
        opt.load_state_arrays({k[len(pre):]: v for k, v in rec.items() if k.startswith(pre)})
    extra = {k[6:]: v for k, v in rec.items() if k.startswith("extra/")}
    return digest, extra


def config_fields(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
