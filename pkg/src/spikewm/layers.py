"""Differentiable spiking layers, latent heads and likelihoods.

Spike trains are time-major ``[T, B, n]`` arrays. Layers hold their weights as
:class:`~spikewm.autodiff.Tracked` parameters and run the neuron dynamics of
:mod:`spikewm.neuron` tick by tick through the autodiff primitives, so the
same code serves eager rollouts (no tape) and training (inside a tape).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from spikewm import autodiff as ad
from spikewm.autodiff import Tracked
from spikewm.errors import ContractError
from spikewm.neuron import NeuronParams, raw_from_tau

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class Module:
    """Minimal parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tracked]]:
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tracked) and val.requires_grad:
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Tracked]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ContractError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in own.items():
            if arrays[k].shape != p.shape:
                raise ContractError(f"{k}: shape {arrays[k].shape} != {p.shape}")
            p.value[...] = arrays[k]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def param(value, name: str | None = None) -> Tracked:
    return Tracked(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _init(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.normal(0.0, scale / math.sqrt(shape[1]), size=shape)


class _Decays(Module):
    """Fixed or learnable decay constants, exposed as update rates ``1/tau``."""

    def __init__(self, params: NeuronParams, names: tuple[str, ...], learnable: bool):
        self._names = names
        self._fixed = {n: 1.0 / getattr(params, n) for n in names}
        self.learnable = learnable
        for n in names:
            if learnable:
                setattr(self, "raw_" + n, param(raw_from_tau(getattr(params, n)), "raw_" + n))

    def rate(self, name: str):
        if not self.learnable:
            return self._fixed[name]
        tau = ad.softplus(getattr(self, "raw_" + name)) + 1.0
        return ad.div(1.0, tau)

    def taus(self) -> dict[str, float]:
        if not self.learnable:
            return {n: 1.0 / r for n, r in self._fixed.items()}
        return {n: 1.0 + float(np.logaddexp(0.0, getattr(self, "raw_" + n).value)) for n in self._names}


# ---------------------------------------------------------------- LIF layer

@dataclass
class LIFLayerState:
    u: Tracked
    s: Tracked

    @classmethod
    def zeros(cls, batch: int, n: int) -> "LIFLayerState":
        return cls(Tracked(np.zeros((batch, n))), Tracked(np.zeros((batch, n))))


class LIFDenseLayer(Module):
    """Fully connected layer of LIF neurons with hard reset."""

    def __init__(self, n_in: int, n_out: int, params: NeuronParams | None = None,
                 rng: np.random.Generator | None = None, weight_scale: float = 1.0,
                 bias: bool = True, learnable_decay: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = params or NeuronParams()
        self.n_in, self.n_out = n_in, n_out
        self.w_in = param(_init(rng, (n_out, n_in), weight_scale), "w_in")
        self.bias = param(np.zeros(n_out), "bias") if bias else None
        self.decay = _Decays(self.params, ("tau",), learnable_decay)

    def forward(self, spikes_in, state: LIFLayerState | None = None):
        """Drive ``w_in @ spikes_in[t] (+ bias)`` per tick; returns ``(spikes [T,B,n], state)``."""
        spikes_in = ad._t(spikes_in)
        if spikes_in.ndim != 3 or spikes_in.shape[-1] != self.n_in:
            raise ContractError(f"expected [T, B, {self.n_in}] input, got {spikes_in.shape}")
        drive = ad.linear(spikes_in, self.w_in, self.bias)
        T = spikes_in.shape[0]
        return self._run(lambda t: drive[t], T, spikes_in.shape[1], state)

    def forward_current(self, x, T: int, state: LIFLayerState | None = None):
        """Constant real-valued input current ``x [B, n_in]`` held for ``T`` ticks."""
        x = ad._t(x)
        if x.ndim != 2 or x.shape[-1] != self.n_in:
            raise ContractError(f"expected [B, {self.n_in}] current, got {x.shape}")
        drive = ad.linear(x, self.w_in, self.bias)
        return self._run(lambda t: drive, T, x.shape[0], state)

    def _run(self, drive, T: int, batch: int, state):
        if T < 1:
            raise ContractError("need at least one tick")
        p = self.params
        if state is None:
            state = LIFLayerState.zeros(batch, self.n_out)
        k = self.decay.rate("tau")
        u, s = state.u, state.s
        out = []
        for t in range(T):
            u = ad.leaky(u, drive(t), k)
            s = ad.spike(u, p.v_th, p.alpha)
            if p.v_reset == 0.0:
                u = u * (1.0 - s)
            else:
                u = u * (1.0 - s) + s * p.v_reset
            out.append(s)
        return ad.stack(out), LIFLayerState(u, s)


# ---------------------------------------------------------------- MCN layer

@dataclass
class MCNLayerState:
    v_basal: Tracked
    v_apical: Tracked
    u: Tracked
    s: Tracked

    @classmethod
    def zeros(cls, batch: int, n: int) -> "MCNLayerState":
        return cls(*(Tracked(np.zeros((batch, n))) for _ in range(4)))

    def detach(self) -> "MCNLayerState":
        return MCNLayerState(*(ad.detach(x) for x in (self.v_basal, self.v_apical, self.u, self.s)))

    def masked(self, keep: np.ndarray) -> "MCNLayerState":
        """Zero the rows where ``keep`` is 0 (episode starts)."""
        k = keep.reshape(-1, 1)
        return MCNLayerState(*(x * k for x in (self.v_basal, self.v_apical, self.u, self.s)))


class MCNLayer(Module):
    """Recurrent layer of multi-compartment neurons with apical gating.

    The layer's own spikes from the previous tick feed both dendrites through
    ``w_hb`` and ``w_ha``. ``self_gain_*`` adds a multiple of the identity to
    those matrices so a neuron that fires keeps exciting itself (latching
    memory at initialization).
    """

    def __init__(self, n_in: int, n: int, n_soma_in: int | None = None,
                 params: NeuronParams | None = None, rng: np.random.Generator | None = None,
                 input_scale: float = 1.0, recurrent_scale: float = 1.0, soma_scale: float = 1.0,
                 self_gain_b: float = 0.0, self_gain_a: float = 0.0,
                 learnable_decay: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        n_soma_in = n_in if n_soma_in is None else n_soma_in
        self.params = params or NeuronParams()
        self.n_in, self.n, self.n_soma_in = n_in, n, n_soma_in
        self.w_b = param(_init(rng, (n, n_in), input_scale), "w_b")
        self.w_hb = param(_init(rng, (n, n), recurrent_scale) + self_gain_b * np.eye(n), "w_hb")
        self.w_a = param(_init(rng, (n, n_in), input_scale), "w_a")
        self.w_ha = param(_init(rng, (n, n), recurrent_scale) + self_gain_a * np.eye(n), "w_ha")
        self.w_s = param(_init(rng, (n, n_soma_in), soma_scale), "w_s")
        self.decay = _Decays(self.params, ("tau", "tau_a", "tau_b"), learnable_decay)

    def forward(self, s_in, s_soma_in, state: MCNLayerState | None = None, record: bool = False):
        """Run ``T`` ticks. Returns ``(s_h [T,B,n], state')`` or, with ``record``,
        ``(s_h, state', trace)`` where ``trace`` maps v_apical/v_basal/u/z/spike
        to ``[T, B, n]`` arrays (``u`` before reset)."""
        s_in, s_soma_in = ad._t(s_in), ad._t(s_soma_in)
        if s_in.ndim != 3 or s_in.shape[-1] != self.n_in:
            raise ContractError(f"expected [T, B, {self.n_in}] input, got {s_in.shape}")
        if s_soma_in.shape[:2] != s_in.shape[:2] or s_soma_in.shape[-1] != self.n_soma_in:
            raise ContractError(f"somatic input shape {s_soma_in.shape} mismatches")
        T, B = s_in.shape[:2]
        if state is None:
            state = MCNLayerState.zeros(B, self.n)
        p = self.params
        ratio = p.conductance_ratio
        kb, ka, k = self.decay.rate("tau_b"), self.decay.rate("tau_a"), self.decay.rate("tau")
        xb_in = ad.linear(s_in, self.w_b)
        xa_in = ad.linear(s_in, self.w_a)
        xs_in = ad.linear(s_soma_in, self.w_s)
        vb, va, u, s = state.v_basal, state.v_apical, state.u, state.s
        out = []
        trace = {key: [] for key in ("v_apical", "v_basal", "u", "z", "spike")} if record else None
        for t in range(T):
            vb = ad.leaky(vb, xb_in[t] + ad.linear(s, self.w_hb), kb)
            va = ad.leaky(va, xa_in[t] + ad.linear(s, self.w_ha), ka)
            h = (vb - u) * ratio + xs_in[t]
            z = ad.sigmoid(va * p.beta, open_interval=True)
            u = ad.leaky(u, z * h, k)
            s = ad.spike(u, p.v_th, p.alpha)
            if record:
                for key, val in (("v_apical", va), ("v_basal", vb), ("u", u), ("z", z), ("spike", s)):
                    trace[key].append(val.value.copy())
            u = u * (1.0 - s)
            out.append(s)
        result = (ad.stack(out), MCNLayerState(vb, va, u, s))
        if record:
            return result + ({key: np.stack(v) for key, v in trace.items()},)
        return result


# ------------------------------------------------------------------ readouts

def _readout_coeffs(T: int, tau: float) -> np.ndarray:
    k = 1.0 / tau
    return k * (1.0 - k) ** np.arange(T - 1, -1, -1, dtype=float)


def leaky_trace(spikes, tau: float):
    """Final value of ``y <- y + (s - y)/tau`` from zero over a ``[T, B, n]`` train."""
    spikes = ad._t(spikes)
    c = _readout_coeffs(spikes.shape[0], tau).reshape(-1, *([1] * (spikes.ndim - 1)))
    return ad.tsum(spikes * c, axis=0)


class ReadoutLayer(Module):
    """Non-spiking leaky integrator ``y[t] = y[t-1] + (W s[t] - y[t-1]) / tau_ro``."""

    def __init__(self, n: int, m: int, tau_ro: float = 2.0, rng: np.random.Generator | None = None,
                 weight_scale: float = 1.0, bias: bool = False):
        if tau_ro < 1:
            raise ContractError("tau_ro must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n, self.m, self.tau_ro = n, m, tau_ro
        self.w_out = param(_init(rng, (m, n), weight_scale), "w_out")
        self.bias = param(np.zeros(m), "bias") if bias else None

    def forward(self, spikes):
        """Returns ``y[T]`` of shape ``[B, m]`` (bias added after integration)."""
        spikes = ad._t(spikes)
        if spikes.shape[0] < 1 or spikes.shape[-1] != self.n:
            raise ContractError(f"expected [T, B, {self.n}] spikes, got {spikes.shape}")
        return ad.linear(leaky_trace(spikes, self.tau_ro), self.w_out, self.bias)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 weight_scale: float = 1.0, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = param(_init(rng, (n_out, n_in), weight_scale), "w")
        self.b = param(np.zeros(n_out), "b") if bias else None

    def forward(self, x):
        return ad.linear(x, self.w, self.b)


class SpikingHead(Module):
    """Real-valued features -> LIF hidden layer (constant current, T ticks) -> readout."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, ticks: int,
                 params: NeuronParams | None = None, rng: np.random.Generator | None = None,
                 tau_ro: float = 4.0, out_scale: float = 1.0, hidden_scale: float = 2.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.ticks = ticks
        self.hidden = LIFDenseLayer(n_in, n_hidden, params, rng, weight_scale=hidden_scale)
        self.readout = ReadoutLayer(n_hidden, n_out, tau_ro, rng, weight_scale=out_scale, bias=True)

    def forward(self, features):
        spikes, _ = self.hidden.forward_current(features, self.ticks)
        return self.readout.forward(spikes)


# ------------------------------------------------------------------- latents

@dataclass
class CategoricalLatent:
    """Grouped categorical latent; ``sample`` is one-hot, ``st`` carries the
    straight-through gradient (value equal to ``sample``)."""

    logits: Tracked
    probs: np.ndarray
    sample: np.ndarray
    st: Tracked


def unimix_logits(logits, mix: float):
    """Log-probabilities of ``(1 - mix) * softmax(logits) + mix / C``."""
    if mix <= 0:
        return ad.log_softmax(logits)
    C = logits.shape[-1]
    probs = ad.softmax(logits) * (1.0 - mix) + mix / C
    return ad.log(probs)


def latent_sample(logits, rng: np.random.Generator | None = None, mode: str = "sample",
                  mix: float = 0.0) -> CategoricalLatent:
    """Draw one class per group from ``logits [..., G, C]``.

    ``mode="mode"`` takes the argmax instead of sampling.
    """
    logits = ad._t(logits)
    if not np.all(np.isfinite(logits.value)):
        raise ContractError("latent logits must be finite")
    probs_t = ad.softmax(logits) if mix <= 0 else ad.exp(unimix_logits(logits, mix))
    probs = probs_t.value
    C = probs.shape[-1]
    if mode == "mode":
        idx = probs.argmax(axis=-1)
    else:
        rng = rng if rng is not None else np.random.default_rng()
        u = rng.random(probs.shape[:-1] + (1,))
        idx = np.minimum((np.cumsum(probs, axis=-1) < u).sum(axis=-1), C - 1)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    st = probs_t + Tracked(onehot - probs)
    return CategoricalLatent(logits, probs, onehot, st)


def kl_categorical(q_logits, p_logits, free_nats: float = 0.0, free_per_group: bool = False):
    """``sum_groups sum_c q (ln q - ln p)`` over trailing ``[G, C]`` axes.

    Inputs are logits (or log-probabilities). Returns one value per leading
    index. With ``free_nats > 0`` the result is clamped from below, either per
    group or on the group sum.
    """
    q_logits, p_logits = ad._t(q_logits), ad._t(p_logits)
    if q_logits.shape != p_logits.shape:
        raise ContractError(f"KL shapes differ: {q_logits.shape} vs {p_logits.shape}")
    lq = ad.log_softmax(q_logits)
    lp = ad.log_softmax(p_logits)
    per_group = ad.tsum(ad.exp(lq) * (lq - lp), axis=-1)
    if free_nats > 0 and free_per_group:
        per_group = ad.maximum(per_group, free_nats)
    kl = ad.tsum(per_group, axis=-1)
    if free_nats > 0 and not free_per_group:
        kl = ad.maximum(kl, free_nats)
    return kl


@dataclass
class GaussianLatent:
    mean: Tracked
    std: Tracked
    sample: np.ndarray
    st: Tracked  # reparameterized sample


def gaussian_latent_sample(params, rng: np.random.Generator | None = None,
                           mode: str = "sample", min_std: float = 0.1) -> GaussianLatent:
    """Diagonal Gaussian from ``params [..., 2, D]`` (mean row, raw-std row)."""
    params = ad._t(params)
    mean = params[..., 0, :]
    std = ad.softplus(params[..., 1, :]) + min_std
    if mode == "mode":
        eps = np.zeros(mean.shape)
    else:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal(mean.shape)
    st = mean + std * eps
    return GaussianLatent(mean, std, st.value.copy(), st)


def kl_gaussian(q_params, p_params, min_std: float = 0.1, free_nats: float = 0.0):
    q_params, p_params = ad._t(q_params), ad._t(p_params)
    mq, mp = q_params[..., 0, :], p_params[..., 0, :]
    sq = ad.softplus(q_params[..., 1, :]) + min_std
    sp = ad.softplus(p_params[..., 1, :]) + min_std
    ratio = ad.square(sq / sp)
    term = ratio + ad.square((mq - mp) / sp) - 1.0 - ad.log(ratio)
    kl = ad.tsum(term, axis=-1) * 0.5
    if free_nats > 0:
        kl = ad.maximum(kl, free_nats)
    return kl


# --------------------------------------------------------------- likelihoods

def gaussian_nll(mean, target):
    """Unit-variance Gaussian NLL summed over the last axis."""
    mean = ad._t(mean)
    target = np.asarray(target, dtype=float)
    if mean.shape != target.shape:
        raise ContractError(f"shape mismatch {mean.shape} vs {target.shape}")
    d = mean - target
    return ad.tsum(ad.square(d), axis=-1) * 0.5 + 0.5 * LOG_2PI * target.shape[-1]


def bernoulli_nll(logit, target):
    """``-ln Bernoulli(target | sigmoid(logit))``, elementwise."""
    logit = ad._t(logit)
    target = np.asarray(target, dtype=float)
    if logit.shape != target.shape:
        raise ContractError(f"shape mismatch {logit.shape} vs {target.shape}")
    return ad.softplus(logit) - logit * target


def symlog(x):
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(x):
    return np.sign(x) * np.expm1(np.abs(x))


class BinGrid:
    """Bin centres for twohot regression, placed uniformly in symlog space."""

    def __init__(self, n_bins: int = 41, low: float = -20.0, high: float = 20.0,
                 transform: str = "symlog"):
        if n_bins < 2 or not high > low:
            raise ContractError("need at least two bins over a non-empty range")
        self.bins = np.linspace(low, high, n_bins)
        self.transform = transform
        self.clamp_count = 0

    def __len__(self):
        return len(self.bins)

    def forward(self, x):
        return symlog(x) if self.transform == "symlog" else np.asarray(x, dtype=float)

    def inverse(self, y):
        return symexp(y) if self.transform == "symlog" else np.asarray(y, dtype=float)

    @property
    def values(self) -> np.ndarray:
        return self.inverse(self.bins)

    def twohot(self, target) -> np.ndarray:
        """Split each target's mass over its two neighbouring bins (``[..., K]``)."""
        y = self.forward(np.asarray(target, dtype=float))
        if not np.all(np.isfinite(y)):
            raise ContractError("twohot target must be finite")
        lo, hi = self.bins[0], self.bins[-1]
        out_of_range = (y < lo) | (y > hi)
        if np.any(out_of_range):
            n = int(out_of_range.sum())
            self.clamp_count += n
            log.warning("twohot: %d target(s) outside bin range clamped (total %d)", n, self.clamp_count)
            y = np.clip(y, lo, hi)
        K = len(self.bins)
        below = np.clip(np.searchsorted(self.bins, y, side="right") - 1, 0, K - 1)
        above = np.minimum(below + 1, K - 1)
        span = self.bins[above] - self.bins[below]
        w_above = np.where(span > 0, (y - self.bins[below]) / np.where(span > 0, span, 1.0), 0.0)
        enc = np.zeros(y.shape + (K,))
        np.put_along_axis(enc, below[..., None], (1.0 - w_above)[..., None], axis=-1)
        np.put_along_axis(enc, above[..., None],
                          (np.take_along_axis(enc, above[..., None], -1)[..., 0] + w_above)[..., None],
                          axis=-1)
        return enc

    def mean(self, logits) -> np.ndarray:
        """Expected value: softmax-weighted bins mapped back through the transform."""
        v = logits.value if isinstance(logits, Tracked) else np.asarray(logits, dtype=float)
        z = v - v.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        return self.inverse(p @ self.bins)


def twohot_nll(logits, target, grid: BinGrid):
    """Cross-entropy of twohot(target) under ``softmax(logits)``; reduces the last axis."""
    logits = ad._t(logits)
    enc = grid.twohot(target)
    if logits.shape != enc.shape:
        raise ContractError(f"logits {logits.shape} do not match {enc.shape}")
    return -ad.tsum(ad.log_softmax(logits) * enc, axis=-1)
