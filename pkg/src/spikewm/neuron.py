"""Discrete-time LIF and multi-compartment neuron (MCN) dynamics.

Everything here is a pure function of numpy arrays. Vectors may carry leading
batch dimensions; weight matrices are stored ``[n_out, n_in]`` and applied as
``x @ w.T``.

MCN update for one tick, in order::

    v_basal  <- v_basal  + (W_b s_in + W_hb s_prev - v_basal) / tau_b
    v_apical <- v_apical + (W_a s_in + W_ha s_prev - v_apical) / tau_a
    h = (g_B / g_L) * (v_basal - u) + W_s s_soma
    z = sigmoid(beta * v_apical)
    u <- u + (z * h - u) / tau
    s = u > v_th
    u <- u * (1 - s)
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from spikewm.errors import ContractError, NumericError, ParameterError


@dataclass(frozen=True)
class NeuronParams:
    """Biophysical constants shared by LIF and MCN neurons.

    Defaults follow the published parameter table; ``alpha`` (surrogate
    width) is not given there and defaults to 2.0, which puts the
    surrogate's support at +-0.5 around threshold.
    """

    tau: float = 2.0
    tau_a: float = 2.0
    tau_b: float = 2.0
    g_B: float = 1.0
    g_L: float = 1.0
    beta: float = 1.0
    v_th: float = 1.0
    v_reset: float = 0.0
    alpha: float = 2.0

    def __post_init__(self):
        for name in ("tau", "tau_a", "tau_b"):
            if not getattr(self, name) >= 1.0:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.g_L > 0:
            raise ParameterError(f"g_L must be > 0, got {self.g_L}")
        if not self.g_B >= 0:
            raise ParameterError(f"g_B must be >= 0, got {self.g_B}")
        if not self.beta > 0:
            raise ParameterError(f"beta must be > 0, got {self.beta}")
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha}")
        if not self.v_th > self.v_reset:
            raise ParameterError("v_th must exceed v_reset")

    @property
    def conductance_ratio(self) -> float:
        return self.g_B / self.g_L

    def with_(self, **changes) -> "NeuronParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class MCNWeights:
    w_b: np.ndarray
    w_hb: np.ndarray
    w_a: np.ndarray
    w_ha: np.ndarray
    w_s: np.ndarray

    def __post_init__(self):
        n_out = self.w_b.shape[0]
        if self.w_hb.shape != (n_out, n_out) or self.w_ha.shape != (n_out, n_out):
            raise ContractError("recurrent weights must be square with side n_out")
        if self.w_a.shape != self.w_b.shape:
            raise ContractError("w_a and w_b must have the same shape")
        if self.w_s.shape[0] != n_out:
            raise ContractError("w_s must have n_out rows")
        for name in ("w_b", "w_hb", "w_a", "w_ha", "w_s"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"{name} contains non-finite entries")

    @property
    def n_out(self) -> int:
        return self.w_b.shape[0]

    @property
    def n_in(self) -> int:
        return self.w_b.shape[1]

    @property
    def n_soma_in(self) -> int:
        return self.w_s.shape[1]


@dataclass(frozen=True)
class MCNCellState:
    v_basal: np.ndarray
    v_apical: np.ndarray
    u: np.ndarray
    s: np.ndarray

    @classmethod
    def zeros(cls, n: int, batch: tuple[int, ...] = ()) -> "MCNCellState":
        z = np.zeros(batch + (n,))
        return cls(z, z.copy(), z.copy(), z.copy())


@dataclass(frozen=True)
class LIFCellState:
    u: np.ndarray
    s: np.ndarray

    @classmethod
    def zeros(cls, n: int, batch: tuple[int, ...] = ()) -> "LIFCellState":
        z = np.zeros(batch + (n,))
        return cls(z, z.copy())


def _finite(name: str, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite input to {name}")


def lif_step(state: LIFCellState, x, params: NeuronParams):
    """Euler step ``u' = u + (x - u)/tau`` with hard reset to ``v_reset``."""
    x = np.asarray(x, dtype=float)
    if x.shape != state.u.shape:
        raise ContractError(f"drive shape {x.shape} != state shape {state.u.shape}")
    _finite("lif_step", x, state.u)
    u = state.u + (x - state.u) / params.tau
    spikes = (u > params.v_th).astype(float)
    u = np.where(spikes > 0, params.v_reset, u)
    return LIFCellState(u, spikes), spikes


def dendrite_step(v, x, tau_d: float):
    if not tau_d >= 1.0:
        raise ParameterError(f"dendritic decay must be >= 1, got {tau_d}")
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    if v.shape != x.shape:
        raise ContractError(f"shape mismatch {v.shape} vs {x.shape}")
    return v + (x - v) / tau_d


def gate(v_apical, beta: float):
    """Apical gate ``1 / (1 + exp(-beta * v))``, strictly inside (0, 1)."""
    if not beta > 0:
        raise ParameterError("beta must be > 0")
    v = np.asarray(v_apical, dtype=float)
    _finite("gate", v)
    return open_unit(stable_sigmoid(beta * v))


def stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_FINFO = np.finfo(float)


def open_unit(p):
    """Clamp into the open interval (0, 1); float64 sigmoids round to 0 or 1 past |x| ~ 37."""
    return np.clip(p, _FINFO.tiny, 1.0 - _FINFO.epsneg)


def mcn_step(state: MCNCellState, s_in, s_h_prev, s_soma_in, w: MCNWeights,
             params: NeuronParams):
    """One tick of the multi-compartment neuron. Returns ``(state', s_h)``."""
    s_in = np.asarray(s_in, dtype=float)
    s_h_prev = np.asarray(s_h_prev, dtype=float)
    s_soma_in = np.asarray(s_soma_in, dtype=float)
    if s_in.shape[-1] != w.n_in or s_h_prev.shape[-1] != w.n_out \
            or s_soma_in.shape[-1] != w.n_soma_in:
        raise ContractError("input widths do not match weight shapes")
    if state.u.shape[-1] != w.n_out:
        raise ContractError("state width does not match weights")
    _finite("mcn_step", s_in, s_h_prev, s_soma_in, state.u, state.v_basal, state.v_apical)

    x_b = s_in @ w.w_b.T + s_h_prev @ w.w_hb.T
    x_a = s_in @ w.w_a.T + s_h_prev @ w.w_ha.T
    v_b = dendrite_step(state.v_basal, np.broadcast_to(x_b, state.v_basal.shape), params.tau_b)
    v_a = dendrite_step(state.v_apical, np.broadcast_to(x_a, state.v_apical.shape), params.tau_a)
    h = params.conductance_ratio * (v_b - state.u) + s_soma_in @ w.w_s.T
    z = gate(v_a, params.beta)
    u = state.u + (z * h - state.u) / params.tau
    s_h = (u > params.v_th).astype(float)
    u = u * (1.0 - s_h)
    return MCNCellState(v_b, v_a, u, s_h), s_h


def surrogate_grad(x, alpha: float):
    """Triangular pseudo-derivative ``max(0, alpha - alpha^2 |x|)``.

    Peak ``alpha`` at 0, support ``[-1/alpha, 1/alpha]``, unit integral.
    """
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) <= 1.0 / alpha, alpha - alpha * alpha * np.abs(x), 0.0)


def tau_from_raw(raw):
    """Map an unconstrained scalar to a decay constant ``>= 1``."""
    return 1.0 + np.logaddexp(0.0, raw)


def raw_from_tau(tau):
    if np.any(np.asarray(tau) <= 1.0):
        raise ParameterError("learnable decay must start strictly above 1")
    return np.log(np.expm1(np.asarray(tau, dtype=float) - 1.0))
