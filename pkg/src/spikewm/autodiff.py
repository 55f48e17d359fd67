"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Usage::

    w = Tracked(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * x).sum()
    tape.backward(loss)
    w.grad   # == x

Operations only record onto the innermost active tape, and only when at
least one input requires a gradient; outside a tape everything evaluates
eagerly with no bookkeeping (used for rollouts and finite differences).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from spikewm.errors import ContractError, NumericError
from spikewm.neuron import open_unit, stable_sigmoid, surrogate_grad

_TAPES: list["Tape"] = []
_SMOOTH_BETA: list[float] = []


class Tracked:
    """An array that can take part in differentiation."""

    __slots__ = ("value", "_grad", "node_id", "requires_grad", "name")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        v = np.asarray(value, dtype=np.float64)
        # ascontiguousarray would promote 0-d values to shape (1,)
        self.value = v if v.flags.c_contiguous else np.ascontiguousarray(v)
        self._grad = None
        self.node_id = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = None if g is None else np.asarray(g, dtype=np.float64)

    def zero_grad(self):
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tracked{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.value)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        if isinstance(o, (int, float)):
            return scale(self, o)
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, (int, float)):
            return scale(self, 1.0 / o)
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    out: Tracked
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of operations; replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._done = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def _append(self, out: Tracked, inputs: tuple, backward: Callable):
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tracked):
        if self._done:
            raise ContractError("backward already ran on this tape; call reset() first")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar-shaped, got {loss.shape}")
        nid = loss.node_id
        if nid is None or nid >= len(self.nodes) or self.nodes[nid].out is not loss:
            raise ContractError("loss was not recorded on this tape")
        self._done = True
        loss._grad = np.ones_like(loss.value)
        owned: set[int] = set()  # grad buffers safe to update in place
        for node in reversed(self.nodes[: nid + 1]):
            g = node.out._grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if isinstance(gi, _SliceGrad):
                    if id(inp) not in owned:
                        inp._grad = np.zeros_like(inp.value) if inp._grad is None else inp._grad.copy()
                        owned.add(id(inp))
                    gi.add_into(inp._grad)
                elif inp._grad is None:
                    inp._grad = gi
                else:
                    inp._grad = inp._grad + gi
                    owned.add(id(inp))

    def reset(self):
        for node in self.nodes:
            node.out._grad = None
        self._done = False


def backward(tape: Tape, loss: Tracked):
    tape.backward(loss)


@contextlib.contextmanager
def smooth_spikes(beta: float = 10.0):
    """Replace the Heaviside spike forward with ``sigmoid(beta * (u - v_th))``.

    Only meant for finite-difference checks of whole networks; inside this
    context the backward of :func:`spike` is the exact derivative of the
    smooth forward.
    """
    _SMOOTH_BETA.append(beta)
    try:
        yield
    finally:
        _SMOOTH_BETA.pop()


def is_recording() -> bool:
    return bool(_TAPES)


def _t(x) -> Tracked:
    return x if isinstance(x, Tracked) else Tracked(x)


def _make(value, inputs: tuple, backward: Callable) -> Tracked:
    out = Tracked(value)
    if _TAPES:
        for i in inputs:
            if i.requires_grad:
                out.requires_grad = True
                _TAPES[-1]._append(out, inputs, backward)
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------- arithmetic

def add(a, b) -> Tracked:
    a, b = _t(a), _t(b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tracked:
    a, b = _t(a), _t(b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tracked:
    a, b = _t(a), _t(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tracked:
    a, b = _t(a), _t(b)
    _check_broadcast(a.value, b.value, "div")
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise NumericError("division by zero")
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def scale(a, c: float) -> Tracked:
    a = _t(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,))


def square(a) -> Tracked:
    a = _t(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def maximum(a, c: float) -> Tracked:
    """Elementwise ``max(a, c)`` against a constant; gradient flows where ``a > c``."""
    a = _t(a)
    av = a.value
    mask = av > c
    return _make(np.where(mask, av, c), (a,), lambda g: (g * mask,))


def leaky(v, x, k) -> Tracked:
    """Fused Euler relaxation ``v + (x - v) * k``."""
    v, x, k = _t(v), _t(x), _t(k)
    vv, xv, kv = v.value, x.value, k.value
    diff = xv - vv
    out = vv + diff * kv
    return _make(out, (v, x, k),
                 lambda g: (_unbroadcast(g * (1.0 - kv), vv.shape),
                            _unbroadcast(g * kv, xv.shape),
                            _unbroadcast(g * diff, kv.shape)))


def matmul(a, b) -> Tracked:
    a, b = _t(a), _t(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ContractError("matmul needs operands of rank >= 2; use linear() for vectors")
    if av.shape[-1] != bv.shape[-2]:
        raise ContractError(f"matmul: inner dims {av.shape} @ {bv.shape}")
    return _make(av @ bv, (a, b),
                 lambda g: (_unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape),
                            _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))


def linear(x, w, b=None) -> Tracked:
    """``x @ w.T (+ b)`` with ``w`` stored ``[n_out, n_in]``; ``x`` may carry batch dims."""
    x, w = _t(x), _t(w)
    xv, wv = x.value, w.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
        raise ContractError(f"linear: input {xv.shape} incompatible with weight {wv.shape}")
    out = xv @ wv.T
    if b is None:
        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            return g @ wv, g2.T @ xv.reshape(-1, xv.shape[-1])
        return _make(out, (x, w), bw)
    b = _t(b)
    out = out + b.value

    def bwb(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wv, g2.T @ xv.reshape(-1, xv.shape[-1]), g2.sum(axis=0)
    return _make(out, (x, w, b), bwb)


# ------------------------------------------------------------------- elementwise

def sigmoid(a, open_interval: bool = False) -> Tracked:
    """Logistic function; ``open_interval`` keeps outputs strictly inside (0, 1)."""
    a = _t(a)
    s = stable_sigmoid(a.value)
    if open_interval:
        s = open_unit(s)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tracked:
    a = _t(a)
    t = np.tanh(a.value)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tracked:
    a = _t(a)
    e = np.exp(a.value)
    if not np.all(np.isfinite(e)):
        raise NumericError("exp overflow")
    return _make(e, (a,), lambda g: (g * e,))


def log(a) -> Tracked:
    a = _t(a)
    av = a.value
    if np.any(av <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(av), (a,), lambda g: (g / av,))


def softplus(a) -> Tracked:
    a = _t(a)
    av = a.value
    return _make(np.logaddexp(0.0, av), (a,), lambda g: (g * stable_sigmoid(av),))


def _check_finite(a: np.ndarray, op: str):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{op} on non-finite input")


def softmax(a, axis: int = -1) -> Tracked:
    a = _t(a)
    _check_finite(a.value, "softmax")
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tracked:
    a = _t(a)
    _check_finite(a.value, "log_softmax")
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# -------------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims: bool = False) -> Tracked:
    a = _t(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tracked:
    a = _t(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


# ------------------------------------------------------------------------- shape

def reshape(a, shape) -> Tracked:
    a = _t(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ContractError(f"cannot reshape {old} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i: int, j: int) -> Tracked:
    a = _t(a)
    return _make(np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


class _SliceGrad:
    """Gradient of a slice, scattered into the parent's buffer in place."""

    __slots__ = ("idx", "g", "basic")

    def __init__(self, idx, g, basic):
        self.idx, self.g, self.basic = idx, g, basic

    def add_into(self, buf: np.ndarray):
        if self.basic:
            buf[self.idx] += self.g
        else:
            np.add.at(buf, self.idx, self.g)


def getitem(a, idx) -> Tracked:
    a = _t(a)
    basic = _is_basic(idx)
    return _make(a.value[idx], (a,), lambda g: (_SliceGrad(idx, g, basic),))


def concat(xs: Sequence, axis: int = -1) -> Tracked:
    xs = tuple(_t(x) for x in xs)
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as e:
        raise ContractError(f"concat: {e}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tracked:
    xs = tuple(_t(x) for x in xs)
    try:
        out = np.stack([x.value for x in xs], axis=axis)
    except ValueError as e:
        raise ContractError(f"stack: {e}") from None
    n = len(xs)
    return _make(out, xs, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def detach(a) -> Tracked:
    """Stop-gradient: same value, no history."""
    return Tracked(_t(a).value)


# ----------------------------------------------------------------------- spiking

def spike(u, v_th: float, alpha: float) -> Tracked:
    """Heaviside spike ``u > v_th`` whose backward is the triangular surrogate."""
    u = _t(u)
    x = u.value - v_th
    if _SMOOTH_BETA:
        beta = _SMOOTH_BETA[-1]
        s = stable_sigmoid(beta * x)
        return _make(s, (u,), lambda g: (g * beta * s * (1.0 - s),))
    out = (x > 0).astype(np.float64)
    return _make(out, (u,), lambda g: (g * surrogate_grad(x, alpha),))


# -------------------------------------------------------------- gradient checks

def grad_check(f: Callable[[], Tracked], params: Sequence[Tracked], eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is re-evaluated for every perturbed element, so keep it small.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if loss.node_id is not None and tape.nodes and tape.nodes[loss.node_id].out is loss:
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(np.sum(_t(f()).value))
            flat[i] = orig - eps
            fm = float(np.sum(_t(f()).value))
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = float(a.flat[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------- optimizer

@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float = 100.0


def clip_by_global_norm(grads: Sequence[np.ndarray], clip_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if clip_norm and norm > clip_norm:
        factor = clip_norm / norm
        grads = [g * factor for g in grads]
    return grads, norm


class Adam:
    """Adaptive-moment optimizer with global-norm clipping and bias correction."""

    def __init__(self, params: Sequence[Tracked], config: AdamConfig | None = None):
        self.params = list(params)
        self.config = config or AdamConfig()
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, grads: Sequence[np.ndarray] | None = None) -> float:
        """Apply one update in place; returns the pre-clip global gradient norm."""
        cfg = self.config
        if grads is None:
            grads = [p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {p.name or '?'}")
        grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.value -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.t = int(arrays["t"][0])
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"m{i}"]
            self.v[i][...] = arrays[f"v{i}"]


def optimizer_step(optimizer: Adam, grads: Sequence[np.ndarray] | None = None) -> float:
    return optimizer.step(grads)
