"""Synthetic long-memory spike tasks, the SPK1 event format and a classifier
training loop used to compare MCN and LIF networks on long sequences."""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spikewm import autodiff as ad
from spikewm.errors import ContractError, FormatError, NumericError
from spikewm.layers import LIFDenseLayer, MCNLayer, Module, ReadoutLayer
from spikewm.neuron import NeuronParams

log = logging.getLogger(__name__)

CUE_TICKS = 5
KINDS = ("delayed-recall", "sequential-parity")


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "delayed-recall"
    T: int = 100
    delay: int = 30
    n_classes: int = 4
    channels: int = 20
    jitter: float = 0.01
    seed: int = 0
    pulse_rate: float = 0.1  # parity only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}")
        if self.T < 1 or self.channels < 1 or self.n_classes < 2:
            raise ContractError("T, channels must be >= 1 and n_classes >= 2")
        if not 0 <= self.jitter < 0.5:
            raise ContractError("jitter must lie in [0, 0.5)")
        if self.kind == "delayed-recall":
            if not 0 <= self.delay < self.T:
                raise ContractError("delay must satisfy 0 <= delay < T")
            if self.T < self.delay + 2 * CUE_TICKS:
                raise ContractError("T too short for cue + delay + trigger")
            if self.channels < self.n_classes + 1:
                raise ContractError("need one channel per class plus a trigger channel")
        elif self.n_classes != 2:
            raise ContractError("sequential parity has exactly two classes")

    @property
    def population(self) -> int:
        return self.channels // (self.n_classes + 1)

    def readout_start(self) -> int:
        """First tick of the window the classifier reads its answer from."""
        if self.kind == "delayed-recall":
            return CUE_TICKS + self.delay
        return max(0, self.T - CUE_TICKS)


@dataclass
class SpikeSequenceSample:
    spikes: np.ndarray  # [T, channels] uint8
    label: int
    meta: dict = field(default_factory=dict)


@dataclass
class SpikeDataset:
    """Immutable batch of samples stored densely as ``[n, T, channels]``."""

    spikes: np.ndarray
    labels: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.spikes = np.asarray(self.spikes, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.spikes.ndim != 3 or len(self.labels) != len(self.spikes):
            raise ContractError("spikes must be [n, T, channels] with one label per sample")
        if np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
            raise ContractError("label out of range")
        self.spikes.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> SpikeSequenceSample:
        return SpikeSequenceSample(self.spikes[i], int(self.labels[i]), dict(self.meta))

    @property
    def T(self) -> int:
        return self.spikes.shape[1]

    @property
    def channels(self) -> int:
        return self.spikes.shape[2]

    def split(self, frac: float = 0.8) -> tuple["SpikeDataset", "SpikeDataset"]:
        k = int(round(frac * len(self)))
        return (SpikeDataset(self.spikes[:k], self.labels[:k], self.n_classes, self.meta),
                SpikeDataset(self.spikes[k:], self.labels[k:], self.n_classes, self.meta))


def gen_delayed_recall(cfg: TaskConfig, n: int) -> SpikeDataset:
    """Cue burst (ticks 0-4) -> ``delay`` noisy silent ticks -> trigger burst.

    Class ``k`` fires population ``k`` during the cue; the trigger population
    is the last one. Every other (tick, channel) fires with probability
    ``jitter``. Labels are assigned round-robin.
    """
    if cfg.kind != "delayed-recall":
        raise ContractError("config is not a delayed-recall task")
    rng = np.random.default_rng([cfg.seed, 0xDE1A])
    pop = cfg.population
    trig = slice(cfg.n_classes * pop, (cfg.n_classes + 1) * pop)
    t0 = CUE_TICKS + cfg.delay
    spikes = (rng.random((n, cfg.T, cfg.channels)) < cfg.jitter).astype(np.uint8)
    labels = np.arange(n) % cfg.n_classes
    for i, k in enumerate(labels):
        spikes[i, :CUE_TICKS, :] = 0
        spikes[i, :CUE_TICKS, k * pop:(k + 1) * pop] = 1
        spikes[i, t0:t0 + CUE_TICKS, :] = 0
        spikes[i, t0:t0 + CUE_TICKS, trig] = 1
    meta = {"kind": cfg.kind, "delay": cfg.delay, "seed": cfg.seed}
    return SpikeDataset(spikes, labels, cfg.n_classes, meta)


def gen_sequential_parity(cfg: TaskConfig, n: int) -> SpikeDataset:
    """Random pulses on channel 0; the label is the parity of the pulse count."""
    if cfg.kind != "sequential-parity":
        raise ContractError("config is not a sequential-parity task")
    rng = np.random.default_rng([cfg.seed, 0x9A21])
    spikes = np.zeros((n, cfg.T, cfg.channels), dtype=np.uint8)
    spikes[:, :, 0] = rng.random((n, cfg.T)) < cfg.pulse_rate
    labels = parity_label(spikes)
    return SpikeDataset(spikes, labels, 2, {"kind": cfg.kind, "seed": cfg.seed})


def parity_label(spikes: np.ndarray) -> np.ndarray:
    return (np.asarray(spikes)[..., 0].sum(axis=-1) % 2).astype(np.int64)


def generate(cfg: TaskConfig, n: int) -> SpikeDataset:
    if cfg.kind == "delayed-recall":
        return gen_delayed_recall(cfg, n)
    return gen_sequential_parity(cfg, n)


_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
        return x ^ (x >> np.uint64(31))


def counter_uniform(seed: int, sample_id: int, T: int, dim: int) -> np.ndarray:
    """Uniforms in [0, 1) keyed by (seed, sample id, tick, channel)."""
    t = np.arange(T, dtype=np.uint64)[:, None]
    c = np.arange(dim, dtype=np.uint64)[None, :]
    with np.errstate(over="ignore"):
        key = _splitmix64(np.uint64(seed) * np.uint64(0x100000001B3) + np.uint64(sample_id))
        x = _splitmix64(key ^ (t * np.uint64(0x1000193) + c * np.uint64(0x9E3779B1)))
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def rate_encode(x, T: int, sample_id: int = 0, seed: int = 0) -> np.ndarray:
    """Bernoulli rate code: channel ``i`` spikes at tick ``t`` iff ``u[t, i] < x[i]``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if np.any((x < 0) | (x > 1)):
        log.warning("rate_encode: %d value(s) outside [0, 1] clipped", int(np.sum((x < 0) | (x > 1))))
        x = np.clip(x, 0.0, 1.0)
    u = counter_uniform(seed, sample_id, T, x.size)
    return (u < x[None, :]).astype(np.uint8)


# ------------------------------------------------------------------ SPK1 format

SPK1_MAGIC = b"SPK1"
_HEADER = struct.Struct("<4sIIII")
_SAMPLE = struct.Struct("<HI")


def write_spk1(path, dataset: SpikeDataset):
    n, T, C = dataset.spikes.shape
    if T > 0xFFFF or C > 0xFFFF:
        raise ContractError("SPK1 stores ticks and channels as u16")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(SPK1_MAGIC, T, C, n, dataset.n_classes))
    for spikes, label in zip(dataset.spikes, dataset.labels):
        t, ch = np.nonzero(spikes)
        buf.write(_SAMPLE.pack(int(label), len(t)))
        ev = np.empty((len(t), 2), dtype="<u2")
        ev[:, 0], ev[:, 1] = t, ch
        buf.write(ev.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_spk1(path) -> SpikeDataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated SPK1 header", 0)
    magic, T, C, n, n_classes = _HEADER.unpack_from(data, 0)
    if magic != SPK1_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if n_classes < 1:
        raise FormatError("n_classes must be >= 1", 16)
    off = _HEADER.size
    spikes = np.zeros((n, T, C), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        if off + _SAMPLE.size > len(data):
            raise FormatError(f"truncated header of sample {i}", off)
        label, n_ev = _SAMPLE.unpack_from(data, off)
        if label >= n_classes:
            raise FormatError(f"label {label} >= n_classes {n_classes}", off)
        off += _SAMPLE.size
        end = off + 4 * n_ev
        if end > len(data):
            raise FormatError(f"truncated events of sample {i}", off)
        ev = np.frombuffer(data, dtype="<u2", count=2 * n_ev, offset=off).reshape(-1, 2)
        bad = np.nonzero((ev[:, 0] >= T) | (ev[:, 1] >= C))[0]
        if len(bad):
            raise FormatError(f"event out of range in sample {i}", off + 4 * int(bad[0]))
        spikes[i, ev[:, 0], ev[:, 1]] = 1
        labels[i] = label
        off = end
    if off != len(data):
        raise FormatError("trailing bytes after last sample", off)
    return SpikeDataset(spikes, labels, n_classes)


# ------------------------------------------------------------------ classifiers

class SequenceClassifier(Module):
    """Spiking layer over the input train plus a leaky readout of the final window."""

    def __init__(self, kind: str, channels: int, n_hidden: int, n_classes: int,
                 params: NeuronParams | None = None, rng: np.random.Generator | None = None,
                 tau_ro: float = 8.0, learnable_decay: bool = False,
                 input_scale: float = 3.0, recurrent_scale: float = 1.0,
                 self_gain_b: float = 0.0, self_gain_a: float = 0.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = kind
        if kind == "mcn":
            self.body = MCNLayer(channels, n_hidden, channels, params, rng,
                                 input_scale=input_scale, recurrent_scale=recurrent_scale,
                                 soma_scale=input_scale, self_gain_b=self_gain_b,
                                 self_gain_a=self_gain_a, learnable_decay=learnable_decay)
        elif kind == "lif":
            self.body = LIFDenseLayer(channels, n_hidden, params, rng, weight_scale=input_scale,
                                      learnable_decay=learnable_decay)
        else:
            raise ContractError(f"unknown neuron type {kind!r}")
        self.readout = ReadoutLayer(n_hidden, n_classes, tau_ro, rng, bias=True)

    def logits(self, spikes, window_start: int):
        """``spikes`` is ``[T, B, channels]``; returns ``[B, n_classes]``."""
        if self.kind == "mcn":
            s_h, _ = self.body.forward(spikes, spikes)
        else:
            s_h, _ = self.body.forward(spikes)
        return self.readout.forward(s_h[window_start:])


def mcn_param_count(channels: int, n: int, n_classes: int) -> int:
    return 3 * n * channels + 2 * n * n + n * n_classes + n_classes


def lif_param_count(channels: int, n: int, n_classes: int) -> int:
    return n * channels + n + n * n_classes + n_classes


def matched_lif_width(channels: int, n_mcn: int, n_classes: int) -> int:
    """LIF width whose parameter count is closest to the MCN network's."""
    target = mcn_param_count(channels, n_mcn, n_classes)
    per = channels + 1 + n_classes
    return max(1, int(round((target - n_classes) / per)))


def build_classifier(kind: str, cfg: TaskConfig, n_hidden: int, params: NeuronParams | None = None,
                     seed: int = 0, **kw) -> SequenceClassifier:
    rng = np.random.default_rng([seed, 0xC1A5])
    width = n_hidden if kind == "mcn" else matched_lif_width(cfg.channels, n_hidden, cfg.n_classes)
    return SequenceClassifier(kind, cfg.channels, width, cfg.n_classes, params, rng, **kw)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    clip_norm: float = 100.0
    seed: int = 0


@dataclass
class CurveRow:
    epoch: int
    split: str
    accuracy: float
    loss: float


def cross_entropy(logits, labels: np.ndarray):
    onehot = np.eye(logits.shape[-1])[labels]
    return -ad.tsum(ad.log_softmax(logits) * onehot, axis=-1)


def evaluate(model: SequenceClassifier, data: SpikeDataset, window_start: int,
             batch_size: int = 256) -> tuple[float, float]:
    correct, total_loss = 0, 0.0
    for i in range(0, len(data), batch_size):
        x = np.swapaxes(data.spikes[i:i + batch_size], 0, 1).astype(float)
        y = data.labels[i:i + batch_size]
        logits = model.logits(x, window_start)
        total_loss += float(cross_entropy(logits, y).value.sum())
        correct += int((logits.value.argmax(-1) == y).sum())
    n = max(len(data), 1)
    return correct / n, total_loss / n


def train_classifier(model: SequenceClassifier, dataset: SpikeDataset, epochs: int,
                     cfg: TrainConfig, window_start: int, on_epoch=None):
    """Cross-entropy training with BPTT; returns ``(curve, final_test_accuracy)``.

    Epoch 0 is the evaluation before any update.
    """
    train, test = dataset.split(0.8)
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    opt = ad.Adam(model.parameters(), ad.AdamConfig(lr=cfg.lr, clip_norm=cfg.clip_norm))
    curve: list[CurveRow] = []

    def record(epoch):
        for split, data in (("train", train), ("test", test)):
            acc, loss = evaluate(model, data, window_start)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite {split} loss at epoch {epoch}")
            curve.append(CurveRow(epoch, split, acc, loss))
        if on_epoch is not None:
            on_epoch(curve[-2:])

    record(0)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x = np.swapaxes(train.spikes[idx], 0, 1).astype(float)
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = ad.mean(cross_entropy(model.logits(x, window_start), train.labels[idx]))
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            tape.backward(loss)
            opt.step()
        record(epoch)
    return curve, curve[-1].accuracy


def write_curve_csv(path, curve: list[CurveRow]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "split", "accuracy", "loss"])
        for row in curve:
            w.writerow([row.epoch, row.split, repr(float(row.accuracy)), repr(float(row.loss))])
