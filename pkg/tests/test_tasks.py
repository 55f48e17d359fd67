import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spikewm.errors import ContractError, FormatError
from spikewm.tasks import (CUE_TICKS, SpikeDataset, TaskConfig, TrainConfig, build_classifier, evaluate,
                           gen_delayed_recall, gen_sequential_parity, generate, lif_param_count,
                           matched_lif_width, mcn_param_count, parity_label, rate_encode, read_spk1,
                           train_classifier, write_curve_csv, write_spk1)

RECALL = TaskConfig(T=40, delay=20, n_classes=4, channels=20, jitter=0.02, seed=3)


# ---------------------------------------------------------------- generators

def test_task_config_validation():
    with pytest.raises(ContractError):
        TaskConfig(delay=100, T=100)
    with pytest.raises(ContractError):
        TaskConfig(jitter=0.5)
    with pytest.raises(ContractError):
        TaskConfig(kind="copy")
    with pytest.raises(ContractError):
        TaskConfig(kind="sequential-parity", n_classes=3)


def test_delayed_recall_deterministic_and_binary():
    a, b = gen_delayed_recall(RECALL, 50), gen_delayed_recall(RECALL, 50)
    np.testing.assert_array_equal(a.spikes, b.spikes)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert set(np.unique(a.spikes)) <= {0, 1}
    assert a.spikes.shape == (50, 40, 20)


@given(n=st.integers(1, 200), k=st.integers(2, 6))
def test_class_balance(n, k):
    cfg = TaskConfig(T=20, delay=5, n_classes=k, channels=2 * (k + 1), seed=1)
    counts = np.bincount(gen_delayed_recall(cfg, n).labels, minlength=k)
    assert np.all(np.abs(counts - n / k) <= 1)


def test_cue_sets_label():
    d = gen_delayed_recall(TaskConfig(T=20, delay=0, jitter=0.0, channels=20), 8)
    pop = 4
    for s, y in zip(d.spikes, d.labels):
        assert s[:CUE_TICKS, y * pop:(y + 1) * pop].all()
        assert s[:CUE_TICKS].sum() == CUE_TICKS * pop
        assert s[CUE_TICKS:2 * CUE_TICKS, 16:20].all()   # trigger right after the cue


def test_last_window_independent_of_label():
    d = gen_delayed_recall(TaskConfig(T=40, delay=0, jitter=0.0, channels=20), 12)
    tail = d.spikes[:, -CUE_TICKS:]
    assert all(np.array_equal(tail[0], t) for t in tail)


def _logistic_probe(x_tr, y_tr, x_te, y_te, k, steps=500, lr=0.5):
    mu, sd = x_tr.mean(0), x_tr.std(0) + 1e-9
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd
    W = np.zeros((x_tr.shape[1], k))
    b = np.zeros(k)
    Y = np.eye(k)[y_tr]
    for _ in range(steps):
        z = x_tr @ W + b
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        W -= lr * x_tr.T @ (p - Y) / len(x_tr)
        b -= lr * (p - Y).mean(0)
    return float(((x_te @ W + b).argmax(1) == y_te).mean())


def test_post_cue_probe_at_chance():
    cfg = TaskConfig(T=60, delay=30, n_classes=4, channels=20, jitter=0.05, seed=11)
    d = gen_delayed_recall(cfg, 2000)
    feats = d.spikes[:, CUE_TICKS:].reshape(2000, -1).astype(float)
    acc = _logistic_probe(feats[:1000], d.labels[:1000], feats[1000:], d.labels[1000:], 4)
    assert acc <= 0.25 + 0.05
    # the cue window alone is fully informative
    cue = d.spikes[:, :CUE_TICKS].reshape(2000, -1).astype(float)
    assert _logistic_probe(cue[:1000], d.labels[:1000], cue[1000:], d.labels[1000:], 4) == 1.0


def test_parity_examples():
    s = np.zeros((10, 1), dtype=np.uint8)
    assert parity_label(s) == 0
    s[7, 0] = 1
    assert parity_label(s) == 1
    s[2, 0] = 1
    assert parity_label(s) == 0


@given(seed=st.integers(0, 1000))
def test_parity_dataset_labels(seed):
    cfg = TaskConfig(kind="sequential-parity", T=30, n_classes=2, channels=2, seed=seed)
    d = gen_sequential_parity(cfg, 20)
    np.testing.assert_array_equal(d.labels, d.spikes[:, :, 0].sum(1) % 2)
    np.testing.assert_array_equal(generate(cfg, 20).spikes, d.spikes)


def test_dataset_is_immutable():
    d = gen_delayed_recall(RECALL, 4)
    with pytest.raises(ValueError):
        d.spikes[0, 0, 0] = 1
    with pytest.raises(ContractError):
        SpikeDataset(np.zeros((2, 3, 4)), [0, 5], 2)


# -------------------------------------------------------------- rate encoding

def test_rate_encode_examples():
    assert not rate_encode(np.zeros(3), 50).any()
    assert rate_encode(np.ones(3), 50).all()
    r = rate_encode([0.5], 10_000, sample_id=4)
    assert abs(r.mean() - 0.5) < 0.02


def test_rate_encode_counter_based():
    a = rate_encode([0.3, 0.7], 20, sample_id=5, seed=2)
    np.testing.assert_array_equal(a, rate_encode([0.3, 0.7], 20, sample_id=5, seed=2))
    assert not np.array_equal(a, rate_encode([0.3, 0.7], 20, sample_id=6, seed=2))
    # prefix stability: more ticks never change earlier ones
    np.testing.assert_array_equal(a, rate_encode([0.3, 0.7], 40, sample_id=5, seed=2)[:20])


def test_rate_encode_clips():
    np.testing.assert_array_equal(rate_encode([-1.0, 2.0], 5), rate_encode([0.0, 1.0], 5))


# ------------------------------------------------------------------------ SPK1

def test_spk1_roundtrip(tmp_path):
    d = gen_delayed_recall(RECALL, 30)
    p = tmp_path / "d.spk"
    write_spk1(p, d)
    back = read_spk1(p)
    np.testing.assert_array_equal(back.spikes, d.spikes)
    np.testing.assert_array_equal(back.labels, d.labels)
    assert back.n_classes == 4


def test_spk1_empty_dataset(tmp_path):
    d = gen_delayed_recall(RECALL, 0)
    p = tmp_path / "e.spk"
    write_spk1(p, d)
    assert len(read_spk1(p)) == 0


def _spk1_bytes(events, T=4, C=3, label=1, n_classes=2):
    out = struct.pack("<4sIIII", b"SPK1", T, C, 1, n_classes) + struct.pack("<HI", label, len(events))
    for t, c in events:
        out += struct.pack("<HH", t, c)
    return out


@pytest.mark.parametrize("data, offset", [
    (b"SPK2" + bytes(16), 0),
    (b"SPK1" + bytes(4), 0),
    (_spk1_bytes([(0, 0), (4, 1)]), 30),        # tick out of range: second event
    (_spk1_bytes([(0, 3)]), 26),                # channel out of range
    (_spk1_bytes([(0, 0)], label=2), 20),       # label >= n_classes
    (_spk1_bytes([(0, 0)])[:-2], 26),           # truncated events
    (_spk1_bytes([(0, 0)]) + b"\x00", 30),      # trailing bytes
])
def test_spk1_rejects_malformed(tmp_path, data, offset):
    p = tmp_path / "bad.spk"
    p.write_bytes(data)
    with pytest.raises(FormatError) as e:
        read_spk1(p)
    assert e.value.offset == offset
    assert f"offset {offset}" in str(e.value)


# -------------------------------------------------------------- classifiers

def test_parameter_counts_match_within_five_percent():
    for ch, n, k in [(20, 64, 4), (20, 32, 4), (10, 16, 2), (40, 128, 10)]:
        w = matched_lif_width(ch, n, k)
        assert abs(lif_param_count(ch, w, k) - mcn_param_count(ch, n, k)) / mcn_param_count(ch, n, k) < 0.05
    model = build_classifier("mcn", RECALL, 16)
    assert model.num_params() == mcn_param_count(20, 16, 4)
    lif = build_classifier("lif", RECALL, 16)
    assert lif.num_params() == lif_param_count(20, matched_lif_width(20, 16, 4), 4)


def test_unknown_neuron_kind():
    with pytest.raises(ContractError):
        build_classifier("izhikevich", RECALL, 8)


def test_untrained_model_near_chance():
    cfg = TaskConfig(T=30, delay=10, n_classes=4, channels=20, seed=4)
    d = gen_delayed_recall(cfg, 1000)
    model = build_classifier("mcn", cfg, 16, seed=4)
    acc, loss = evaluate(model, d, cfg.readout_start())
    assert abs(acc - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 1000)
    assert math.isfinite(loss)


@pytest.mark.parametrize("kind", ["mcn", "lif"])
def test_memorize_ten_samples(kind, tmp_path):
    cfg = TaskConfig(T=20, delay=5, n_classes=2, channels=6, jitter=0.1, seed=5)
    d = gen_delayed_recall(cfg, 12)
    model = build_classifier(kind, cfg, 16, seed=0, self_gain_b=6.0, self_gain_a=4.0) if kind == "mcn" \
        else build_classifier(kind, cfg, 16, seed=0)
    curve, _ = train_classifier(model, d, 200, TrainConfig(batch_size=10, lr=1e-2), window_start=0)
    train_acc = [r.accuracy for r in curve if r.split == "train"]
    assert max(train_acc) == 1.0
    assert curve[0].epoch == 0 and curve[-1].epoch == 200
    p = tmp_path / "curve.csv"
    write_curve_csv(p, curve)
    assert p.read_text().splitlines()[0] == "epoch,split,accuracy,loss"


def test_training_bit_deterministic():
    cfg = TaskConfig(T=20, delay=5, n_classes=2, channels=6, seed=6)
    d = gen_delayed_recall(cfg, 20)
    runs = []
    for _ in range(2):
        model = build_classifier("mcn", cfg, 8, seed=1)
        curve, _ = train_classifier(model, d, 3, TrainConfig(batch_size=8), cfg.readout_start())
        runs.append([(r.accuracy, r.loss) for r in curve])
    assert runs[0] == runs[1]
