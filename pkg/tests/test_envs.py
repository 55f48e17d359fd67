import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spikewm.container import read_container
from spikewm.envs import (EnvSpec, PendulumLite, ReplayBuffer, SparseReacherLite, Trajectory, WMBatch, buffer_add,
                          buffer_sample, env_reset, env_step, load_episodes, make_env, rollout, save_episodes,
                          wrap_angle)
from spikewm.errors import ContractError, FormatError


def _episode(n, offset=0.0, act_dim=1, obs_dim=3):
    first = np.zeros(n, dtype=bool)
    first[0] = True
    t = np.arange(n, dtype=float) + offset
    return Trajectory(np.repeat(t[:, None], obs_dim, 1), np.repeat(t[:, None], act_dim, 1), t.copy(),
                      np.ones(n), first)


# ---------------------------------------------------------------- pendulum

def test_spec_contract():
    with pytest.raises(ContractError):
        EnvSpec(0, 1, 10)
    with pytest.raises(ContractError):
        EnvSpec(1, 1, 1)
    with pytest.raises(ContractError):
        make_env("cartpole")


@given(x=st.floats(-100, 100))
def test_wrap_angle_range(x):
    w = wrap_angle(x)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(x), abs_tol=1e-9)


def test_reset_deterministic_and_bounded():
    env = PendulumLite()
    a, b = env_reset(env, 7), env_reset(env, 7)
    np.testing.assert_array_equal(a, b)
    thetas = set()
    for s in range(100):
        o = env.reset(s)
        assert np.all(np.abs(o) <= 1.0)
        thetas.add(env.theta)
    assert len(thetas) == 100


def test_upright_reward_zero():
    env = PendulumLite()
    env.set_state(0.0, 0.0)
    _, r, c = env_step(env, np.zeros(1))
    assert r == 0.0 and c == 1.0


def test_reward_normalised_nonpositive():
    env = PendulumLite()
    rng = np.random.default_rng(0)
    env.reset(0)
    for _ in range(1000):
        _, r, _ = env.step(rng.uniform(-1, 1, 1))
        assert -1.0 <= r <= 0.0


def test_speed_clipped_over_random_steps():
    env = PendulumLite(max_episode_steps=10_000)
    rng = np.random.default_rng(1)
    env.reset(1)
    for _ in range(10_000):
        env.step(rng.uniform(-1, 1, 1))
        assert abs(env.omega) <= 8.0


def test_small_oscillation_period():
    env = PendulumLite(max_episode_steps=1000)
    env.set_state(math.pi - 0.05, 0.0)
    dev = []
    for _ in range(400):
        env.step(np.zeros(1))
        dev.append(wrap_angle(env.theta - math.pi))
    dev = np.array(dev)
    up = np.where((dev[:-1] < 0) & (dev[1:] >= 0))[0]
    period_steps = np.mean(np.diff(up))
    analytic = 2 * math.pi / math.sqrt(1.5 * 10.0) / 0.05
    assert abs(period_steps - analytic) / analytic < 0.10


def test_action_clipping_counted():
    env = PendulumLite()
    env.reset(0)
    env.step(np.array([5.0]))
    env.step(np.array([0.5]))
    assert env.clip_count == 1


def test_continue_zero_only_at_limit():
    env = PendulumLite(max_episode_steps=5)
    traj = rollout(env, lambda o, t: np.zeros(1), seed=3)
    assert len(traj) == 6
    assert traj.continues.tolist() == [1, 1, 1, 1, 1, 0]
    assert traj.actions[0].tolist() == [0.0] and traj.is_first.tolist() == [True] + [False] * 5


def test_replayed_actions_reproduce_trajectory():
    rng = np.random.default_rng(2)
    for name in ("pendulum-lite", "sparse-reacher-lite"):
        env = make_env(name, 50)
        t1 = rollout(env, lambda o, t: rng.uniform(-1, 1, env.spec.act_dim), seed=9)
        log = t1.actions[1:]
        t2 = rollout(make_env(name, 50), lambda o, t: log[t], seed=9)
        for a, b in zip(t1.to_arrays().values(), t2.to_arrays().values()):
            np.testing.assert_array_equal(a, b)


def test_render_shape_and_orientation():
    env = PendulumLite()
    env.set_state(0.0, 0.0)
    img = env.render()
    assert img.shape == (16, 16) and img.min() >= 0 and img.max() <= 1
    assert img[:8].sum() > img[8:].sum()   # upright rod is in the top half
    env.set_state(math.pi, 0.0)
    assert env.render()[8:].sum() > env.render()[:8].sum()


# ----------------------------------------------------------------- reacher

def test_reacher_reward_sparse():
    env = SparseReacherLite()
    obs = env.reset(4)
    assert obs.shape == (10,)
    env.goal = env.fingertip().copy()
    _, r, _ = env.step(np.zeros(2))
    assert r == 1.0
    env.goal = -env.fingertip()
    _, r, _ = env.step(np.zeros(2))
    assert r == 0.0


# ------------------------------------------------------------------ replay

def test_sample_whole_episode():
    buf = ReplayBuffer(1000)
    ep = _episode(10)
    buffer_add(buf, ep)
    batch = buffer_sample(buf, 3, 10, seed=0)
    for b in range(3):
        np.testing.assert_array_equal(batch.obs[b], ep.obs)
        np.testing.assert_array_equal(batch.is_first[b], ep.is_first)


def test_eviction_keeps_capacity():
    buf = ReplayBuffer(100)
    for i in range(3):
        buf.add(_episode(50, offset=1000 * i))
    assert len(buf) == 100 and len(buf.episodes) == 2
    assert buf.episodes[0].rewards[0] == 1000


def test_eviction_keeps_last_episode():
    buf = ReplayBuffer(10)
    buf.add(_episode(30))
    assert len(buf.episodes) == 1


def test_sampling_deterministic_under_seed():
    buf = ReplayBuffer(1000)
    for i in range(4):
        buf.add(_episode(20 + i, offset=100 * i))
    a, b = buf.sample(8, 5, seed=3), buf.sample(8, 5, seed=3)
    np.testing.assert_array_equal(a.obs, b.obs)


def test_sampling_errors():
    with pytest.raises(ContractError):
        ReplayBuffer(10).sample(1, 2)
    buf = ReplayBuffer(100)
    buf.add(_episode(3))
    with pytest.raises(ContractError):
        buf.sample(1, 5)
    spanning = ReplayBuffer(100, allow_span=True)
    spanning.add(_episode(3))
    spanning.add(_episode(3, offset=10))
    batch = spanning.sample(4, 5, seed=0)
    assert batch.is_first.sum(axis=1).min() >= 1


@given(seed=st.integers(0, 10_000), L=st.integers(2, 12))
def test_replay_never_fabricates(seed, L):
    buf = ReplayBuffer(10_000)
    for i in range(5):
        buf.add(_episode(12 + i, offset=1000 * i))
    batch = buf.sample(6, L, seed=seed)
    for b in range(6):
        r = batch.rewards[b]
        np.testing.assert_array_equal(np.diff(r), 1.0)   # contiguous within one episode
        ep = int(r[0] // 1000)
        off = int(r[0] - 1000 * ep)
        assert off + L <= 12 + ep
        assert batch.is_first[b, 0] == (off == 0) and not batch.is_first[b, 1:].any()


def test_replay_uniform_over_starts():
    buf = ReplayBuffer(1000)
    buf.add(_episode(5))
    buf.add(_episode(9, offset=100))
    batch = buf.sample(20_000, 4, seed=1)
    starts = batch.rewards[:, 0]
    counts = np.array([np.sum(starts == s) for s in [0, 1, 100, 105]])
    expect = 20_000 / 8
    assert np.all(np.abs(counts - expect) < 4 * math.sqrt(expect))


def test_wmbatch_contract():
    with pytest.raises(ContractError):
        WMBatch(np.zeros((1, 1, 3)), np.zeros((1, 1, 1)), np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1), bool))
    with pytest.raises(ContractError):
        WMBatch(np.zeros((1, 2, 3)), np.zeros((1, 2, 1)), np.zeros((1, 2)), np.full((1, 2), 0.5),
                np.ones((1, 2), bool))


# -------------------------------------------------------------- episode log

def test_episode_file_roundtrip(tmp_path):
    env = PendulumLite(20)
    rng = np.random.default_rng(0)
    eps = [rollout(env, lambda o, t: rng.uniform(-1, 1, 1), seed=s) for s in range(3)]
    path = tmp_path / "episodes.swe"
    save_episodes(path, eps, "cfgdigest")
    back = load_episodes(path)
    assert len(back) == 3
    for a, b in zip(eps, back):
        for x, y in zip(a.to_arrays().values(), b.to_arrays().values()):
            np.testing.assert_array_equal(x, y)
    assert read_container(path, b"SWE1")[1] == "cfgdigest"
    with pytest.raises(FormatError):
        read_container(path, b"SWM1")
