import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from paramnoise.agent import (
    AgentKind,
    Batch,
    ConfigError,
    Learner,
    PolicySnapshot,
    ReplayBuffer,
    Trainer,
    TrainerConfig,
    clip_reward,
    compute_target,
    epsilon,
    evaluate_policy,
    td_gradients,
    train_step,
)
from paramnoise.envs import make_env
from paramnoise.networks import Architecture, Kind, init_parameters, q_values, sample_noise


def small_net(kind=Kind.PLAIN, seed=0, inputs=6, actions=3):
    return init_parameters(Architecture(inputs, actions, (8,), kind), np.random.default_rng(seed))


def random_batch(rng, n=5, inputs=6, actions=3):
    return Batch(
        rng.random((n, inputs)),
        rng.integers(0, actions, n),
        rng.uniform(-1, 1, n),
        rng.random((n, inputs)),
        rng.random(n) < 0.3,
    )


def test_epsilon_schedule():
    cfg = TrainerConfig(total_steps=1000)
    assert epsilon(0, cfg) == 1.0
    assert epsilon(50, cfg) == pytest.approx(1.0 - 0.5 * 0.98)
    assert epsilon(100, cfg) == pytest.approx(0.02)
    assert epsilon(10_000, cfg) == pytest.approx(0.02)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainerConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainerConfig(kind="boltzmann")


@given(rewards=st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_clip_reward_bounds(rewards):
    for r in rewards:
        c = clip_reward(r)
        assert -1.0 <= c <= 1.0
        if -1.0 <= r <= 1.0:
            assert c == r


def test_replay_fifo_and_capacity():
    buf = ReplayBuffer(3, 2)
    for i in range(5):
        buf.add(np.full(2, i), i % 2, 0.0, np.full(2, i), False)
    assert len(buf) == 3
    assert [buf.s[j][0] for j in buf.oldest_first()] == [2.0, 3.0, 4.0]
    rng = np.random.default_rng(0)
    drawn = set()
    for _ in range(30):
        drawn |= set(buf.sample(rng, 3).s[:, 0])
    assert drawn == {2.0, 3.0, 4.0}


def test_replay_rejects_unclipped_reward_and_short_sample():
    buf = ReplayBuffer(4, 2)
    with pytest.raises(ValueError):
        buf.add(np.zeros(2), 0, 1.5, np.zeros(2), False)
    with pytest.raises(ValueError):
        buf.sample(np.random.default_rng(0), 1)


def test_terminal_target_is_reward():
    rng = np.random.default_rng(1)
    net = small_net()
    batch = random_batch(rng, 20)
    y = compute_target(batch, net, 0.99)
    q_next = q_values(net, batch.s_next)
    expect = np.where(batch.terminal, batch.r, batch.r + 0.99 * q_next.max(axis=1))
    np.testing.assert_allclose(y, expect, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", [Kind.PLAIN, Kind.NOISY])
def test_kernel_td_gradients_match_autodiff(kind):
    rng = np.random.default_rng(2)
    net = small_net(kind)
    if kind is Kind.NOISY:
        sample_noise(net, rng)
    batch = random_batch(rng)
    y = rng.normal(size=5)
    l1, g1 = td_gradients(net, batch, y, "kernel")
    l2, g2 = td_gradients(net, batch, y, "autodiff")
    assert l1 == pytest.approx(l2, rel=1e-12)
    assert set(g1) == set(g2)
    for name in g1:
        np.testing.assert_allclose(g1[name], g2[name], rtol=1e-9, atol=1e-12)


def _single_transition_learner(lr):
    net = small_net(seed=3)
    learner = Learner.create(net, 8, None)
    s = np.linspace(0, 1, 6)
    learner.buffer.add(s, 1, 1.0, s, True)
    return learner, TrainerConfig(batch_size=1, lr=lr, target_sync=10_000)


def test_repeated_updates_reduce_single_transition_loss():
    learner, cfg = _single_transition_learner(0.05)
    rng = np.random.default_rng(0)
    losses = [train_step(learner, cfg, rng) for _ in range(30)]
    assert losses[-1] < losses[0]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_zero_learning_rate_is_noop():
    learner, cfg = _single_transition_learner(0.0)
    before = copy.deepcopy(learner.net)
    train_step(learner, cfg, np.random.default_rng(0))
    for (n1, p1), (_, p2) in zip(before.parameters(), learner.net.parameters()):
        np.testing.assert_array_equal(p1, p2, err_msg=n1)


def test_target_syncs_every_c_updates():
    learner, cfg = _single_transition_learner(0.05)
    cfg = TrainerConfig(batch_size=1, lr=0.05, target_sync=3)
    rng = np.random.default_rng(0)
    frozen = [w.copy() for w, _ in learner.target.weights()]
    train_step(learner, cfg, rng)
    train_step(learner, cfg, rng)
    for (w, _), f in zip(learner.target.weights(), frozen):
        np.testing.assert_array_equal(w, f)
    train_step(learner, cfg, rng)
    for (w, _), (mw, _) in zip(learner.target.weights(), learner.net.effective_weights()):
        np.testing.assert_array_equal(w, mw)


def test_evaluate_policy_applies_perturber():
    env = make_env("catcher")
    net = small_net(inputs=env.spec.obs_length)
    policy = PolicySnapshot.of(net)
    seen = []

    def perturber(obs):
        seen.append(obs.copy())
        return obs

    returns = evaluate_policy(policy, env, 3, perturber)
    assert len(returns) == 3 and len(seen) > 0
    assert returns == evaluate_policy(policy, env, 3)


@pytest.mark.parametrize("kind", ["eps_greedy", "noisy"])
def test_training_is_deterministic(kind):
    env = make_env("catcher")
    cfg = TrainerConfig(kind=kind, total_steps=300, learning_start=50, eval_every=150, eval_episodes=2,
                        final_eval_episodes=2, hidden=(16,), seed=5)
    runs = [Trainer(make_env("catcher"), cfg).run() for _ in range(2)]
    assert runs[0] == runs[1]
    t = Trainer(env, cfg)
    assert t.config.kind is AgentKind(kind)
