import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from paramnoise.agent import clip_reward
from paramnoise.envs import BRIGHT, DIM, EnvError, EnvSpec, make_env, optimal_values

NAMES = ["grid_pursuit", "catcher"]


@pytest.mark.parametrize("name", NAMES)
def test_reset_is_deterministic_and_frames_equal(name):
    env = make_env(name)
    a, b = env.reset(7), env.reset(7)
    np.testing.assert_array_equal(a, b)
    n = env.spec.width * env.spec.height
    assert a.shape == (env.spec.obs_length,)
    np.testing.assert_array_equal(a[:n], a[n:])
    assert set(np.unique(a)) <= {0.0, DIM, BRIGHT}


def test_grid_pursuit_render_rule():
    env = make_env("grid_pursuit")
    for seed in range(20):
        obs = env.reset(seed)
        frame = obs[-64:]
        assert np.sum(frame == BRIGHT) == 1 and np.sum(frame == DIM) == 1


def test_catcher_initial_layout():
    env = make_env("catcher")
    w, h = env.spec.width, env.spec.height
    for seed in range(20):
        frame = env.reset(seed)[-w * h:].reshape(h, w)
        assert np.sum(frame[0] == BRIGHT) == 1
        assert np.sum(frame[-1] == DIM) == 1


def test_grid_pursuit_capture_rewards_and_terminates():
    env = make_env("grid_pursuit")
    patrol = env.patrol
    nr, nc = patrol[1]
    # agent directly above the prey's next cell
    env.reset_to((nr - 1, nc, 0)) if nr > 0 else env.reset_to((nr + 1, nc, 0))
    res = env.step(1 if nr > 0 else 0)
    assert res.reward == 1.0 and res.terminal


def test_grid_pursuit_walls_clamp_and_step_cost():
    env = make_env("grid_pursuit")
    env.reset_to((0, 0, 0))
    res = env.step(0)
    assert env.state[:2] == (0, 0)
    assert res.reward == pytest.approx(-0.01) and not res.terminal


def test_catcher_catch_and_miss():
    env = make_env("catcher")
    h = env.spec.height
    env.reset_to((h - 2, 3, 3))
    res = env.step(1)
    assert (res.reward, res.terminal) == (1.0, True)
    env.reset_to((h - 2, 3, 5))
    assert env.step(1).reward == -1.0


def test_step_after_terminal_and_bad_action_raise():
    env = make_env("catcher")
    env.reset_to((env.spec.height - 2, 0, 0))
    env.step(1)
    with pytest.raises(EnvError):
        env.step(1)
    env.reset(0)
    with pytest.raises(EnvError):
        env.step(3)


def test_episode_cap_terminates():
    env = make_env("grid_pursuit", episode_cap=10)
    env.reset_to((0, 0, 0))
    results = [env.step(0) for _ in range(10)]
    assert results[-1].terminal and not any(r.terminal for r in results[:-1])


def test_spec_validation():
    with pytest.raises(ValueError):
        EnvSpec("x", 3, 8, 10, 4)
    with pytest.raises(ValueError):
        EnvSpec("x", 8, 8, 9, 4)
    with pytest.raises(ValueError):
        make_env("pong")


@pytest.mark.parametrize("name", NAMES)
@given(seed=st.integers(0, 10_000), actions=st.lists(st.integers(0, 2), min_size=1, max_size=30))
def test_determinism_and_decoding(name, seed, actions):
    env, twin = make_env(name), make_env(name)
    o1 = env.reset(seed)
    np.testing.assert_array_equal(o1, twin.reset(seed))
    for a in actions:
        assert env.decode(o1) == env.state
        r1, r2 = env.step(a), twin.step(a)
        np.testing.assert_array_equal(r1.obs, r2.obs)
        assert r1.reward == r2.reward and r1.reward in env.rewards
        assert clip_reward(r1.reward) == r1.reward
        o1 = r1.obs
        if r1.terminal:
            break
        assert env.decode(o1) == env.state
        n = env.spec.width * env.spec.height
        # newest frame last
        np.testing.assert_array_equal(o1[n:], env.render(env.state))


def test_value_iteration_gamma_zero_is_best_immediate_reward():
    env = make_env("catcher")
    table = optimal_values(env, 0.0)
    for s, v in table.values.items():
        best = max(env.transition(s, a)[1] for a in range(3))
        assert v == best


def test_terminal_adjacent_value_is_one():
    env = make_env("catcher")
    h = env.spec.height
    for gamma in (0.5, 0.99):
        table = optimal_values(env, gamma)
        assert table.values[(h - 2, 4, 4)] == 1.0


@pytest.mark.parametrize("name", NAMES)
def test_oracle_rollouts_match_start_values(name):
    env = make_env(name)
    gamma = 0.99
    table = optimal_values(env, gamma)
    assert table.residual < 1e-10
    for seed in range(50):
        obs = env.reset(seed)
        s0 = env.state
        ret, disc, done = 0.0, 1.0, False
        while not done:
            res = env.step(table.policy[env.decode(obs)])
            ret += disc * res.reward
            disc *= gamma
            obs, done = res.obs, res.terminal
        assert ret == pytest.approx(table.values[s0], abs=1e-9)


def test_state_cap_enforced():
    with pytest.raises(ValueError):
        optimal_values(make_env("grid_pursuit"), 0.9, max_states=10)
