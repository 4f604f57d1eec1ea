import numpy as np
import pytest

from ppo_repr.environments import (
    EnvConfig,
    EnvPool,
    GridChainEnv,
    apply_normalizer,
    apply_reward_mask,
    chain_dynamic_programming,
    chain_optimal_return,
    fit_obs_normalizer,
    greedy_actions,
    grid_transition,
    make_env,
    uniform_rollout_observations,
)
from ppo_repr.errors import ConfigurationError, EpisodeFinishedError


def test_defaults_by_kind():
    chain = EnvConfig(kind="chain_dense")
    assert (chain.horizon, chain.sticky_action_prob, chain.normalize_obs) == (64, 0.25, False)
    masked = EnvConfig(kind="chain_sparse_masked")
    assert masked.reward_mask_prob == 0.9
    pm = EnvConfig(kind="point_mass")
    assert (pm.horizon, pm.sticky_action_prob, pm.normalize_obs) == (128, 0.0, True)
    with pytest.raises(ConfigurationError):
        EnvConfig(kind="cartpole")
    with pytest.raises(ConfigurationError):
        EnvConfig(sticky_action_prob=1.0)


def test_grid_transition_rewards():
    nxt, r, term = grid_transition((0, 0), 3)  # right, one step closer
    assert nxt == (0, 1) and np.isclose(r, 0.09) and not term
    nxt, r, term = grid_transition((0, 0), 0)  # bump into the wall
    assert nxt == (0, 0) and np.isclose(r, -0.01)
    nxt, r, term = grid_transition((3, 4), 3)
    assert term and np.isclose(r, 1.09)


def test_observation_layout():
    env = make_env(EnvConfig(sticky_action_prob=0.0), seed=0)
    obs = env.reset()
    assert obs.shape == (29,) and obs[0] == 1.0 and obs[24:28].sum() == 0 and obs[-1] == 0.0
    obs = env.step(1).observation  # down
    assert obs[6] == 1.0 and obs[24 + 1] == 1.0 and obs[-1] == 1 / 64


def test_deterministic_optimal_return_without_stickiness():
    # 8 moves, each +0.1 shaping - 0.01 cost, plus the goal bonus
    assert np.isclose(chain_optimal_return(EnvConfig(sticky_action_prob=0.0)), 8 * 0.09 + 1.0)


def test_dp_matches_monte_carlo_of_greedy_policy():
    cfg = EnvConfig()
    V, Q = chain_dynamic_programming(cfg)
    greedy = greedy_actions(Q)
    env = GridChainEnv(cfg)
    returns = []
    for ep in range(3000):
        env.reset(seed=ep)
        total, t = 0.0, 0
        while True:
            cell = env.pos[0] * 6 + env.pos[1]
            res = env.step(greedy[t, cell, env.prev_action + 1])
            total += res.reward
            t += 1
            if res.terminated or res.truncated:
                break
        returns.append(total)
    se = np.std(returns) / np.sqrt(len(returns))
    assert abs(np.mean(returns) - V[0, 0, 0]) < 4 * se + 1e-12
    assert V[0, 0, 0] < 1.72  # stickiness can only cost


def test_sticky_stream_is_policy_independent():
    a, b = make_env(EnvConfig(), seed=3), make_env(EnvConfig(), seed=3)
    a.reset(), b.reset()
    for t in range(20):
        a.step(t % 4)
        b.step((t * 3) % 4)
    assert a.rng.random() == b.rng.random()


def test_episode_ends_and_step_after_end_raises():
    env = make_env(EnvConfig(horizon=3), seed=0)
    env.reset()
    results = [env.step(0) for _ in range(3)]
    assert results[-1].truncated and not results[-1].terminated
    with pytest.raises(EpisodeFinishedError):
        env.step(0)
    with pytest.raises(ConfigurationError):
        env.reset()
        env.step(7)


def test_reward_mask_expectation():
    rng = np.random.default_rng(0)
    kept = [apply_reward_mask(1.0, 0.9, rng) for _ in range(20000)]
    assert abs(np.mean(kept) - 0.1) < 0.01
    masked = EnvConfig(kind="chain_sparse_masked")
    assert np.isclose(chain_optimal_return(masked), 0.1 * chain_optimal_return(EnvConfig()))


def test_point_mass_dynamics():
    env = make_env(EnvConfig(kind="point_mass"), seed=0)
    obs = env.reset()
    pos = obs[:2].copy()
    res = env.step([5.0, -1.0])  # clipped to (1, -1)
    expected = np.clip(pos + 0.1 * np.array([1.0, -1.0]), -1, 1)
    np.testing.assert_allclose(res.observation[:2], expected)
    assert np.isclose(res.reward, -expected @ expected)
    assert res.observation[2] == 1 / 128


def test_normalizer_leaves_time_column():
    cfg = EnvConfig(kind="point_mass")
    obs = uniform_rollout_observations(cfg, 4, seed=1)
    norm = fit_obs_normalizer(obs, n_episodes=4)
    out = apply_normalizer(norm, obs)
    np.testing.assert_allclose(out[:, :2].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out[:, :2].std(axis=0), 1.0)
    assert np.array_equal(out[:, 2], obs[:, 2])
    with pytest.raises(ConfigurationError):
        fit_obs_normalizer(obs, n_episodes=2)
    with pytest.raises(ConfigurationError):
        apply_normalizer(norm, np.zeros(5))


def test_pool_auto_resets_and_reports_returns():
    pool = EnvPool(EnvConfig(horizon=5), [0, 1], None)
    finished = []
    for _ in range(5):
        _, _, trunc, final_obs, done = pool.step([3, 3])
        finished += done
    assert trunc.all() and len(finished) == 2
    assert pool.obs[:, -1].tolist() == [0.0, 0.0]
    assert final_obs[0, -1] == 5 / 5
