import numpy as np
import pytest

from ppo_repr.environments import EnvConfig, EnvPool
from ppo_repr.networks import MlpSpec, init_actor_critic
from ppo_repr.ppo import PpoConfig, collect_rollout


def small_agent(head="categorical", activation="tanh", obs_dim=3, widths=(5, 4), n_out=3,
                shared=False, seed=0):
    actor = MlpSpec(obs_dim, widths, activation, head, n_out)
    critic = MlpSpec(obs_dim, widths, activation, "value")
    return init_actor_critic(actor, critic, seed, shared_trunk=shared)


def chain_rollout(seed=0, n_envs=4, steps=32, widths=(16, 16), shared=False, kind="chain_dense"):
    env = EnvConfig(kind=kind)
    from ppo_repr.ppo import env_dims

    obs_dim, n_out = env_dims(env)
    head = "categorical" if env.discrete else "tanhnormal"
    actor = MlpSpec(obs_dim, widths, "relu", head, n_out)
    critic = MlpSpec(obs_dim, widths, "relu", "value")
    agent = init_actor_critic(actor, critic, seed, shared_trunk=shared)
    pool = EnvPool(env, list(range(100, 100 + n_envs)), None)
    batch = collect_rollout(agent, pool, steps, np.random.default_rng(seed))
    cfg = PpoConfig(n_envs=n_envs, steps_per_env=steps, minibatch_size=min(32, n_envs * steps))
    return agent, batch, cfg


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
