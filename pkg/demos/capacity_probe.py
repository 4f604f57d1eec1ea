"""Plasticity as target-fitting capacity.

A probe is a random network of the agent's architecture plus a dataset of
observations it collected itself. A checkpoint's capacity loss is what is
left after fitting a copy of it to the probe's outputs for a fixed budget.
A network whose penultimate ReLUs are all dead cannot move its features, so
it stays stuck near the best constant output; a fresh network fits.

    python demos/capacity_probe.py
"""

from ppo_repr.capacity import CapacityBudget, capacity_loss, make_capacity_probe
from ppo_repr.diagnostics import dead_neurons
from ppo_repr.environments import EnvConfig
from ppo_repr.networks import MlpSpec, init_mlp, mlp_graph
from ppo_repr.ppo import env_dims


def collapse(params):
    params.arrays["hidden.1.weight"][...] = 0.0
    params.arrays["hidden.1.bias"][...] = -1.0
    return params


def main() -> None:
    env = EnvConfig()
    obs_dim, n_actions = env_dims(env)
    actor = MlpSpec(obs_dim, (64, 64), "relu", "categorical", n_actions)
    critic = MlpSpec(obs_dim, (64, 64), "relu", "value")
    print(f"{'probe':>5} {'head':>7} {'target':>10} {'fresh':>10} {'collapsed':>10}")
    for seed in range(3):
        probe = make_capacity_probe(actor, critic, env, CapacityBudget(), seed=seed)
        for head, spec, target in (("actor", actor, probe.target_actor), ("critic", critic, probe.target_critic)):
            dead = collapse(init_mlp(spec, 100 + seed))
            _, features = mlp_graph(spec, dead.bind(), probe.observations)
            assert dead_neurons(features, "relu") == spec.hidden_widths[-1]
            losses = [capacity_loss(p, probe, head) for p in (target, init_mlp(spec, 100 + seed), dead)]
            print(f"{seed:>5} {head:>7} " + " ".join(f"{x:>10.2e}" for x in losses))


if __name__ == "__main__":
    main()
