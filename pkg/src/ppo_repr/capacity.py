"""Target-fitting capacity of network checkpoints.

A probe holds a randomly initialized target network and a fixed dataset of
observations collected by that target. The capacity loss of a checkpoint is
the loss left after fitting a copy of it to the target's outputs for a fixed
budget with a freshly constructed optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .environments import EnvConfig, EnvPool, Normalizer
from .errors import ConfigurationError
from .networks import (
    DistParams,
    MlpSpec,
    NetworkParams,
    categorical_log_probs,
    categorical_sample_logprob_entropy,
    dist_from_output,
    init_actor_critic,
    mlp_graph,
    split_tanhnormal,
    tanhnormal_sample_logprob,
)
from .optim import AdamConfig, AdamState, adam_step


@dataclass(frozen=True)
class CapacityBudget:
    dataset_steps: int = 4096
    n_envs: int = 4
    epochs: int = 4
    minibatch_size: int = 256

    def __post_init__(self):
        if self.dataset_steps < 1 or self.n_envs < 1 or self.epochs < 0 or self.minibatch_size < 1:
            raise ConfigurationError("capacity budget entries must be positive")


@dataclass(frozen=True)
class CapacityProbe:
    target_actor: NetworkParams
    target_critic: NetworkParams
    observations: np.ndarray
    target_dist: DistParams
    target_values: np.ndarray
    budget: CapacityBudget
    adam: AdamConfig
    seed: int


def make_capacity_probe(actor_spec: MlpSpec, critic_spec: MlpSpec, env: EnvConfig,
                        budget: CapacityBudget, seed: int, normalizer: Normalizer | None = None,
                        adam: AdamConfig = AdamConfig()) -> CapacityProbe:
    """Initialize a target from the agent's distribution and roll it out once."""
    rng = np.random.default_rng(seed)
    target = init_actor_critic(actor_spec, critic_spec, rng)
    env_seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=budget.n_envs)]
    pool = EnvPool(env, env_seeds, normalizer)
    steps = -(-budget.dataset_steps // budget.n_envs)
    rows = []
    for _ in range(steps):
        obs = pool.obs.copy()
        rows.append(obs)
        out, _ = mlp_graph(actor_spec, target.actor.bind(), obs)
        dist = dist_from_output(actor_spec, out)
        if dist.kind == "categorical":
            actions = categorical_sample_logprob_entropy(dist.logits, rng)[0]
        else:
            actions = tanhnormal_sample_logprob(dist.mean, dist.std, rng)[0]
        pool.step(actions)
    observations = np.concatenate(rows)[: budget.dataset_steps]
    out, _ = mlp_graph(actor_spec, target.actor.bind(), observations)
    vout, _ = mlp_graph(critic_spec, target.critic.bind(), observations)
    return CapacityProbe(target.actor, target.critic, observations, dist_from_output(actor_spec, out),
                         vout.value[:, 0].copy(), budget, adam, seed)


def _fit_loss(net: NetworkParams, leaves, probe: CapacityProbe, idx: np.ndarray, head: str) -> ad.Node:
    out, _ = mlp_graph(net.spec, leaves, probe.observations[idx])
    if head == "critic":
        target = ad.constant(probe.target_values[idx].reshape(-1, 1))
        return ad.reduce(ad.square(ad.sub(out, target)), "mean")
    dist = probe.target_dist.rows(idx)
    n = len(idx)
    if dist.kind == "categorical":
        logp_t = categorical_log_probs(dist.logits)
        p_t = np.exp(logp_t)
        # KL(target || model) = sum p_t log p_t - sum p_t log p_model; the cross-entropy
        # op's gradient vanishes exactly at the target, which keeps Adam from
        # amplifying round-off when the checkpoint already fits
        ent_t = -(p_t * logp_t).sum(axis=1, keepdims=True)
        return ad.reduce(ad.sub(ad.softmax_cross_entropy(out, p_t), ad.constant(ent_t)), "mean")
    # the tanh squashing is a bijection, so the KL is that of the Gaussians:
    #   -log r + (r^2 + d^2) / 2 - 1/2,  r = sd_t / sd,  d = (mu_t - mu) / sd
    # written in r and d so the gradient is exactly zero when model == target
    mean, std = split_tanhnormal(out, net.spec.n_outputs)
    r = ad.div(ad.constant(dist.std), std)
    d = ad.div(ad.sub(ad.constant(dist.mean), mean), std)
    per_dim = ad.add(ad.scale(ad.log(r), -1.0), ad.scale(ad.add(ad.square(r), ad.square(d)), 0.5))
    kl = ad.add(ad.sum_rows(per_dim), ad.constant(np.full((n, 1), -0.5 * net.spec.n_outputs)))
    return ad.reduce(kl, "mean")


def capacity_loss(checkpoint: NetworkParams, probe: CapacityProbe, head: str) -> float:
    """Fit a copy of ``checkpoint`` to the probe target; return the final loss on
    the whole dataset (critic: squared error, actor: forward KL target||model)."""
    if head not in ("actor", "critic"):
        raise ConfigurationError("head must be 'actor' or 'critic'")
    target = probe.target_actor if head == "actor" else probe.target_critic
    if checkpoint.spec != target.spec:
        raise ConfigurationError(f"checkpoint architecture {checkpoint.spec} does not match target {target.spec}")
    net = checkpoint.copy()
    state = AdamState.zeros_like(net.arrays)
    rng = np.random.default_rng(probe.seed)
    n = probe.observations.shape[0]
    m = min(probe.budget.minibatch_size, n)
    for _ in range(probe.budget.epochs):
        perm = rng.permutation(n)
        for k in range(n // m):
            leaves = net.bind()
            loss = _fit_loss(net, leaves, probe, perm[k * m:(k + 1) * m], head)
            ad.backward(loss)
            adam_step(net.arrays, {name: node.grad for name, node in leaves.items()}, state, probe.adam)
    return _fit_loss(net, net.bind(), probe, np.arange(n), head).item()
