"""PPO-Clip training loop with the proximal feature penalty and Adam variants.

The loop follows the usual structure: collect ``n_envs x steps_per_env``
transitions with the current policy, compute GAE, then run ``epochs`` passes of
shuffled minibatch updates on that batch before collecting again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .advantage import GaeConfig, compute_gae, normalize_advantages
from .capacity import CapacityBudget, CapacityProbe, capacity_loss, make_capacity_probe
from .diagnostics import (
    DiagnosticsRecord,
    dead_neurons,
    feature_stats,
    policy_variance_across_states,
    rank_report,
    ratio_stats,
)
from .environments import (
    EnvConfig,
    EnvPool,
    Normalizer,
    fit_obs_normalizer,
    make_env,
    uniform_rollout_observations,
)
from .errors import ConfigurationError
from .networks import (
    ActorCritic,
    DistParams,
    FeatureProbe,
    MlpSpec,
    categorical_entropy,
    categorical_sample_logprob_entropy,
    dist_from_output,
    entropy_node,
    init_actor_critic,
    log_prob_nodes,
    mlp_graph,
    tanhnormal_sample_logprob,
)
from .optim import AdamConfig, AdamState, adam_step, clip_grad_norm
from .seeding import stream_rng, stream_seed

PFO_SCOPES = ("off", "last", "all")


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.1
    epochs: int = 4
    minibatch_size: int = 256
    n_envs: int = 8
    steps_per_env: int = 128
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    pfo_coef: float = 1.0
    pfo_scope: str = "off"
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float = 0.5
    adam_reset_each_batch: bool = False
    shared_trunk: bool = False
    gamma: float = 0.99
    gae_lambda: float = 0.95
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigurationError("ppo.clip_eps must be in (0, 1)")
        if self.epochs < 1:
            raise ConfigurationError("ppo.epochs must be >= 1")
        if self.n_envs < 1 or self.steps_per_env < 1:
            raise ConfigurationError("ppo.n_envs and ppo.steps_per_env must be >= 1")
        if not 1 <= self.minibatch_size <= self.batch_size:
            raise ConfigurationError(
                f"ppo.minibatch_size ({self.minibatch_size}) must be in [1, batch size "
                f"{self.batch_size} = ppo.n_envs x ppo.steps_per_env]"
            )
        for name in ("ent_coef", "vf_coef", "pfo_coef", "lr", "adam_eps", "max_grad_norm"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"ppo.{name} must be non-negative")
        if self.pfo_scope not in PFO_SCOPES:
            raise ConfigurationError(f"ppo.pfo_scope must be one of {PFO_SCOPES}")
        GaeConfig(self.gamma, self.gae_lambda)

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.steps_per_env

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.adam_eps)

    @property
    def gae(self) -> GaeConfig:
        return GaeConfig(self.gamma, self.gae_lambda)


# -- rollout storage ---------------------------------------------------------------


@dataclass
class RolloutBatch:
    """One batch of on-policy data, flattened time-major (index ``t * n_envs + env``)."""

    observations: np.ndarray
    actions: np.ndarray
    pre_tanh: np.ndarray | None
    old_log_probs: np.ndarray
    old_dist: DistParams
    old_preactivations: list[np.ndarray]
    old_features: np.ndarray
    critic_preactivation: np.ndarray
    critic_features: np.ndarray
    rewards: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episode_returns: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return self.observations.shape[0]

    def minibatch(self, idx: np.ndarray) -> "RolloutBatch":
        take = lambda a: None if a is None else a[idx]
        return RolloutBatch(
            observations=self.observations[idx],
            actions=self.actions[idx],
            pre_tanh=take(self.pre_tanh),
            old_log_probs=self.old_log_probs[idx],
            old_dist=self.old_dist.rows(idx),
            old_preactivations=[z[idx] for z in self.old_preactivations],
            old_features=self.old_features[idx],
            critic_preactivation=self.critic_preactivation[idx],
            critic_features=self.critic_features[idx],
            rewards=self.rewards[idx],
            terminated=self.terminated[idx],
            truncated=self.truncated[idx],
            values=self.values[idx],
            advantages=self.advantages[idx],
            returns=self.returns[idx],
        )


def _policy_step(agent: ActorCritic, obs: np.ndarray, rng: np.random.Generator):
    out, probe = mlp_graph(agent.actor.spec, agent.actor.bind(), obs)
    dist = dist_from_output(agent.actor.spec, out)
    if dist.kind == "categorical":
        actions, log_probs, _ = categorical_sample_logprob_entropy(dist.logits, rng)
        env_actions, pre_tanh = actions, None
    else:
        env_actions, pre_tanh, log_probs = tanhnormal_sample_logprob(dist.mean, dist.std, rng)
        actions = env_actions
    return actions, env_actions, pre_tanh, log_probs, dist, probe


def _values(agent: ActorCritic, obs: np.ndarray) -> tuple[np.ndarray, FeatureProbe]:
    _, critic_leaves, _ = agent.bind()
    out, probe = mlp_graph(agent.critic.spec, critic_leaves, obs)
    return out.value[:, 0].copy(), probe


def collect_rollout(agent: ActorCritic, pool: EnvPool, steps_per_env: int,
                    rng: np.random.Generator, gae: GaeConfig = GaeConfig()) -> RolloutBatch:
    """Run the current policy for ``steps_per_env`` steps in every environment.

    Time-limit truncation bootstraps with the value of the final observation:
    ``gamma * V(s_T)`` is folded into that step's reward for GAE and the
    recursion is cut there, as it is for termination.
    """
    T = steps_per_env
    cols: dict[str, list] = {k: [] for k in (
        "obs", "actions", "pre_tanh", "logp", "logits", "mean", "std", "pres", "critic_pre",
        "critic_feat", "rewards", "gae_rewards", "term", "trunc", "values")}
    finished: list[float] = []
    for _ in range(T):
        obs = pool.obs.copy()
        actions, env_actions, pre_tanh, logp, dist, probe = _policy_step(agent, obs, rng)
        values, cprobe = _values(agent, obs)
        rewards, term, trunc, final_obs, done_returns = pool.step(env_actions)
        finished += done_returns
        gae_rewards = rewards.copy()
        if np.any(trunc):
            boot, _ = _values(agent, final_obs[trunc])
            gae_rewards[trunc] += gae.gamma * boot
        cols["obs"].append(obs)
        cols["actions"].append(actions)
        cols["pre_tanh"].append(pre_tanh)
        cols["logp"].append(logp)
        cols["logits"].append(dist.logits)
        cols["mean"].append(dist.mean)
        cols["std"].append(dist.std)
        cols["pres"].append(probe.pre_activations)
        cols["critic_pre"].append(cprobe.penultimate_pre)
        cols["critic_feat"].append(cprobe.features)
        cols["rewards"].append(rewards)
        cols["gae_rewards"].append(gae_rewards)
        cols["term"].append(term)
        cols["trunc"].append(trunc)
        cols["values"].append(values)

    bootstrap, _ = _values(agent, pool.obs)
    values = np.stack(cols["values"])
    done = np.stack(cols["term"]) | np.stack(cols["trunc"])
    advantages, returns = compute_gae(np.stack(cols["gae_rewards"]), values, bootstrap, done, gae)

    cat = lambda key: np.concatenate(cols[key], axis=0)
    kind = agent.actor.spec.head
    n_layers = len(agent.actor.spec.hidden_widths)
    old_pres = [np.concatenate([step[l] for step in cols["pres"]], axis=0) for l in range(n_layers)]
    old_dist = DistParams(kind, logits=cat("logits")) if kind == "categorical" else \
        DistParams(kind, mean=cat("mean"), std=cat("std"))
    feat_act = agent.actor.spec.activation
    act_fn = np.tanh if feat_act == "tanh" else (lambda z: np.maximum(z, 0.0))
    return RolloutBatch(
        observations=cat("obs"),
        actions=cat("actions"),
        pre_tanh=cat("pre_tanh") if kind == "tanhnormal" else None,
        old_log_probs=cat("logp"),
        old_dist=old_dist,
        old_preactivations=old_pres,
        old_features=act_fn(old_pres[-1]),
        critic_preactivation=cat("critic_pre"),
        critic_features=cat("critic_feat"),
        rewards=np.stack(cols["rewards"]).reshape(-1),
        terminated=np.stack(cols["term"]).reshape(-1),
        truncated=np.stack(cols["trunc"]).reshape(-1),
        values=values.reshape(-1),
        advantages=advantages.reshape(-1),
        returns=returns.reshape(-1),
        episode_returns=finished,
    )


# -- losses ------------------------------------------------------------------------


def ppo_clip_objective(new_log_probs: ad.Node, old_log_probs, advantages, eps: float) -> ad.Node:
    """Mean of ``min(r * A, clip(r, 1-eps, 1+eps) * A)`` with ``r = exp(new - old)``.

    Returned as a quantity to maximize. Computed in the equivalent one-sided
    form ``clip(r, -inf, 1+eps) * A`` for ``A > 0`` and ``clip(r, 1-eps, inf) * A``
    for ``A < 0``: a sample gets zero gradient exactly when its ratio sits at
    or past the bound its advantage pushes toward. (With ``min`` the tie at the
    opposite bound, where the objective is smooth, would lose its gradient.)
    """
    n = new_log_probs.shape[0]
    old = ad.constant(np.asarray(old_log_probs, dtype=np.float64).reshape(n, 1))
    a = np.asarray(advantages, dtype=np.float64).reshape(n, 1)
    ratio = ad.exp(ad.sub(new_log_probs, old))
    low = np.where(a < 0, 1.0 - eps, -np.inf)
    high = np.where(a > 0, 1.0 + eps, np.inf)
    return ad.reduce(ad.mul(ad.clip(ratio, low, high), ad.constant(a)), "mean")


def pfo_penalty(probe_new: FeatureProbe, old_preactivations: list[np.ndarray], scope: str) -> ad.Node:
    """Mean over samples of the squared L2 distance between current and rollout-time
    pre-activations, summed over the penultimate layer (``last``) or every hidden
    layer (``all``)."""
    nodes = probe_new.pre_activation_nodes
    if scope == "last":
        layers = [len(nodes) - 1]
    elif scope == "all":
        layers = list(range(len(nodes)))
    else:
        raise ConfigurationError(f"PFO scope must be 'last' or 'all', got {scope!r}")
    if len(old_preactivations) != len(nodes):
        raise ConfigurationError(
            f"stored pre-activations cover {len(old_preactivations)} layers, probe has {len(nodes)}"
        )
    n = nodes[0].shape[0]
    total = None
    for l in layers:
        old = np.asarray(old_preactivations[l], dtype=np.float64)
        if old.shape != nodes[l].shape:
            raise ConfigurationError(f"layer {l}: stored {old.shape} vs current {nodes[l].shape}")
        term = ad.reduce(ad.square(ad.sub(nodes[l], ad.constant(old))), "sum")
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / n)


@dataclass
class LossParts:
    total: ad.Node
    clip_objective: float
    pfo: float
    value_loss: float
    entropy: float
    ratios: np.ndarray


def total_loss(mb: RolloutBatch, agent: ActorCritic, cfg: PpoConfig,
               leaves=None) -> LossParts:
    """``-clip + c_pfo * pfo - c_H * entropy + c_vf * mse(values, returns)``."""
    actor_leaves, critic_leaves, _ = leaves if leaves is not None else agent.bind()
    spec = agent.actor.spec
    out, probe = mlp_graph(spec, actor_leaves, mb.observations)
    new_logp = log_prob_nodes(spec, out, mb.actions, mb.pre_tanh)
    adv = normalize_advantages(mb.advantages) if cfg.normalize_advantages else mb.advantages
    clip_obj = ppo_clip_objective(new_logp, mb.old_log_probs, adv, cfg.clip_eps)
    loss = ad.scale(clip_obj, -1.0)

    pfo_value = 0.0
    if cfg.pfo_scope != "off":
        pfo = pfo_penalty(probe, mb.old_preactivations, cfg.pfo_scope)
        pfo_value = pfo.item()
        if cfg.pfo_coef:
            loss = ad.add(loss, ad.scale(pfo, cfg.pfo_coef))

    ent = ad.reduce(entropy_node(spec, out, new_logp), "mean")
    if cfg.ent_coef:
        loss = ad.sub(loss, ad.scale(ent, cfg.ent_coef))

    vout, _ = mlp_graph(agent.critic.spec, critic_leaves, mb.observations)
    vf = ad.reduce(ad.square(ad.sub(vout, ad.constant(mb.returns.reshape(-1, 1)))), "mean")
    if cfg.vf_coef:
        loss = ad.add(loss, ad.scale(vf, cfg.vf_coef))

    ratios = np.exp(new_logp.value[:, 0] - mb.old_log_probs)
    return LossParts(loss, clip_obj.item(), pfo_value, vf.item(), ent.item(), ratios)


# -- optimization ------------------------------------------------------------------


@dataclass
class UpdateStats:
    clip_objective: float
    pfo: float
    value_loss: float
    entropy: float
    grad_norm: float
    first_ratios: np.ndarray
    diverged: bool = False


def optimize_batch(agent: ActorCritic, batch: RolloutBatch, cfg: PpoConfig, adam: AdamState,
                   rng: np.random.Generator) -> UpdateStats:
    """``epochs`` passes of shuffled minibatch updates; a trailing partial minibatch is dropped."""
    if cfg.adam_reset_each_batch:
        adam.reset()
    params = agent.trainable()
    B, M = len(batch), cfg.minibatch_size
    n_mb = B // M
    first_ratios = np.empty(0)
    last: list[LossParts] = []
    norms = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(B)
        last = []
        for k in range(n_mb):
            idx = perm[k * M:(k + 1) * M]
            leaves = agent.bind()
            parts = total_loss(batch.minibatch(idx), agent, cfg, leaves)
            if not math.isfinite(parts.total.item()):
                return UpdateStats(parts.clip_objective, parts.pfo, parts.value_loss,
                                   parts.entropy, float("nan"), first_ratios, diverged=True)
            if epoch == 0 and k == 0:
                first_ratios = parts.ratios
            ad.backward(parts.total)
            grads = {name: node.grad for name, node in leaves[2].items()}
            if cfg.max_grad_norm > 0:
                grads, norm = clip_grad_norm(grads, cfg.max_grad_norm)
            else:
                norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            norms.append(norm)
            adam_step(params, grads, adam, cfg.adam)
            last.append(parts)
    mean = lambda attr: float(np.mean([getattr(p, attr) for p in last]))
    return UpdateStats(mean("clip_objective"), mean("pfo"), mean("value_loss"), mean("entropy"),
                       float(np.mean(norms)), first_ratios)


def batch_ratios(agent: ActorCritic, batch: RolloutBatch) -> np.ndarray:
    """Probability ratios of the current policy against the rollout policy, per sample."""
    spec = agent.actor.spec
    out, _ = mlp_graph(spec, agent.actor.bind(), batch.observations)
    logp = log_prob_nodes(spec, out, batch.actions, batch.pre_tanh).value[:, 0]
    return np.exp(logp - batch.old_log_probs)


# -- the training loop ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    env: EnvConfig = EnvConfig()
    ppo: PpoConfig = PpoConfig()
    hidden_widths: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    total_steps: int = 200_000
    seed: int = 0
    log_every: int = 1
    capacity_every: float = 0.025
    capacity: CapacityBudget = CapacityBudget()
    rank_delta: float = 0.01
    feature_rank_delta: float = 0.01

    def specs(self, obs_dim: int, n_outputs: int) -> tuple[MlpSpec, MlpSpec]:
        head = "categorical" if self.env.discrete else "tanhnormal"
        actor = MlpSpec(obs_dim, self.hidden_widths, self.activation, head, n_outputs)
        critic = MlpSpec(obs_dim, self.hidden_widths, self.activation, "value")
        return actor, critic

    @property
    def n_batches(self) -> int:
        return max(1, self.total_steps // self.ppo.batch_size)


def env_dims(config: EnvConfig) -> tuple[int, int]:
    env = make_env(config)
    if config.discrete:
        return env.obs_dim, env.n_actions
    return env.obs_dim, env.action_dim


def build_normalizer(cfg: TrainConfig) -> Normalizer | None:
    if not cfg.env.normalize_obs:
        return None
    n_ep = cfg.env.normalizer_episodes
    obs = uniform_rollout_observations(cfg.env, n_ep, stream_seed(cfg.seed, "normalizer"))
    return fit_obs_normalizer(obs, n_episodes=n_ep)


def capacity_ticks(n_batches: int, every: float) -> set[int]:
    """Batch indices (0 = before training) at which capacity is measured."""
    if every <= 0:
        return set()
    count = int(round(1.0 / every))
    return {int(round(i * n_batches / count)) for i in range(count + 1)}


@dataclass
class TrainState:
    agent: ActorCritic
    adam: AdamState
    normalizer: Normalizer | None
    capacity_probe: CapacityProbe | None


def init_training(cfg: TrainConfig) -> TrainState:
    obs_dim, n_out = env_dims(cfg.env)
    actor_spec, critic_spec = cfg.specs(obs_dim, n_out)
    agent = init_actor_critic(actor_spec, critic_spec, stream_rng(cfg.seed, "init"),
                              shared_trunk=cfg.ppo.shared_trunk)
    normalizer = build_normalizer(cfg)
    probe = None
    if cfg.capacity_every > 0:
        probe = make_capacity_probe(actor_spec, critic_spec, cfg.env, cfg.capacity,
                                    stream_seed(cfg.seed, "capacity"), normalizer,
                                    AdamConfig(cfg.ppo.lr, cfg.ppo.beta1, cfg.ppo.beta2, cfg.ppo.adam_eps))
    return TrainState(agent, AdamState.zeros_like(agent.trainable()), normalizer, probe)


def _representation_metrics(rec: DiagnosticsRecord, agent: ActorCritic, batch: RolloutBatch,
                            cfg: TrainConfig) -> None:
    act = agent.actor.spec.activation
    probe = FeatureProbe([batch.old_preactivations[-1]], [batch.old_features])
    cprobe = FeatureProbe([batch.critic_preactivation], [batch.critic_features])
    rec.actor_dead_neurons = dead_neurons(probe, act)
    rec.critic_dead_neurons = dead_neurons(cprobe, act)
    rec.actor_preactivation_norm, rec.actor_feature_norm = feature_stats(probe)
    rec.critic_preactivation_norm, rec.critic_feature_norm = feature_stats(cprobe)
    if batch.old_features.shape[1] < len(batch):
        rec.actor_rank = rank_report(batch.old_features, cfg.rank_delta, cfg.feature_rank_delta).metrics()
        rec.critic_rank = rank_report(batch.critic_features, cfg.rank_delta, cfg.feature_rank_delta).metrics()
    rec.policy_variance = policy_variance_across_states(batch.old_dist)
    if batch.old_dist.kind == "categorical":
        rec.entropy = float(categorical_entropy(batch.old_dist.logits).mean())
    else:
        rec.entropy = float(-batch.old_log_probs.mean())


def train(cfg: TrainConfig, checkpoint_fn: Callable[[int, ActorCritic], None] | None = None,
          state: TrainState | None = None) -> Iterator[DiagnosticsRecord]:
    """Run PPO and yield one record per logging tick.

    A non-finite loss yields a record with ``diverged=True`` and stops.
    """
    state = state or init_training(cfg)
    agent, adam = state.agent, state.adam
    ppo = cfg.ppo
    env_seeds = [stream_seed(cfg.seed, "env", i) for i in range(ppo.n_envs)]
    pool = EnvPool(cfg.env, env_seeds, state.normalizer)
    policy_rng = stream_rng(cfg.seed, "policy")
    shuffle_rng = stream_rng(cfg.seed, "shuffle")
    n_batches = cfg.n_batches
    cap_ticks = capacity_ticks(n_batches, cfg.capacity_every)
    last_returns: list[float] = []
    continuous = not cfg.env.discrete

    def capacity(rec: DiagnosticsRecord, batch_index: int, step: int) -> None:
        if state.capacity_probe is None or batch_index not in cap_ticks:
            return
        rec.actor_capacity_loss = capacity_loss(agent.actor, state.capacity_probe, "actor")
        rec.critic_capacity_loss = capacity_loss(agent.critic, state.capacity_probe, "critic")
        if checkpoint_fn is not None:
            checkpoint_fn(step, agent)

    if 0 in cap_ticks and state.capacity_probe is not None:
        rec = DiagnosticsRecord(step=0, batch=0)
        capacity(rec, 0, 0)
        yield rec

    for b in range(1, n_batches + 1):
        batch = collect_rollout(agent, pool, ppo.steps_per_env, policy_rng, ppo.gae)
        if batch.episode_returns:
            last_returns = batch.episode_returns
        stats = optimize_batch(agent, batch, ppo, adam, shuffle_rng)
        step = b * ppo.batch_size
        log_now = (b % cfg.log_every == 0) or b == n_batches or stats.diverged or b in cap_ticks
        if not log_now:
            continue
        rec = DiagnosticsRecord(step=step, batch=b)
        rec.episode_return_mean = float(np.mean(last_returns)) if last_returns else None
        rec.episode_return_count = len(last_returns)
        rec.clip_objective = stats.clip_objective
        rec.pfo_loss = stats.pfo
        rec.value_loss = stats.value_loss
        rec.entropy_loss = stats.entropy
        if stats.diverged:
            rec.diverged = True
            yield rec
            return
        rec.grad_norm = stats.grad_norm
        _representation_metrics(rec, agent, batch, cfg)
        rs = ratio_stats(batch_ratios(agent, batch), ppo.clip_eps, continuous)
        rec.ratio_mean_above = rs["ratio_mean_above"]
        rec.ratio_mean_below = rs["ratio_mean_below"]
        rec.ratio_frac_out = rs["ratio_frac_out"]
        rec.excess_ratio = rs["excess_ratio"]
        capacity(rec, b, step)
        yield rec
