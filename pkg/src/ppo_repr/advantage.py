"""Generalized advantage estimation and per-minibatch advantage normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

NORM_EPS = 1e-8


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must be in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("lambda must be in [0, 1]")


def compute_gae(rewards, values, bootstrap_value, terminated, cfg: GaeConfig = GaeConfig()):
    """Backward GAE recursion along axis 0.

    Arrays may be ``(T,)`` or ``(T, n_envs)``; ``bootstrap_value`` is the value
    of the state following the last step (ignored where the last step
    terminated). ``terminated[t]`` cuts both the bootstrap and the recursion
    after step ``t``.

    Returns ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    done = np.asarray(terminated, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != done.shape:
        raise ConfigurationError(
            f"length mismatch: rewards {rewards.shape}, values {values.shape}, terminated {done.shape}"
        )
    bootstrap = np.broadcast_to(np.asarray(bootstrap_value, dtype=np.float64), rewards.shape[1:])
    T = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    next_adv = np.zeros(rewards.shape[1:])
    next_value = bootstrap
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - done[t]
        delta = rewards[t] + cfg.gamma * next_value * nonterminal - values[t]
        next_adv = delta + cfg.gamma * cfg.lam * nonterminal * next_adv
        advantages[t] = next_adv
        next_value = values[t]
    return advantages, advantages + values


def normalize_advantages(advantages) -> np.ndarray:
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.size < 2:
        raise ConfigurationError("advantage normalization needs at least 2 samples")
    return (adv - adv.mean()) / (adv.std() + NORM_EPS)
