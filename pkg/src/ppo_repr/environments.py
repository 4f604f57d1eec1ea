"""Desk-scale finite-horizon environments.

Three kinds are provided:

``chain_dense``
    A 4x6 grid (24 cells), 4 actions, shaped reward toward the far corner,
    horizon 64, sticky actions.
``chain_sparse_masked``
    The same grid with each reward zeroed with probability ``reward_mask_prob``.
``point_mass``
    A 2-D point mass steered by a continuous action in (-1, 1)^2 with a
    quadratic distance penalty, horizon 128.

Every observation ends with the normalized time step ``t / t_max`` so that
truncation is observable.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, EpisodeFinishedError

ENV_KINDS = ("chain_dense", "chain_sparse_masked", "point_mass")

GRID_ROWS, GRID_COLS = 4, 6
GRID_START = (0, 0)
GRID_GOAL = (GRID_ROWS - 1, GRID_COLS - 1)
# up, down, left, right
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
SHAPING_SCALE = 0.1
STEP_COST = 0.01
GOAL_REWARD = 1.0

POINT_STEP = 0.1
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "chain_dense"
    horizon: int | None = None
    sticky_action_prob: float | None = None
    reward_mask_prob: float | None = None
    normalize_obs: bool | None = None
    normalizer_episodes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ConfigurationError(f"env.kind must be one of {ENV_KINDS}, got {self.kind!r}")
        discrete = self.kind != "point_mass"
        defaults = {
            "horizon": 64 if discrete else 128,
            "sticky_action_prob": 0.25 if discrete else 0.0,
            "reward_mask_prob": 0.9 if self.kind == "chain_sparse_masked" else 0.0,
            "normalize_obs": not discrete,
        }
        for key, value in defaults.items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        if self.horizon < 1:
            raise ConfigurationError("env.horizon must be positive")
        if not 0.0 <= self.sticky_action_prob < 1.0:
            raise ConfigurationError("env.sticky_action_prob must be in [0, 1)")
        if not 0.0 <= self.reward_mask_prob < 1.0:
            raise ConfigurationError("env.reward_mask_prob must be in [0, 1)")
        if self.normalizer_episodes < 1:
            raise ConfigurationError("env.normalizer_episodes must be positive")

    @property
    def discrete(self) -> bool:
        return self.kind != "point_mass"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool


def apply_reward_mask(reward: float, p: float, rng: np.random.Generator) -> float:
    """Zero ``reward`` with probability ``p``.

    A draw is consumed for every call, including zero rewards, so the RNG
    stream does not depend on reward values.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigurationError("mask probability must be in [0, 1)")
    if p == 0.0:
        return reward
    keep = rng.random() >= p
    return reward if keep else 0.0


class GridChainEnv:
    """Sticky-action grid walk; see the module docstring."""

    n_actions = 4
    obs_dim = GRID_ROWS * GRID_COLS + 4 + 1

    def __init__(self, config: EnvConfig):
        if not config.discrete:
            raise ConfigurationError("GridChainEnv needs a chain env kind")
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self._done = True
        self.t = 0
        self.pos = GRID_START
        self.prev_action = -1

    def _observation(self) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        obs[self.pos[0] * GRID_COLS + self.pos[1]] = 1.0
        if self.prev_action >= 0:
            obs[GRID_ROWS * GRID_COLS + self.prev_action] = 1.0
        obs[-1] = self.t / self.config.horizon
        return obs

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.pos = GRID_START
        self.prev_action = -1
        self._done = False
        return self._observation()

    def step(self, action) -> StepResult:
        if self._done:
            raise EpisodeFinishedError("step() after the episode ended; call reset()")
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise ConfigurationError(f"invalid action {action}")
        p = self.config.sticky_action_prob
        executed = action
        if p > 0.0:
            # draw every step so the stream is policy-independent
            if self.rng.random() < p and self.prev_action >= 0:
                executed = self.prev_action
        next_pos, reward, terminated = grid_transition(self.pos, executed)
        reward = apply_reward_mask(reward, self.config.reward_mask_prob, self.rng)
        self.pos = next_pos
        self.prev_action = executed
        self.t += 1
        truncated = (not terminated) and self.t >= self.config.horizon
        self._done = terminated or truncated
        return StepResult(self._observation(), float(reward), terminated, truncated)


def grid_distance(pos: tuple[int, int]) -> int:
    return abs(GRID_GOAL[0] - pos[0]) + abs(GRID_GOAL[1] - pos[1])


def grid_transition(pos: tuple[int, int], executed: int) -> tuple[tuple[int, int], float, bool]:
    """Deterministic grid dynamics: ``(next_pos, reward, terminated)``."""
    dr, dc = MOVES[executed]
    r = min(max(pos[0] + dr, 0), GRID_ROWS - 1)
    c = min(max(pos[1] + dc, 0), GRID_COLS - 1)
    nxt = (r, c)
    reward = SHAPING_SCALE * (grid_distance(pos) - grid_distance(nxt)) - STEP_COST
    terminated = nxt == GRID_GOAL
    if terminated:
        reward += GOAL_REWARD
    return nxt, reward, terminated


class PointMassEnv:
    """2-D point mass pulled toward the origin; actions in (-1, 1)^2."""

    action_dim = 2
    obs_dim = 3

    def __init__(self, config: EnvConfig):
        if config.discrete:
            raise ConfigurationError("PointMassEnv needs kind='point_mass'")
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self._done = True
        self.t = 0
        self.pos = np.zeros(2)
        self.prev_action = np.zeros(2)

    def _observation(self) -> np.ndarray:
        return np.array([self.pos[0], self.pos[1], self.t / self.config.horizon])

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.pos = self.rng.uniform(-1.0, 1.0, size=2)
        self.prev_action = np.zeros(2)
        self._done = False
        return self._observation()

    def step(self, action) -> StepResult:
        if self._done:
            raise EpisodeFinishedError("step() after the episode ended; call reset()")
        action = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
        p = self.config.sticky_action_prob
        if p > 0.0 and self.rng.random() < p:
            action = self.prev_action
        self.pos = np.clip(self.pos + POINT_STEP * action, -1.0, 1.0)
        self.prev_action = action
        reward = -float(self.pos @ self.pos)
        reward = apply_reward_mask(reward, self.config.reward_mask_prob, self.rng)
        self.t += 1
        truncated = self.t >= self.config.horizon
        self._done = truncated
        return StepResult(self._observation(), reward, False, truncated)


def make_env(config: EnvConfig, seed: int | None = None):
    if seed is not None:
        config = EnvConfig(**{**config.to_dict(), "seed": seed})
    return GridChainEnv(config) if config.discrete else PointMassEnv(config)


def reset(env, seed: int | None = None) -> np.ndarray:
    return env.reset(seed)


def step(env, action) -> StepResult:
    return env.step(action)


# -- environments in parallel ---------------------------------------------------


class EnvPool:
    """``n`` independent environments with auto-reset and episode bookkeeping."""

    def __init__(self, config: EnvConfig, seeds: list[int], normalizer: Normalizer | None = None):
        self.config = config
        self.envs = [make_env(config, seed=s) for s in seeds]
        self.normalizer = normalizer
        self.obs = np.stack([self._norm(env.reset()) for env in self.envs])
        self.running_returns = np.zeros(len(self.envs))
        self.running_lengths = np.zeros(len(self.envs), dtype=np.int64)

    def _norm(self, obs: np.ndarray) -> np.ndarray:
        return obs if self.normalizer is None else apply_normalizer(self.normalizer, obs)

    def step(self, actions):
        n = len(self.envs)
        rewards = np.zeros(n)
        terminated = np.zeros(n, dtype=bool)
        truncated = np.zeros(n, dtype=bool)
        final_obs = self.obs.copy()
        finished = []
        for i, env in enumerate(self.envs):
            res = env.step(actions[i])
            rewards[i] = res.reward
            terminated[i] = res.terminated
            truncated[i] = res.truncated
            self.running_returns[i] += res.reward
            self.running_lengths[i] += 1
            final_obs[i] = self._norm(res.observation)
            if res.terminated or res.truncated:
                finished.append(float(self.running_returns[i]))
                self.running_returns[i] = 0.0
                self.running_lengths[i] = 0
                self.obs[i] = self._norm(env.reset())
            else:
                self.obs[i] = final_obs[i]
        return rewards, terminated, truncated, final_obs, finished


# -- observation standardization ---------------------------------------------


@dataclass(frozen=True)
class Normalizer:
    """Frozen per-dimension standardization; the trailing time feature passes through."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_obs_normalizer(observations, n_episodes: int | None = None, min_episodes: int = 4) -> Normalizer:
    """Fit mean/std on everything except the last (time) column."""
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] == 0:
        raise ConfigurationError("cannot fit a normalizer on an empty rollout")
    if n_episodes is not None and n_episodes < min_episodes:
        raise ConfigurationError(
            f"normalizer rollout covers {n_episodes} episodes, need at least {min_episodes}"
        )
    body = obs[:, :-1]
    return Normalizer(body.mean(axis=0), np.maximum(body.std(axis=0), STD_FLOOR))


def apply_normalizer(normalizer: Normalizer, observation) -> np.ndarray:
    obs = np.asarray(observation, dtype=np.float64)
    if obs.shape[-1] != normalizer.mean.shape[0] + 1:
        raise ConfigurationError(
            f"observation has {obs.shape[-1]} dims, normalizer expects {normalizer.mean.shape[0] + 1}"
        )
    out = obs.copy()
    out[..., :-1] = (obs[..., :-1] - normalizer.mean) / normalizer.std
    return out


def uniform_rollout_observations(config: EnvConfig, n_episodes: int, seed: int) -> np.ndarray:
    """Observations from ``n_episodes`` full episodes of a uniform random policy."""
    env = make_env(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    rows = []
    for _ in range(n_episodes):
        obs = env.reset()
        rows.append(obs)
        while True:
            if config.discrete:
                action = rng.integers(env.n_actions)
            else:
                action = rng.uniform(-1.0, 1.0, size=env.action_dim)
            res = env.step(action)
            rows.append(res.observation)
            if res.terminated or res.truncated:
                break
    return np.asarray(rows)


# -- exact dynamic programming for the grid ----------------------------------


def chain_dynamic_programming(config: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Finite-horizon optimal values over (t, cell, previous action).

    Returns ``(V, Q)`` with ``V[t, cell, prev + 1]`` and
    ``Q[t, cell, prev + 1, action]``; ``prev = -1`` is the reset state with no
    sticky repeat. Rewards are expectations under the mask probability.
    """
    if not config.discrete:
        raise ConfigurationError("dynamic programming is only defined for the grid")
    T = config.horizon
    p = config.sticky_action_prob
    keep = 1.0 - config.reward_mask_prob
    n_cells = GRID_ROWS * GRID_COLS
    V = np.zeros((T + 1, n_cells, 5))
    Q = np.zeros((T, n_cells, 5, 4))
    trans = {}
    for cell in range(n_cells):
        pos = divmod(cell, GRID_COLS)
        for e in range(4):
            nxt, r, term = grid_transition(pos, e)
            trans[cell, e] = (nxt[0] * GRID_COLS + nxt[1], keep * r, term)
    for t in range(T - 1, -1, -1):
        for cell in range(n_cells):
            if divmod(cell, GRID_COLS) == GRID_GOAL:
                continue
            for prev in range(-1, 4):
                for a in range(4):
                    if prev < 0 or prev == a:
                        outcomes = ((a, 1.0),)
                    else:
                        outcomes = ((a, 1.0 - p), (prev, p))
                    q = 0.0
                    for e, prob in outcomes:
                        nxt, r, term = trans[cell, e]
                        q += prob * (r + (0.0 if term else V[t + 1, nxt, e + 1]))
                    Q[t, cell, prev + 1, a] = q
                V[t, cell, prev + 1] = Q[t, cell, prev + 1].max()
    return V, Q


def chain_optimal_return(config: EnvConfig) -> float:
    V, _ = chain_dynamic_programming(config)
    start = GRID_START[0] * GRID_COLS + GRID_START[1]
    return float(V[0, start, 0])


def greedy_actions(Q: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
    """Argmax with ties broken toward the lowest action index."""
    best = Q.max(axis=-1, keepdims=True)
    tol = rtol * np.maximum(np.abs(Q).max(axis=-1, keepdims=True), 1e-300)
    return np.argmax(Q >= best - tol, axis=-1)
