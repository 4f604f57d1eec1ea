"""Two-state, two-action policy with a frozen one-dimensional representation.

The states ``x`` and ``y`` have features ``phi(x)`` and ``phi(y) = alpha * phi(x)``;
the policy is ``softmax(theta * phi(s))`` with ``theta = (theta1, theta2)``.
Gradient ascent on the single-sample PPO-Clip objective of ``(s, a1)`` has a
closed form: ``theta1 += d``, ``theta2 -= d`` with

    d = lr * A(s) / pi_old(a1|s) * phi(s) * pi(a1|s) * (1 - pi(a1|s))

applied only while ``pi(a1|s) / pi_old(a1|s) < 1 + eps``.  Because both states
share one feature direction, an update on one state also moves the other
state's probability, regardless of the other state's clip gate.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

SCHEDULES = ("blocks", "interleaved")


@dataclass(frozen=True)
class ToyConfig:
    alpha: float = 3.0
    phi_x: float | None = None
    phi_seed: int = 0
    adv_x: float = 1.0
    adv_y: float = 1.0
    pi_old_x: float = 0.5
    pi_old_y: float = 0.5
    clip_eps: float = 0.1
    lr: float = 1.5
    epochs: int = 10
    total_steps: int = 20
    schedule: str = "blocks"
    refresh_old: bool = False
    theta0: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.adv_x <= 0 or self.adv_y <= 0:
            raise ConfigurationError("toy advantages must be positive")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigurationError("toy clip_eps must be in (0, 1)")
        if not (0.0 < self.pi_old_x < 1.0 and 0.0 < self.pi_old_y < 1.0):
            raise ConfigurationError("pi_old probabilities must be in (0, 1)")
        if self.epochs < 1 or self.total_steps < 0:
            raise ConfigurationError("epochs must be >= 1 and total_steps >= 0")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}")

    @property
    def phi(self) -> float:
        """phi(x): fixed if given, else one standard-normal draw from ``phi_seed``."""
        if self.phi_x is not None:
            return float(self.phi_x)
        return float(np.random.default_rng(self.phi_seed).standard_normal())

    def features(self) -> dict[str, float]:
        px = self.phi
        return {"x": px, "y": self.alpha * px}


def prob_a1(theta, phi: float) -> float:
    """pi(a1|s) for logits ``(theta1 * phi, theta2 * phi)``."""
    z1, z2 = theta[0] * phi, theta[1] * phi
    m = max(z1, z2)
    e1, e2 = math.exp(z1 - m), math.exp(z2 - m)
    return e1 / (e1 + e2)


def toy_step(theta, state: str, cfg: ToyConfig, pi_old: dict[str, float] | None = None,
             features: dict[str, float] | None = None) -> tuple[float, float]:
    """One SGD ascent step on the clipped objective of ``(state, a1)``."""
    if state not in ("x", "y"):
        raise ConfigurationError("state must be 'x' or 'y'")
    theta1, theta2 = float(theta[0]), float(theta[1])
    if not (math.isfinite(theta1) and math.isfinite(theta2)):
        raise ConfigurationError("theta must be finite")
    features = features or cfg.features()
    pi_old = pi_old or {"x": cfg.pi_old_x, "y": cfg.pi_old_y}
    phi = features[state]
    adv = cfg.adv_x if state == "x" else cfg.adv_y
    p = prob_a1((theta1, theta2), phi)
    if p / pi_old[state] >= 1.0 + cfg.clip_eps:
        return theta1, theta2
    delta = cfg.lr * adv / pi_old[state] * phi * p * (1.0 - p)
    return theta1 + delta, theta2 - delta


@dataclass(frozen=True)
class ToyTraceRow:
    update_index: int
    state: str
    theta1: float
    theta2: float
    p_x: float
    p_y: float


@dataclass
class ToyTrace:
    initial: ToyTraceRow
    rows: list[ToyTraceRow] = field(default_factory=list)
    pi_old: list[dict[str, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["update_index", "state", "theta1", "theta2", "p_x", "p_y"])
        for r in [self.initial, *self.rows]:
            writer.writerow([r.update_index, r.state, repr(r.theta1), repr(r.theta2), repr(r.p_x), repr(r.p_y)])
        return buf.getvalue()


def update_schedule(cfg: ToyConfig) -> list[str]:
    if cfg.schedule == "interleaved":
        return ["x" if i % 2 == 0 else "y" for i in range(cfg.total_steps)]
    return ["x" if (i // cfg.epochs) % 2 == 0 else "y" for i in range(cfg.total_steps)]


def toy_simulate(cfg: ToyConfig) -> ToyTrace:
    feats = cfg.features()
    theta = (float(cfg.theta0[0]), float(cfg.theta0[1]))
    probs = lambda th: (prob_a1(th, feats["x"]), prob_a1(th, feats["y"]))
    px, py = probs(theta)
    trace = ToyTrace(ToyTraceRow(0, "init", theta[0], theta[1], px, py))
    pi_old = {"x": cfg.pi_old_x, "y": cfg.pi_old_y}
    schedule = update_schedule(cfg)
    for i, state in enumerate(schedule, start=1):
        if cfg.refresh_old and i > 1 and state != schedule[i - 2]:
            pi_old = {"x": px, "y": py}
        theta = toy_step(theta, state, cfg, pi_old, feats)
        px, py = probs(theta)
        trace.rows.append(ToyTraceRow(i, state, theta[0], theta[1], px, py))
        trace.pi_old.append(dict(pi_old))
    return trace


@dataclass
class ToyClaims:
    own_state_non_decreasing: bool
    other_state_sign_ok: bool
    pushed_past_clip: bool
    below_initial: bool
    min_final_prob: float
    max_final_ratio: float

    @property
    def all_sign_checks(self) -> bool:
        return self.own_state_non_decreasing and self.other_state_sign_ok


def toy_verify_claims(trace: ToyTrace, cfg: ToyConfig) -> ToyClaims:
    """Check each update's effect on both probabilities against the sign of alpha.

    alpha >= 0: both probabilities are non-decreasing under either update.
    alpha <= 0: the updated state's probability is non-decreasing and the
    other's is non-increasing.

    ``pushed_past_clip`` records whether some update raised a state's
    probability while that state's ratio was already at or past ``1 + eps``.
    """
    own_ok, other_ok, pushed = True, True, False
    prev = trace.initial
    for row, pi_old in zip(trace.rows, trace.pi_old):
        d = {"x": row.p_x - prev.p_x, "y": row.p_y - prev.p_y}
        before = {"x": prev.p_x, "y": prev.p_y}
        own, other = row.state, ("y" if row.state == "x" else "x")
        own_ok &= d[own] >= 0.0
        if cfg.alpha >= 0:
            other_ok &= d[other] >= 0.0
        else:
            other_ok &= d[other] <= 0.0
        if d[other] > 0.0 and before[other] / pi_old[other] >= 1.0 + cfg.clip_eps:
            pushed = True
        prev = row
    final = trace.rows[-1] if trace.rows else trace.initial
    init = trace.initial
    below = final.p_x < init.p_x or final.p_y < init.p_y
    return ToyClaims(
        own_state_non_decreasing=bool(own_ok),
        other_state_sign_ok=bool(other_ok),
        pushed_past_clip=pushed,
        below_initial=below,
        min_final_prob=min(final.p_x, final.p_y),
        max_final_ratio=max(final.p_x / cfg.pi_old_x, final.p_y / cfg.pi_old_y),
    )
