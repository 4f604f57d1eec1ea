"""Representation and trust-region metrics.

Rank metrics work on the singular values of an ``N x D`` feature matrix
(rows are samples). Singular values come from the eigenvalues of the
``D x D`` Gram matrix, found with a cyclic Jacobi eigensolver.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigurationError
from .networks import DistParams, FeatureProbe, categorical_log_probs

MACHINE_EPS = float(np.finfo(np.float64).eps)
RATIO_CLAMP = (1e-12, 1e12)
DEAD_TANH_STD = 1e-3
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


# -- singular values -----------------------------------------------------------


def _round_robin(n: int) -> list[list[tuple[int, int]]]:
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    m = n if n % 2 == 0 else n + 1
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        rounds.append(pairs)
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def jacobi_eigenvalues(a: np.ndarray, tol: float = JACOBI_TOL,
                       max_sweeps: int = JACOBI_MAX_SWEEPS) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once; pairs are grouped into
    rounds of disjoint rotations that are applied together. Iterates until the
    off-diagonal Frobenius norm is below ``tol`` times the full norm.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ConfigurationError(f"expected a square matrix, got {a.shape}")
    if n == 1:
        return a.reshape(1).copy()
    rounds = [(np.array([p for p, _ in r]), np.array([q for _, q in r])) for r in _round_robin(n)]
    m = float(np.max(np.abs(a)))
    if m == 0.0:
        return np.zeros(n)
    a /= m  # unit scale keeps the convergence norms finite and nonzero
    scale = np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            # t = sign(tau) / (|tau| + sqrt(1 + tau^2)), tau = d / (2 apq), written overflow-free
            d = a[q, q] - a[p, p]
            t = np.where(d >= 0, 1.0, -1.0) * 2.0 * apq / (np.abs(d) + np.hypot(d, 2.0 * apq))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            rot = np.eye(n)
            rot[p, p] = c
            rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            a[p, q] = 0.0
            a[q, p] = 0.0
    return m * np.diag(a)


def singular_values(phi) -> np.ndarray:
    """Singular values of ``phi`` in decreasing order (length ``D``)."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 2:
        raise ConfigurationError("feature matrix must be 2-D")
    if not np.all(np.isfinite(phi)):
        raise ConfigurationError("feature matrix contains non-finite entries")
    # work at unit scale so the Gram matrix neither underflows nor overflows
    m = float(np.max(np.abs(phi))) if phi.size else 0.0
    if m == 0.0:
        return np.zeros(phi.shape[1])
    unit = phi / m
    eig = np.clip(jacobi_eigenvalues(unit.T @ unit), 0.0, None)
    return m * np.sort(np.sqrt(eig))[::-1]


# -- rank metrics ----------------------------------------------------------------


@dataclass
class RankReport:
    effective_rank: float
    approximate_rank: int
    srank: int
    feature_rank_abs: int
    epsilon_rank: int
    singular_values: list[float] = field(repr=False)

    def metrics(self) -> dict[str, float]:
        d = asdict(self)
        d.pop("singular_values")
        return d


def _threshold_rank(values: np.ndarray, delta: float) -> int:
    total = values.sum()
    cum = np.cumsum(values) / total
    return int(np.argmax(cum > 1.0 - delta)) + 1


def rank_report_from_sigma(sigma, n_samples: int, delta: float = 0.01,
                           feature_rank_delta: float = 0.01) -> RankReport:
    sigma = np.sort(np.asarray(sigma, dtype=np.float64))[::-1]
    if np.any(sigma < 0):
        raise ConfigurationError("singular values must be non-negative")
    if sigma.size == 0 or sigma[0] == 0.0:
        return RankReport(0.0, 0, 0, 0, 0, sigma.tolist())
    # relative metrics are scale-free; dividing by sigma_1 keeps sigma^2 from underflowing
    rel = sigma / sigma[0]
    p = rel / rel.sum()
    nz = p[p > 0]
    effective = float(np.exp(-(nz * np.log(nz)).sum()))
    return RankReport(
        effective_rank=effective,
        approximate_rank=_threshold_rank(rel**2, delta),
        srank=_threshold_rank(rel, delta),
        feature_rank_abs=int(np.sum(sigma / math.sqrt(n_samples) > feature_rank_delta)),
        epsilon_rank=int(np.sum(sigma / (sigma[0] * n_samples) > MACHINE_EPS)),
        singular_values=sigma.tolist(),
    )


def rank_report(phi, delta: float = 0.01, feature_rank_delta: float = 0.01) -> RankReport:
    """All five rank metrics of a feature matrix (rows are samples)."""
    phi = np.asarray(phi, dtype=np.float64)
    n, d = phi.shape
    if d >= n:
        raise ConfigurationError(f"rank metrics need D < N, got N={n}, D={d}")
    return rank_report_from_sigma(singular_values(phi), n, delta, feature_rank_delta)


# -- neuron and norm statistics --------------------------------------------------


def _features(probe_or_matrix) -> np.ndarray:
    if isinstance(probe_or_matrix, FeatureProbe):
        return probe_or_matrix.features
    return np.asarray(probe_or_matrix, dtype=np.float64)


def dead_neurons(probe_or_features, activation_kind: str) -> int:
    """Dead penultimate units: ReLU columns that are zero on every sample,
    tanh columns whose standard deviation across samples is below 0.001."""
    feats = _features(probe_or_features)
    if feats.shape[0] == 0:
        raise ConfigurationError("empty batch")
    if activation_kind == "relu":
        return int(np.sum(np.all(feats == 0.0, axis=0)))
    if activation_kind == "tanh":
        return int(np.sum(feats.std(axis=0) < DEAD_TANH_STD))
    raise ConfigurationError(f"unknown activation {activation_kind!r}")


def feature_stats(probe: FeatureProbe) -> tuple[float, float]:
    """Mean per-sample L2 norm of penultimate pre-activations and activations."""
    pre, act = probe.penultimate_pre, probe.features
    if pre.shape[0] == 0:
        raise ConfigurationError("empty batch")
    return (float(np.linalg.norm(pre, axis=1).mean()),
            float(np.linalg.norm(act, axis=1).mean()))


def policy_variance_across_states(dist: DistParams) -> float:
    if dist.kind == "categorical":
        values = np.exp(categorical_log_probs(dist.logits))
    else:
        values = dist.mean
    if values.shape[0] < 2:
        raise ConfigurationError("policy variance needs at least 2 states")
    return float(values.var(axis=0).mean())


# -- probability ratios ----------------------------------------------------------


def ratio_stats(ratios, eps: float, continuous_policy: bool = False) -> dict:
    """Means of the ratios above ``1+eps`` and below ``1-eps`` plus their quotient."""
    r = np.asarray(ratios, dtype=np.float64).ravel()
    above = r[r > 1.0 + eps]
    below = r[r < 1.0 - eps]
    mean_above = float(above.mean()) if above.size else None
    mean_below = float(below.mean()) if below.size else None
    return {
        "ratio_mean_above": mean_above,
        "ratio_mean_below": mean_below,
        "ratio_frac_out": float((above.size + below.size) / r.size) if r.size else 0.0,
        "excess_ratio": excess_ratio(r, eps, continuous_policy),
    }


def excess_ratio(ratios, eps: float, continuous_policy: bool = False) -> float | None:
    """Mean ratio above ``1+eps`` over mean ratio below ``1-eps``; ``None`` when trivial."""
    r = np.asarray(ratios, dtype=np.float64).ravel()
    above = r[r > 1.0 + eps]
    below = r[r < 1.0 - eps]
    if above.size == 0 or below.size == 0:
        return None
    hi, lo = float(above.mean()), float(below.mean())
    if continuous_policy:
        hi = min(max(hi, RATIO_CLAMP[0]), RATIO_CLAMP[1])
        lo = min(max(lo, RATIO_CLAMP[0]), RATIO_CLAMP[1])
    return hi / lo


# -- series tooling --------------------------------------------------------------


def _present(values) -> np.ndarray:
    return np.array([np.nan if v is None else float(v) for v in values], dtype=np.float64)


def window_aggregate(values, steps=None, run_length: float | None = None,
                     window_frac: float = 0.05, mode: str = "tail") -> float | None:
    """Mean of a logged metric over a trailing window of training progress.

    ``values`` may contain ``None``/NaN for steps where the metric was absent.
    The window is ``(upper - window_frac * run_length, upper]``. In ``tail``
    mode ``upper`` is the last logged step; in ``last_nontrivial_ratio`` mode it
    is the last step with a present value, and at least 10 present values are
    required overall.
    """
    vals = _present(values)
    if vals.size == 0:
        raise ConfigurationError("empty series")
    steps = np.arange(1, vals.size + 1, dtype=np.float64) if steps is None else np.asarray(steps, dtype=np.float64)
    if steps.shape != vals.shape:
        raise ConfigurationError("steps and values must align")
    if run_length is None:
        run_length = float(vals.size) if steps[0] >= 0 and np.all(np.diff(steps) == 1) else float(steps[-1])
    width = window_frac * run_length
    present = ~np.isnan(vals)
    if mode == "tail":
        upper = steps[-1]
    elif mode == "last_nontrivial_ratio":
        if present.sum() < 10:
            return None
        upper = steps[present][-1]
    else:
        raise ConfigurationError(f"unknown window mode {mode!r}")
    in_window = (steps > upper - width) & (steps <= upper) & present
    if not np.any(in_window):
        return None
    return float(vals[in_window].mean())


def ewma_smooth(series, coeff: float = 0.05) -> np.ndarray:
    if not 0.0 < coeff <= 1.0:
        raise ConfigurationError("EWMA coefficient must be in (0, 1]")
    x = np.asarray(series, dtype=np.float64)
    out = np.empty_like(x)
    if x.size == 0:
        return out
    out[0] = x[0]
    for t in range(1, x.size):
        out[t] = coeff * x[t] + (1.0 - coeff) * out[t - 1]
    return out


def rank_correlations(x, y, width: int) -> dict[str, float | None]:
    """Kendall tau, Spearman rho, Pearson r and the width-normalized L2 distance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ConfigurationError("need two aligned 1-D series of length >= 2")
    out: dict[str, float | None] = {
        "normalized_l2": float(np.sqrt(((x - y) ** 2).sum()) / (math.sqrt(x.size) * width))
    }
    if np.all(x == x[0]) or np.all(y == y[0]):
        out.update(kendall_tau=None, spearman_rho=None, pearson_r=None)
        return out
    out["kendall_tau"] = float(stats.kendalltau(x, y).statistic)
    out["spearman_rho"] = float(stats.spearmanr(x, y).statistic)
    out["pearson_r"] = float(stats.pearsonr(x, y).statistic)
    return out


def aggregate_correlations(per_run: Sequence[dict]) -> dict[str, dict[str, float | None]]:
    """Average and worst case across runs; runs with undefined values are skipped per key."""
    out = {}
    for key in ("kendall_tau", "spearman_rho", "pearson_r", "normalized_l2"):
        vals = [r[key] for r in per_run if r.get(key) is not None]
        if not vals:
            out[key] = {"mean": None, "worst": None, "runs": 0}
            continue
        worst = max(vals) if key == "normalized_l2" else min(vals)
        out[key] = {"mean": float(np.mean(vals)), "worst": float(worst), "runs": len(vals)}
    return out


# -- records ---------------------------------------------------------------------


@dataclass
class DiagnosticsRecord:
    """Metrics logged at one point of a run; serialized as one JSON line.

    Rank reports are flattened as ``actor_<metric>`` / ``critic_<metric>``.
    Absent values (e.g. a trivial excess ratio) are written as ``null``.
    """

    step: int
    batch: int
    episode_return_mean: float | None = None
    episode_return_count: int = 0
    entropy: float | None = None
    policy_variance: float | None = None
    actor_dead_neurons: int | None = None
    critic_dead_neurons: int | None = None
    actor_preactivation_norm: float | None = None
    actor_feature_norm: float | None = None
    critic_preactivation_norm: float | None = None
    critic_feature_norm: float | None = None
    actor_rank: dict | None = None
    critic_rank: dict | None = None
    ratio_mean_above: float | None = None
    ratio_mean_below: float | None = None
    ratio_frac_out: float | None = None
    excess_ratio: float | None = None
    clip_objective: float | None = None
    pfo_loss: float | None = None
    value_loss: float | None = None
    entropy_loss: float | None = None
    grad_norm: float | None = None
    actor_capacity_loss: float | None = None
    critic_capacity_loss: float | None = None
    diverged: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        for prefix in ("actor", "critic"):
            rank = d.pop(f"{prefix}_rank")
            for key in RANK_KEYS:
                d[f"{prefix}_{key}"] = None if rank is None else rank[key]
        # non-finite floats are not valid JSON; log them as absent
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=False)


RANK_KEYS = ("effective_rank", "approximate_rank", "srank", "feature_rank_abs", "epsilon_rank")


def read_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def series(records: Iterable[dict], key: str) -> tuple[np.ndarray, list]:
    recs = list(records)
    return np.array([r["step"] for r in recs], dtype=np.float64), [r.get(key) for r in recs]
