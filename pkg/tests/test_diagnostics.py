import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppo_repr.diagnostics import (
    DiagnosticsRecord,
    aggregate_correlations,
    dead_neurons,
    ewma_smooth,
    excess_ratio,
    feature_stats,
    jacobi_eigenvalues,
    policy_variance_across_states,
    rank_correlations,
    rank_report,
    rank_report_from_sigma,
    singular_values,
    window_aggregate,
)
from ppo_repr.errors import ConfigurationError
from ppo_repr.networks import DistParams, FeatureProbe, MlpSpec, init_mlp, mlp_graph

from oracles import kendall_tau_b_bruteforce, oracle_singular_values


# -- singular values ----------------------------------------------------------------


def test_rank_one_matrix():
    phi = np.tile(np.eye(4)[1], (10, 1))
    s = singular_values(phi)
    np.testing.assert_allclose(s, [math.sqrt(10), 0, 0, 0], atol=1e-12)


def test_orthonormal_rows():
    phi = np.vstack([np.eye(6), np.zeros((4, 6))])
    np.testing.assert_allclose(singular_values(phi), np.ones(6), atol=1e-14)


def test_jacobi_on_known_spectrum(rng):
    q, _ = np.linalg.qr(rng.standard_normal((7, 7)))
    eig = np.array([5.0, 3.0, 3.0, 1.0, 0.5, 1e-6, 0.0])
    a = q @ np.diag(eig) @ q.T
    np.testing.assert_allclose(np.sort(jacobi_eigenvalues(a)), np.sort(eig), atol=1e-12)


def test_singular_values_against_bisection_oracle(rng):
    for _ in range(5):
        phi = rng.standard_normal((30, 6))
        np.testing.assert_allclose(singular_values(phi), oracle_singular_values(phi), rtol=1e-10)


def test_singular_values_rejects_non_finite():
    with pytest.raises(ConfigurationError):
        singular_values(np.array([[1.0, np.inf], [0.0, 1.0], [1.0, 1.0]]))


# -- rank metrics -------------------------------------------------------------------


def test_uniform_spectrum():
    r = rank_report_from_sigma(np.ones(10), n_samples=100)
    assert math.isclose(r.effective_rank, 10.0)
    assert (r.approximate_rank, r.srank, r.feature_rank_abs, r.epsilon_rank) == (10, 10, 10, 10)


def test_rank_one_spectrum():
    r = rank_report_from_sigma([1.0, 0, 0, 0], n_samples=16)
    assert r.effective_rank == 1.0
    assert (r.approximate_rank, r.srank, r.feature_rank_abs, r.epsilon_rank) == (1, 1, 1, 1)


def test_approximate_rank_and_srank_differ():
    r = rank_report_from_sigma([10.0, 1.0, 0.0, 0.0], n_samples=100)
    assert r.approximate_rank == 1 and r.srank == 2


def test_tiny_spectrum_does_not_underflow():
    r = rank_report_from_sigma([1e-170, 1e-171], n_samples=10)
    assert (r.approximate_rank, r.srank, r.epsilon_rank, r.feature_rank_abs) == (1, 2, 2, 0)


def test_all_zero_features():
    r = rank_report(np.zeros((20, 4)))
    assert r.effective_rank == 0.0
    assert (r.approximate_rank, r.srank, r.feature_rank_abs, r.epsilon_rank) == (0, 0, 0, 0)


def test_rank_needs_fewer_columns_than_rows():
    with pytest.raises(ConfigurationError):
        rank_report(np.ones((4, 4)))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1e3), min_size=1, max_size=20))
def test_approximate_rank_never_exceeds_srank(sigma):
    if max(sigma) == 0:
        return
    r = rank_report_from_sigma(sigma, n_samples=1000)
    assert r.approximate_rank <= r.srank
    assert r.effective_rank <= len(sigma) + 1e-9


def test_rank_invariances(rng):
    phi = rng.standard_normal((40, 5)) * np.array([3.0, 1.0, 0.3, 0.05, 0.01])
    base = rank_report(phi).metrics()
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    for variant in (phi[rng.permutation(40)], phi @ q):
        m = rank_report(variant).metrics()
        for k in base:
            assert math.isclose(m[k], base[k], rel_tol=1e-9), k


# -- neurons, norms, policy variance ---------------------------------------------------


def test_dead_neurons_constructed_relu(rng):
    spec = MlpSpec(5, (16, 12), "relu", "categorical", 3)
    p = init_mlp(spec, 0)
    obs = rng.standard_normal((64, 5))
    _, probe = mlp_graph(spec, p.bind(), obs)
    alive = np.flatnonzero(probe.features.any(axis=0))
    dead = alive[:3]
    p.arrays["hidden.1.weight"][:, dead] = 0.0
    p.arrays["hidden.1.bias"][0, dead] = -1.0
    _, probe2 = mlp_graph(spec, p.bind(), obs)
    assert dead_neurons(probe2, "relu") == dead_neurons(probe, "relu") + 3


def test_dead_neurons_tanh_constant_column(rng):
    feats = np.tanh(rng.standard_normal((50, 4)))
    feats[:, 2] = 0.5
    feats[:, 3] = 0.2 + 1e-5 * rng.standard_normal(50)
    assert dead_neurons(feats, "tanh") == 2


def test_no_dead_neurons_at_init(rng):
    spec = MlpSpec(29, (64, 64), "relu", "categorical", 4)
    for seed in range(3):
        _, probe = mlp_graph(spec, init_mlp(spec, seed).bind(), rng.standard_normal((256, 29)))
        assert dead_neurons(probe, "relu") == 0


def test_feature_stats_hand_cases():
    relu = lambda z: np.maximum(z, 0.0)
    for pre, expected in (([3.0, 4.0], (5.0, 5.0)), ([-3.0, 4.0], (5.0, 4.0)), ([0.0, 0.0], (0.0, 0.0))):
        z = np.array([pre])
        assert feature_stats(FeatureProbe([z], [relu(z)])) == expected


def test_policy_variance():
    two = DistParams("categorical", logits=np.log(np.array([[1.0, 1e-300], [1e-300, 1.0]])))
    assert math.isclose(policy_variance_across_states(two), 0.25)
    same = DistParams("categorical", logits=np.zeros((5, 3)))
    assert policy_variance_across_states(same) == 0.0
    with pytest.raises(ConfigurationError):
        policy_variance_across_states(DistParams("categorical", logits=np.zeros((1, 3))))


# -- ratios --------------------------------------------------------------------------


def test_excess_ratio_hand_cases(rng):
    assert excess_ratio([1.0, 1.05, 0.95], 0.1) is None
    assert excess_ratio([1.3, 0.8], 0.1) == 1.3 / 0.8
    r = np.array([1.3, 1.5, 0.8, 0.5, 1.0])
    assert excess_ratio(r, 0.1) == 1.4 / 0.65
    assert excess_ratio(rng.permutation(r), 0.1) == 1.4 / 0.65
    assert excess_ratio([1e15, 0.5], 0.1, continuous_policy=True) == 1e12 / 0.5
    assert excess_ratio([2.0, 1e-20], 0.1, continuous_policy=True) == 2.0 / 1e-12


# -- windows, smoothing, correlations -------------------------------------------------


def test_window_constant_series():
    vals = [3.0] * 40
    assert window_aggregate(vals) == 3.0
    assert window_aggregate(vals, mode="last_nontrivial_ratio") == 3.0


def test_window_tail_and_global():
    vals = np.arange(1.0, 101.0)
    assert window_aggregate(vals, steps=np.arange(1, 101), run_length=100) == np.mean([96, 97, 98, 99, 100])
    assert window_aggregate(vals, window_frac=1.0) == vals.mean()


def test_window_last_nontrivial_ratio():
    steps = np.arange(1, 101)
    vals = [float(s) if s <= 60 else None for s in steps]
    assert window_aggregate(vals, steps, 100, 0.05, "last_nontrivial_ratio") == np.mean([56, 57, 58, 59, 60])
    sparse = [1.0 if s % 11 == 0 else None for s in steps]  # 9 present values
    assert window_aggregate(sparse, steps, 100, 0.05, "last_nontrivial_ratio") is None


def test_ewma_closed_forms():
    np.testing.assert_array_equal(ewma_smooth([2.0] * 5), [2.0] * 5)
    x = np.random.default_rng(0).standard_normal(10)
    np.testing.assert_array_equal(ewma_smooth(x, 1.0), x)
    step = np.r_[np.zeros(3), np.ones(50)]
    s = ewma_smooth(step)
    np.testing.assert_allclose(s[3:], 1 - 0.95 ** np.arange(1, 51), rtol=1e-13)


def test_correlation_hand_cases():
    x = np.array([1.0, 2.0, 3.0, 5.0])
    same = rank_correlations(x, x, width=4)
    assert same == {"normalized_l2": 0.0, "kendall_tau": 1.0, "spearman_rho": 1.0, "pearson_r": 1.0}
    neg = rank_correlations(x, -x, width=4)
    assert neg["kendall_tau"] == neg["spearman_rho"] == -1.0 and math.isclose(neg["pearson_r"], -1.0)
    assert math.isclose(rank_correlations([1, 2, 3], [1, 3, 2], 1)["kendall_tau"], 1 / 3)
    l2 = rank_correlations([0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0], width=2)
    assert l2["normalized_l2"] == 0.5 and l2["kendall_tau"] is None


def test_kendall_matches_bruteforce_with_ties(rng):
    for _ in range(20):
        x, y = rng.integers(0, 4, 12).astype(float), rng.integers(0, 4, 12).astype(float)
        if np.all(x == x[0]) or np.all(y == y[0]):
            continue
        assert math.isclose(rank_correlations(x, y, 1)["kendall_tau"], kendall_tau_b_bruteforce(x, y))


def test_aggregate_correlations():
    runs = [{"kendall_tau": 0.5, "spearman_rho": 0.4, "pearson_r": None, "normalized_l2": 0.1},
            {"kendall_tau": 0.1, "spearman_rho": 0.8, "pearson_r": 0.3, "normalized_l2": 0.7}]
    agg = aggregate_correlations(runs)
    assert agg["kendall_tau"] == {"mean": 0.3, "worst": 0.1, "runs": 2}
    assert agg["normalized_l2"]["worst"] == 0.7
    assert agg["pearson_r"] == {"mean": 0.3, "worst": 0.3, "runs": 1}


# -- records -------------------------------------------------------------------------


def test_record_serialization():
    rec = DiagnosticsRecord(step=10, batch=1, entropy=float("nan"),
                            actor_rank={"effective_rank": 2.5, "approximate_rank": 2, "srank": 3,
                                        "feature_rank_abs": 3, "epsilon_rank": 4})
    d = json.loads(rec.to_json())
    assert d["entropy"] is None and d["actor_srank"] == 3 and d["critic_srank"] is None
    assert "actor_rank" not in d


def test_singular_values_at_extreme_scales(rng):
    phi = rng.standard_normal((30, 5))
    base = singular_values(phi)
    for c in (1e-160, 1e160):
        np.testing.assert_allclose(singular_values(c * phi) / c, base, rtol=1e-12)
    assert not singular_values(np.zeros((6, 3))).any()
