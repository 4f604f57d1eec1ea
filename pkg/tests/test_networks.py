import numpy as np
import pytest
from scipy import integrate

from ppo_repr import autodiff as ad
from ppo_repr.errors import ConfigurationError
from ppo_repr.networks import (
    ActorCritic,
    MlpSpec,
    actor_forward,
    categorical_sample_logprob_entropy,
    critic_forward,
    init_mlp,
    log_prob_nodes,
    mlp_graph,
    recompute_log_probs,
    tanhnormal_log_prob,
    tanhnormal_sample_logprob,
)

from conftest import small_agent


def test_orthogonal_init_gains_and_zero_bias():
    spec = MlpSpec(29, (64, 64), "relu", "categorical", 4)
    p = init_mlp(spec, 0)
    w0 = p.arrays["hidden.0.weight"]  # 29 x 64: rows orthogonal
    np.testing.assert_allclose(w0 @ w0.T, 2.0 * np.eye(29), atol=1e-12)
    w1 = p.arrays["hidden.1.weight"]
    np.testing.assert_allclose(w1.T @ w1, 2.0 * np.eye(64), atol=1e-12)
    head = p.arrays["head.weight"]
    np.testing.assert_allclose(head.T @ head, 1e-4 * np.eye(4), atol=1e-15)
    for name in spec.param_names():
        if name.endswith("bias"):
            assert not p.arrays[name].any()
    v = init_mlp(MlpSpec(29, (64, 64), "relu", "value"), 0).arrays["head.weight"]
    assert np.isclose(np.linalg.norm(v), 1.0)


def test_init_is_deterministic():
    spec = MlpSpec(3, (8, 8), "tanh", "tanhnormal", 2)
    a, b = init_mlp(spec, 7), init_mlp(spec, 7)
    for k in a.arrays:
        assert np.array_equal(a.arrays[k], b.arrays[k])


def test_output_shapes():
    agent = small_agent("tanhnormal", n_out=2)
    obs = np.zeros((6, 3))
    dist, probe = actor_forward(agent.actor, obs)
    assert dist.mean.shape == (6, 2) and dist.std.shape == (6, 2)
    assert np.all(dist.std > 0)
    assert len(probe.pre_activations) == 2 and probe.features.shape == (6, 4)
    values, _ = critic_forward(agent.critic, obs)
    assert values.shape == (6,)


def test_non_finite_observation_rejected():
    agent = small_agent()
    with pytest.raises(ConfigurationError):
        actor_forward(agent.actor, np.array([[0.0, np.nan, 1.0]]))
    with pytest.raises(ConfigurationError):
        actor_forward(agent.actor, np.zeros((2, 4)))


def test_categorical_sampling_frequencies():
    logits = np.tile(np.log([[0.1, 0.2, 0.7]]), (20000, 1))
    actions, logp, ent = categorical_sample_logprob_entropy(logits, np.random.default_rng(0))
    freq = np.bincount(actions, minlength=3) / len(actions)
    np.testing.assert_allclose(freq, [0.1, 0.2, 0.7], atol=0.01)
    np.testing.assert_allclose(np.exp(logp), np.array([0.1, 0.2, 0.7])[actions])
    np.testing.assert_allclose(ent, -(np.log([0.1, 0.2, 0.7]) * [0.1, 0.2, 0.7]).sum())


def test_tanhnormal_density_integrates_to_one():
    mean, std = np.array([[0.3]]), np.array([[0.8]])

    def density(a):
        u = np.arctanh(np.array([[a]]))
        return float(np.exp(tanhnormal_log_prob(mean, std, u))[0])

    total, _ = integrate.quad(density, -1 + 1e-12, 1 - 1e-12, limit=200)
    assert abs(total - 1.0) < 1e-4  # the 1e-6 stabilizer in the log-det costs a little mass


def test_graph_log_probs_match_sampling_log_probs(rng):
    for head, n_out in (("categorical", 3), ("tanhnormal", 2)):
        agent = small_agent(head, n_out=n_out)
        obs = rng.standard_normal((10, 3))
        out, _ = mlp_graph(agent.actor.spec, agent.actor.bind(), obs)
        dist, _ = actor_forward(agent.actor, obs)
        if head == "categorical":
            actions, logp, _ = categorical_sample_logprob_entropy(dist.logits, rng)
            pre = None
        else:
            actions, pre, logp = tanhnormal_sample_logprob(dist.mean, dist.std, rng)
        node = log_prob_nodes(agent.actor.spec, out, actions, pre)
        assert np.array_equal(node.value[:, 0], logp)
        assert np.array_equal(recompute_log_probs(dist, actions, pre), logp)


def test_shared_trunk_receives_critic_gradient(rng):
    agent = small_agent(shared=True)
    actor_leaves, critic_leaves, flat = agent.bind()
    assert critic_leaves["hidden.0.weight"] is actor_leaves["hidden.0.weight"]
    assert "critic/hidden.0.weight" not in flat
    out, _ = mlp_graph(agent.critic.spec, critic_leaves, rng.standard_normal((4, 3)))
    ad.backward(ad.reduce(ad.square(out), "sum"))
    assert np.abs(actor_leaves["hidden.0.weight"].grad).sum() > 0


def test_checkpoint_round_trip(tmp_path):
    for shared in (False, True):
        agent = small_agent("tanhnormal", n_out=2, shared=shared)
        path = tmp_path / f"ck{shared}.bin"
        agent.save(path, {"step": 5})
        loaded, meta = ActorCritic.load(path)
        assert meta["step"] == 5 and loaded.shared_trunk == shared
        assert loaded.actor.spec == agent.actor.spec
        for k in agent.trainable():
            assert np.array_equal(loaded.trainable()[k], agent.trainable()[k])
        if shared:
            assert loaded.critic.arrays["hidden.0.weight"] is loaded.actor.arrays["hidden.0.weight"]
        path2 = tmp_path / "again.bin"
        loaded.save(path2, {"step": 5})
        assert path2.read_bytes() == path.read_bytes()


def test_corrupt_checkpoint_rejected(tmp_path):
    agent = small_agent()
    path = tmp_path / "ck.bin"
    agent.save(path)
    data = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"X" + data[1:])
    with pytest.raises(ConfigurationError):
        ActorCritic.load(tmp_path / "bad.bin")
    (tmp_path / "long.bin").write_bytes(data + b"\0" * 8)
    with pytest.raises(ConfigurationError):
        ActorCritic.load(tmp_path / "long.bin")


def test_copies_compute_identical_bits(rng, tmp_path):
    # weights with fan_in < fan_out are built from a transpose; layout must not leak into results
    agent = small_agent("tanhnormal", n_out=2, obs_dim=3, widths=(16, 8))
    obs = rng.standard_normal((50, 3))
    ref, _ = mlp_graph(agent.actor.spec, agent.actor.bind(), obs)
    agent.save(tmp_path / "a.bin")
    for other in (agent.copy(), ActorCritic.load(tmp_path / "a.bin")[0]):
        out, _ = mlp_graph(other.actor.spec, other.actor.bind(), obs)
        assert np.array_equal(out.value, ref.value)
