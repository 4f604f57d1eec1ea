"""MLP actor/critic networks with feature probes and a binary checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError

ACTIVATIONS = ("relu", "tanh")
HEADS = ("categorical", "tanhnormal", "value")

STD_FLOOR = 1e-6
TANH_EPS = 1e-6
HIDDEN_GAIN = float(np.sqrt(2.0))
ACTOR_HEAD_GAIN = 0.01
CRITIC_HEAD_GAIN = 1.0

CHECKPOINT_MAGIC = b"PPOREPR\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    activation: str = "relu"
    head: str = "categorical"
    # number of actions (categorical), action dimension (tanhnormal), ignored for value
    n_outputs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.hidden_widths:
            raise ConfigurationError("hidden_widths must be non-empty")
        if any(w < 1 for w in self.hidden_widths) or self.input_dim < 1:
            raise ConfigurationError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}")
        if self.head == "value":
            object.__setattr__(self, "n_outputs", 1)
        if self.n_outputs < 1:
            raise ConfigurationError("n_outputs must be positive")

    @property
    def output_width(self) -> int:
        if self.head == "tanhnormal":
            return 2 * self.n_outputs
        return self.n_outputs

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_widths, self.output_width)
        return list(zip(dims[:-1], dims[1:]))

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.hidden_widths)):
            names += [f"hidden.{i}.weight", f"hidden.{i}.bias"]
        return names + ["head.weight", "head.bias"]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
            "head": self.head,
            "n_outputs": self.n_outputs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_widths=tuple(d["hidden_widths"]),
            activation=d["activation"],
            head=d["head"],
            n_outputs=int(d["n_outputs"]),
        )


@dataclass
class NetworkParams:
    """Parameter arrays of one MLP, keyed as in ``MlpSpec.param_names``.

    Weights are stored ``(in, out)`` so a layer computes ``x @ W + b``.
    """

    spec: MlpSpec
    arrays: dict[str, np.ndarray]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, {k: v.copy() for k, v in self.arrays.items()})

    def bind(self, shared: dict[str, ad.Node] | None = None) -> dict[str, ad.Node]:
        """Wrap the arrays in trainable leaf nodes (no copy).

        Entries in ``shared`` are reused as-is, which is how a shared trunk
        routes gradients from two heads into the same leaves.
        """
        shared = shared or {}
        return {
            name: shared[name] if name in shared else ad.leaf(arr, name=name)
            for name, arr in self.arrays.items()
        }


@dataclass
class FeatureProbe:
    """Per-hidden-layer pre-activations and activations from one forward pass."""

    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    pre_activation_nodes: list[ad.Node] = field(default_factory=list, repr=False)

    @property
    def penultimate_index(self) -> int:
        return len(self.activations) - 1

    @property
    def penultimate_pre(self) -> np.ndarray:
        return self.pre_activations[-1]

    @property
    def features(self) -> np.ndarray:
        return self.activations[-1]


@dataclass
class DistParams:
    kind: str
    logits: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def rows(self, index) -> "DistParams":
        pick = lambda a: None if a is None else a[index]
        return DistParams(self.kind, pick(self.logits), pick(self.mean), pick(self.std))


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    # C order: a transposed view would round differently in matmul than its copies
    return np.ascontiguousarray(gain * q)


def init_mlp(spec: MlpSpec, seed: int | np.random.Generator) -> NetworkParams:
    """Orthogonal weights (gain sqrt(2) hidden, 0.01 actor head, 1 critic head), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    shapes = spec.layer_shapes
    for i, (fan_in, fan_out) in enumerate(shapes[:-1]):
        arrays[f"hidden.{i}.weight"] = _orthogonal(rng, fan_in, fan_out, HIDDEN_GAIN)
        arrays[f"hidden.{i}.bias"] = np.zeros((1, fan_out))
    fan_in, fan_out = shapes[-1]
    gain = CRITIC_HEAD_GAIN if spec.head == "value" else ACTOR_HEAD_GAIN
    arrays["head.weight"] = _orthogonal(rng, fan_in, fan_out, gain)
    arrays["head.bias"] = np.zeros((1, fan_out))
    return NetworkParams(spec, arrays)


def _check_obs(obs, spec: MlpSpec) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs.reshape(1, -1)
    if obs.ndim != 2 or obs.shape[1] != spec.input_dim:
        raise ConfigurationError(f"observations must be (N, {spec.input_dim}), got {obs.shape}")
    if not np.all(np.isfinite(obs)):
        raise ConfigurationError("observations contain non-finite values")
    return obs


def mlp_graph(
    spec: MlpSpec, leaves: dict[str, ad.Node], obs
) -> tuple[ad.Node, FeatureProbe]:
    """Build the forward graph; returns the raw head output node and a probe."""
    x = ad.constant(_check_obs(obs, spec))
    pre_nodes, pres, acts = [], [], []
    for i in range(len(spec.hidden_widths)):
        z = ad.linear(x, leaves[f"hidden.{i}.weight"], leaves[f"hidden.{i}.bias"])
        x = ad.activation(z, spec.activation)
        pre_nodes.append(z)
        pres.append(z.value)
        acts.append(x.value)
    out = ad.linear(x, leaves["head.weight"], leaves["head.bias"])
    return out, FeatureProbe(pres, acts, pre_nodes)


def split_tanhnormal(out: ad.Node, action_dim: int) -> tuple[ad.Node, ad.Node]:
    """Head output -> (mean, std) nodes with ``std = softplus(raw) + floor``."""
    mean = ad.slice_cols(out, 0, action_dim)
    raw = ad.slice_cols(out, action_dim, 2 * action_dim)
    std = ad.add(ad.activation(raw, "softplus"), ad.constant(np.full(raw.shape, STD_FLOOR)))
    return mean, std


def dist_from_output(spec: MlpSpec, out: ad.Node) -> DistParams:
    if spec.head == "categorical":
        return DistParams("categorical", logits=out.value)
    if spec.head == "tanhnormal":
        mean, std = split_tanhnormal(out, spec.n_outputs)
        return DistParams("tanhnormal", mean=mean.value, std=std.value)
    raise ConfigurationError("value networks have no action distribution")


def actor_forward(params: NetworkParams, obs) -> tuple[DistParams, FeatureProbe]:
    if params.spec.head == "value":
        raise ConfigurationError("actor_forward needs a categorical or tanhnormal head")
    out, probe = mlp_graph(params.spec, params.bind(), obs)
    return dist_from_output(params.spec, out), probe


def critic_forward(params: NetworkParams, obs) -> tuple[np.ndarray, FeatureProbe]:
    if params.spec.head != "value":
        raise ConfigurationError("critic_forward needs a value head")
    out, probe = mlp_graph(params.spec, params.bind(), obs)
    return out.value[:, 0].copy(), probe


# -- distributions -----------------------------------------------------------


def categorical_log_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def categorical_entropy(logits: np.ndarray) -> np.ndarray:
    logp = categorical_log_probs(logits)
    p = np.exp(logp)
    return -(p * logp).sum(axis=1)


def categorical_sample_logprob_entropy(logits, rng: np.random.Generator):
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ConfigurationError("logits must be finite")
    logp = categorical_log_probs(logits)
    p = np.exp(logp)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(logits.shape[0])
    actions = (cdf < u[:, None]).sum(axis=1)
    actions = np.minimum(actions, logits.shape[1] - 1)
    # never pick an action whose probability underflowed to zero
    zero = p[np.arange(len(actions)), actions] == 0.0
    if np.any(zero):
        actions[zero] = np.argmax(p[zero], axis=1)
    log_probs = logp[np.arange(len(actions)), actions]
    return actions, log_probs, -(p * logp).sum(axis=1)


def tanh_log_det(u: np.ndarray) -> np.ndarray:
    """Sum over action dims of ``log(1 - tanh(u)^2 + eps)``."""
    t = np.tanh(u)
    return np.log(1.0 - t * t + TANH_EPS).sum(axis=1)


def tanhnormal_log_prob(mean, std, u) -> np.ndarray:
    """Log-density of ``tanh(u)`` where ``u ~ Normal(mean, std)``, from the pre-tanh sample."""
    mean, std, u = (np.asarray(a, dtype=np.float64) for a in (mean, std, u))
    # same operation order as log_prob_nodes, so both give identical bits
    z = (u - mean) / std
    per_dim = (z * z) * -0.5 + np.log(std) * -1.0
    const = -0.5 * np.log(2.0 * np.pi) * mean.shape[1]
    return per_dim.sum(axis=1) + (const - tanh_log_det(u))


def tanhnormal_sample_logprob(mean, std, rng: np.random.Generator):
    """Returns ``(actions, pre_tanh, log_probs)``."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ConfigurationError("std must be positive")
    u = mean + std * rng.standard_normal(mean.shape)
    return np.tanh(u), u, tanhnormal_log_prob(mean, std, u)


def log_prob_nodes(spec: MlpSpec, out: ad.Node, actions, pre_tanh=None) -> ad.Node:
    """Differentiable log-probabilities of stored actions, shape (N, 1)."""
    if spec.head == "categorical":
        return ad.take_rows(ad.log_softmax(out), actions)
    if spec.head == "tanhnormal":
        mean, std = split_tanhnormal(out, spec.n_outputs)
        u = ad.constant(pre_tanh)
        z = ad.div(ad.sub(u, mean), std)
        const = -0.5 * np.log(2.0 * np.pi) * spec.n_outputs
        per_dim = ad.add(ad.scale(ad.square(z), -0.5), ad.scale(ad.log(std), -1.0))
        correction = const - tanh_log_det(np.asarray(pre_tanh)).reshape(-1, 1)
        return ad.add(ad.sum_rows(per_dim), ad.constant(correction))
    raise ConfigurationError("value networks have no log-probabilities")


def entropy_node(spec: MlpSpec, out: ad.Node, log_probs: ad.Node | None = None) -> ad.Node:
    """Per-sample entropy (N, 1).

    Categorical uses the exact formula. TanhNormal has no closed form; the
    single-sample estimate ``-log_prob`` of the supplied actions is used.
    """
    if spec.head == "categorical":
        logp = ad.log_softmax(out)
        return ad.scale(ad.sum_rows(ad.mul(ad.exp(logp), logp)), -1.0)
    if log_probs is None:
        raise ConfigurationError("tanhnormal entropy needs sampled log-probabilities")
    return ad.scale(log_probs, -1.0)


def recompute_log_probs(dist: DistParams, actions, pre_tanh=None) -> np.ndarray:
    if dist.kind == "categorical":
        logp = categorical_log_probs(dist.logits)
        actions = np.asarray(actions, dtype=np.int64)
        return logp[np.arange(len(actions)), actions]
    return tanhnormal_log_prob(dist.mean, dist.std, pre_tanh)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, networks: dict[str, NetworkParams], meta: dict | None = None,
                    shared: dict[str, str] | None = None) -> None:
    """Write networks to ``path``.

    ``shared`` maps ``"critic/hidden.0.weight" -> "actor/hidden.0.weight"`` for
    arrays that alias another network's (shared trunk); aliased arrays are
    stored once.
    """
    shared = shared or {}
    entries = []
    payload = []
    for net_name, net in networks.items():
        names = []
        for name in net.spec.param_names():
            key = f"{net_name}/{name}"
            if key in shared:
                continue
            arr = np.ascontiguousarray(net.arrays[name], dtype="<f8")
            names.append([name, list(arr.shape)])
            payload.append(arr.tobytes())
        entries.append({"name": net_name, "spec": net.spec.to_dict(), "arrays": names})
    header = json.dumps(
        {"networks": entries, "shared": shared, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict[str, NetworkParams], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    networks: dict[str, NetworkParams] = {}
    for entry in header["networks"]:
        arrays = {}
        for name, shape in entry["arrays"]:
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            arrays[name] = arr.astype(np.float64).reshape(shape)
            offset += 8 * count
        networks[entry["name"]] = NetworkParams(MlpSpec.from_dict(entry["spec"]), arrays)
    for key, source in header["shared"].items():
        net_name, name = key.split("/", 1)
        src_net, src_name = source.split("/", 1)
        networks[net_name].arrays[name] = networks[src_net].arrays[src_name]
    for net in networks.values():
        net.arrays = {name: net.arrays[name] for name in net.spec.param_names()}
    if offset != len(data):
        raise ConfigurationError(f"{path}: trailing bytes in checkpoint")
    return networks, header["meta"]


# -- actor-critic pair -----------------------------------------------------------


@dataclass
class ActorCritic:
    """Actor and critic parameters.

    With ``shared_trunk`` the critic's hidden arrays are the actor's arrays
    (same objects), so in-place optimizer updates keep them tied.
    """

    actor: NetworkParams
    critic: NetworkParams
    shared_trunk: bool = False

    def trunk_names(self) -> list[str]:
        return [n for n in self.actor.spec.param_names() if n.startswith("hidden.")]

    def trainable(self) -> dict[str, np.ndarray]:
        """Unique trainable arrays keyed ``actor/<name>`` and ``critic/<name>``."""
        out = {f"actor/{k}": v for k, v in self.actor.arrays.items()}
        for k, v in self.critic.arrays.items():
            if self.shared_trunk and k.startswith("hidden."):
                continue
            out[f"critic/{k}"] = v
        return out

    def bind(self) -> tuple[dict[str, ad.Node], dict[str, ad.Node], dict[str, ad.Node]]:
        """Leaf nodes for both networks plus the flat trainable mapping."""
        actor_leaves = self.actor.bind()
        shared = {k: actor_leaves[k] for k in self.trunk_names()} if self.shared_trunk else None
        critic_leaves = self.critic.bind(shared)
        flat = {f"actor/{k}": v for k, v in actor_leaves.items()}
        for k, v in critic_leaves.items():
            if not (self.shared_trunk and k.startswith("hidden.")):
                flat[f"critic/{k}"] = v
        return actor_leaves, critic_leaves, flat

    def copy(self) -> "ActorCritic":
        actor = self.actor.copy()
        critic = self.critic.copy()
        if self.shared_trunk:
            for k in self.trunk_names():
                critic.arrays[k] = actor.arrays[k]
        return ActorCritic(actor, critic, self.shared_trunk)

    def shared_map(self) -> dict[str, str]:
        if not self.shared_trunk:
            return {}
        return {f"critic/{k}": f"actor/{k}" for k in self.trunk_names()}

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(path, {"actor": self.actor, "critic": self.critic}, meta, self.shared_map())

    @classmethod
    def load(cls, path) -> tuple["ActorCritic", dict]:
        nets, meta = load_checkpoint(path)
        shared = nets["critic"].arrays.get("hidden.0.weight") is nets["actor"].arrays.get("hidden.0.weight")
        return cls(nets["actor"], nets["critic"], shared), meta


def init_actor_critic(actor_spec: MlpSpec, critic_spec: MlpSpec, seed: int | np.random.Generator,
                      shared_trunk: bool = False) -> ActorCritic:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if shared_trunk and (
        actor_spec.input_dim != critic_spec.input_dim
        or actor_spec.hidden_widths != critic_spec.hidden_widths
        or actor_spec.activation != critic_spec.activation
    ):
        raise ConfigurationError("a shared trunk needs identical actor and critic hidden layers")
    actor = init_mlp(actor_spec, rng)
    critic = init_mlp(critic_spec, rng)
    agent = ActorCritic(actor, critic, shared_trunk)
    if shared_trunk:
        for k in agent.trunk_names():
            critic.arrays[k] = actor.arrays[k]
    return agent
