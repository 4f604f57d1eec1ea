"""Small reverse-mode differentiation engine over dense float64 matrices.

Every value is a 2-D ``numpy`` array (scalars are 1x1).  Operations are plain
functions that build :class:`Node` objects; each node keeps a reference to its
inputs and a closure mapping the output gradient to input gradients.

Gradients accumulate additively across calls to :func:`backward`; call
:func:`zero_gradients` (or ``Node.zero_grad``) before each minibatch.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "Node",
    "leaf",
    "constant",
    "linear",
    "activation",
    "log_softmax",
    "reduce",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "exp",
    "log",
    "square",
    "sum_rows",
    "take_rows",
    "slice_cols",
    "clip",
    "minimum",
    "backward",
    "zero_gradients",
    "finite_difference_gradient",
]

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ConfigurationError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Node:
    """A value in the computation graph.

    ``trainable`` leaves are the only nodes whose gradient is kept after
    :func:`backward`; intermediate gradients are still stored on every node
    reached, which is handy when debugging.
    """

    __slots__ = ("value", "_grad", "parents", "_backward", "trainable", "name")

    def __init__(
        self,
        value,
        parents: tuple["Node", ...] = (),
        backward_fn: BackwardFn | None = None,
        trainable: bool = False,
        name: str | None = None,
    ):
        self.value = _as_matrix(value)
        self._grad: np.ndarray | None = None
        self.parents = parents
        self._backward = backward_fn
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() needs a scalar node, got shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, trainable={self.trainable})"


def leaf(value, name: str | None = None) -> Node:
    """Trainable leaf. The array is copied into float64 only if needed."""
    return Node(value, trainable=True, name=name)


def constant(value) -> Node:
    return Node(value)


def _check_same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def linear(x: Node, weight: Node, bias: Node) -> Node:
    """``x @ weight + bias`` with the bias broadcast over rows."""
    n, i = x.shape
    if weight.shape[0] != i:
        raise ConfigurationError(f"linear: x is {x.shape} but weight is {weight.shape}")
    if bias.shape != (1, weight.shape[1]):
        raise ConfigurationError(
            f"linear: bias must be (1, {weight.shape[1]}), got {bias.shape}"
        )
    # stacked row-vector products: each output row is bit-identical no matter
    # which other rows share the batch (plain gemm does not guarantee this)
    out = np.matmul(x.value[:, None, :], weight.value)[:, 0, :] + bias.value

    def backward_fn(g):
        return g @ weight.value.T, x.value.T @ g, g.sum(axis=0, keepdims=True)

    return Node(out, (x, weight, bias), backward_fn)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation(x: Node, kind: str) -> Node:
    z = x.value
    if kind == "relu":
        out = np.maximum(z, 0.0)
        deriv = (z > 0).astype(np.float64)
    elif kind == "tanh":
        out = np.tanh(z)
        deriv = 1.0 - out * out
    elif kind == "softplus":
        # log(1 + e^z) without overflow
        out = np.logaddexp(0.0, z)
        deriv = _sigmoid(z)
    else:
        raise ConfigurationError(f"unknown activation {kind!r}")
    return Node(out, (x,), lambda g: (g * deriv,))


def log_softmax(logits: Node) -> Node:
    z = logits.value
    shifted = z - z.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward_fn(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return Node(out, (logits,), backward_fn)


def softmax_cross_entropy(logits: Node, target_probs) -> Node:
    """Per-row ``-sum_j p_j log softmax(z)_j`` as an (N, 1) node.

    Target rows are taken to sum to one, so the gradient is written as
    ``softmax(z) - p``; it is exactly zero when the two agree bitwise.
    """
    z = logits.value
    p = _as_matrix(target_probs)
    if p.shape != z.shape:
        raise ConfigurationError(f"softmax_cross_entropy: {z.shape} logits vs {p.shape} targets")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    out = -(p * logp).sum(axis=1, keepdims=True)
    return Node(out, (logits,), lambda g: (g * (probs - p),))


def reduce(x: Node, op: str = "sum") -> Node:
    """Reduce every entry to a 1x1 node (``sum`` or ``mean``)."""
    count = x.value.size
    if count == 0:
        raise ConfigurationError("reduce over an empty matrix")
    if op == "sum":
        factor = 1.0
    elif op == "mean":
        factor = 1.0 / count
    else:
        raise ConfigurationError(f"unknown reduction {op!r}")
    out = x.value.sum() * factor
    shape = x.shape
    return Node(out, (x,), lambda g: (np.full(shape, g[0, 0] * factor),))


def add(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "add")
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "sub")
    return Node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return Node(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "div")
    av, bv = a.value, b.value
    return Node(av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def scale(x: Node, factor: float) -> Node:
    factor = float(factor)
    return Node(x.value * factor, (x,), lambda g: (g * factor,))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return Node(out, (x,), lambda g: (g * out,))


def log(x: Node) -> Node:
    xv = x.value
    return Node(np.log(xv), (x,), lambda g: (g / xv,))


def square(x: Node) -> Node:
    xv = x.value
    return Node(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def sum_rows(x: Node) -> Node:
    """Sum across columns: (N, K) -> (N, 1)."""
    k = x.shape[1]
    return Node(x.value.sum(axis=1, keepdims=True), (x,), lambda g: (np.repeat(g, k, axis=1),))


def take_rows(x: Node, index: np.ndarray) -> Node:
    """Pick ``x[n, index[n]]`` per row: (N, K) -> (N, 1)."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    if index.shape[0] != n:
        raise ConfigurationError(f"take_rows: {index.shape[0]} indices for {n} rows")
    rows = np.arange(n)
    shape = x.shape

    def backward_fn(g):
        out = np.zeros(shape)
        out[rows, index] = g[:, 0]
        return (out,)

    return Node(x.value[rows, index].reshape(n, 1), (x,), backward_fn)


def slice_cols(x: Node, start: int, stop: int) -> Node:
    shape = x.shape

    def backward_fn(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return Node(x.value[:, start:stop], (x,), backward_fn)


def clip(x: Node, low, high) -> Node:
    """Clamp to ``[low, high]``; bounds may be scalars or arrays broadcastable to ``x``.

    The gradient passes only strictly inside the interval; at or beyond a
    bound it is zero.
    """
    xv = x.value
    mask = ((xv > low) & (xv < high)).astype(np.float64)
    return Node(np.clip(xv, low, high), (x,), lambda g: (g * mask,))


def minimum(a: Node, b: Node) -> Node:
    """Elementwise minimum. On ties the gradient is routed to ``b``."""
    _check_same_shape(a, b, "minimum")
    pick_a = a.value < b.value
    out = np.where(pick_a, a.value, b.value)
    return Node(out, (a, b), lambda g: (np.where(pick_a, g, 0.0), np.where(pick_a, 0.0, g)))


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``.grad`` on every node reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate nodes are reset on
    each call so a second backward over the same graph adds exactly one more
    copy of the gradient to the leaves.
    """
    if loss.value.shape != (1, 1):
        raise ConfigurationError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        if node.parents:
            node._grad = None
    loss._grad = (loss.grad if loss.trainable else np.zeros((1, 1))) + 1.0
    for node in reversed(order):
        if node._backward is None or node._grad is None:
            continue
        grads = node._backward(node._grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            if parent._grad is None:
                parent._grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent._grad = parent._grad + g


def zero_gradients(nodes: Iterable[Node]) -> None:
    for node in nodes:
        node.zero_grad()


def finite_difference_gradient(
    f: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    h: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central differences of ``f`` with respect to every entry of ``params``.

    ``params`` is perturbed in place and restored afterwards.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(params)
            flat[i] = orig - h
            down = f(params)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads
