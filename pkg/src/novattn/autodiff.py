"""Reverse-mode automatic differentiation on dense float64 matrices.

A ``Graph`` is a dynamically built tape of primitive operations over 2-D
arrays (vectors are carried as 1xN rows). Node values are computed eagerly
at construction time, so shape errors surface where the graph is built;
``evaluate_graph`` designates the result and ``backpropagate`` walks the
tape in reverse, accumulating exact adjoints.

The primitive set is closed and small; every entry has a hand-derived
adjoint that is checked against central finite differences in the test
suite. Structural primitives (row slice/concat, transposed matmul) exist
so batched training can keep per-episode attention inside one tape while
the dense layers run as large matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphError(RuntimeError):
    """Misuse of the tape (backprop before forward, missing output, ...)."""


class ShapeError(ValueError):
    """Incompatible operand shapes at graph-construction time."""


def as_matrix(x) -> np.ndarray:
    """Coerce to a rank-2 float64 array; scalars become 1x1, vectors 1xN."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim > 2:
        raise ShapeError(f"arrays of rank {a.ndim} are not supported (max rank 2)")
    return a


class Node:
    """One tape entry: primitive tag, input nodes, eager value, adjoint slot."""

    __slots__ = ("idx", "op", "inputs", "value", "grad", "aux", "n_consumers", "pending")

    def __init__(self, idx, op, inputs, value, aux=None):
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.aux = aux
        self.n_consumers = 0
        self.pending = 0

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.idx}, {self.op}, shape={self.value.shape})"


class Graph:
    """Append-only computation tape; node order is a topological order."""

    def __init__(self, check_finite: bool = False):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.output: Node | None = None
        self.check_finite = check_finite
        self._evaluated = False

    # -- leaves ---------------------------------------------------------

    def input(self, array) -> Node:
        return self._append("input", (), as_matrix(array))

    def parameter(self, name: str, array) -> Node:
        if name in self.params:
            raise GraphError(f"parameter {name!r} bound twice in one graph")
        node = self._append("param", (), as_matrix(array))
        self.params[name] = node
        return node

    # -- primitives -----------------------------------------------------

    def matmul(self, a: Node, b: Node, transpose_b: bool = False) -> Node:
        inner_b = b.shape[1] if transpose_b else b.shape[0]
        if a.shape[1] != inner_b:
            raise ShapeError(
                f"matmul mismatch: {a.shape} @ {b.shape}"
                f"{'.T' if transpose_b else ''}"
            )
        value = a.value @ (b.value.T if transpose_b else b.value)
        return self._append("matmul", (a, b), value, aux=transpose_b)

    def add(self, a: Node, b: Node) -> Node:
        self._require_same_shape("add", a, b)
        return self._append("add", (a, b), a.value + b.value)

    def mul(self, a: Node, b: Node) -> Node:
        self._require_same_shape("mul", a, b)
        return self._append("mul", (a, b), a.value * b.value)

    def add_bias(self, a: Node, bias: Node) -> Node:
        """Broadcast a 1xN bias row over the rows of ``a`` (the one documented broadcast)."""
        if bias.shape[0] != 1 or bias.shape[1] != a.shape[1]:
            raise ShapeError(f"bias {bias.shape} does not broadcast over rows of {a.shape}")
        return self._append("add_bias", (a, bias), a.value + bias.value)

    def relu(self, a: Node) -> Node:
        return self._append("relu", (a,), np.maximum(a.value, 0.0))

    def sigmoid(self, a: Node) -> Node:
        x = a.value
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return self._append("sigmoid", (a,), out)

    def softmax_rows(self, a: Node) -> Node:
        # Row max is subtracted before exponentiation for stability.
        shifted = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        value = e / e.sum(axis=1, keepdims=True)
        return self._append("softmax_rows", (a,), value)

    def log(self, a: Node) -> Node:
        return self._append("log", (a,), np.log(a.value))

    def scale(self, a: Node, c: float) -> Node:
        return self._append("scale", (a,), a.value * float(c), aux=float(c))

    def concat_cols(self, parts: list[Node]) -> Node:
        self._require_parts("concat_cols", parts)
        rows = {p.shape[0] for p in parts}
        if len(rows) != 1:
            raise ShapeError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
        widths = [p.shape[1] for p in parts]
        return self._append("concat_cols", tuple(parts), np.hstack([p.value for p in parts]), aux=widths)

    def concat_rows(self, parts: list[Node]) -> Node:
        self._require_parts("concat_rows", parts)
        cols = {p.shape[1] for p in parts}
        if len(cols) != 1:
            raise ShapeError(f"concat_rows column mismatch: {[p.shape for p in parts]}")
        counts = [p.shape[0] for p in parts]
        return self._append("concat_rows", tuple(parts), np.vstack([p.value for p in parts]), aux=counts)

    def slice_rows(self, a: Node, start: int, stop: int) -> Node:
        if not (0 <= start <= stop <= a.shape[0]):
            raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {a.shape}")
        return self._append("slice_rows", (a,), a.value[start:stop].copy(), aux=(start, stop))

    def pairwise_distance(self, q: Node, k: Node) -> Node:
        """Euclidean distance between every row of ``q`` and every row of ``k``.

        Computed from explicit row differences (not the expanded-square
        identity) so values match a brute-force per-pair norm to machine
        precision.
        """
        if q.shape[1] != k.shape[1]:
            raise ShapeError(f"pairwise_distance dim mismatch: {q.shape} vs {k.shape}")
        diff = q.value[:, None, :] - k.value[None, :, :]
        value = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        return self._append("pairwise_distance", (q, k), value)

    def mean_reduce(self, a: Node) -> Node:
        return self._append("mean_reduce", (a,), np.array([[a.value.mean()]]))

    def layer_norm(self, a: Node, eps: float = 1e-8) -> Node:
        """Per-row normalization to mean 0 / unit population std.

        ``eps`` sits under the root so constant rows map to zero rather
        than dividing by zero.
        """
        x = a.value
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        s = np.sqrt(var + eps)
        return self._append("layer_norm", (a,), (x - mu) / s, aux=s)

    # -- evaluation / backward ------------------------------------------

    def set_output(self, node: Node) -> Node:
        self.output = node
        return node

    def _append(self, op, inputs, value, aux=None) -> Node:
        node = Node(len(self.nodes), op, inputs, value, aux)
        if self.check_finite and not np.isfinite(value).all():
            raise GraphError(f"non-finite value produced by node {node!r}")
        for parent in inputs:
            parent.n_consumers += 1
        self.nodes.append(node)
        return node

    @staticmethod
    def _require_same_shape(op, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")

    @staticmethod
    def _require_parts(op, parts):
        if not parts:
            raise ShapeError(f"{op} needs at least one part")


def evaluate_graph(graph: Graph) -> np.ndarray:
    """Return the designated output array (values are computed eagerly)."""
    if graph.output is None:
        raise GraphError("no output node designated (call set_output first)")
    if not np.isfinite(graph.output.value).all():
        raise GraphError("graph output contains non-finite values")
    graph._evaluated = True
    return graph.output.value


def backpropagate(graph: Graph, seed_gradient=None) -> dict[str, np.ndarray]:
    """Accumulate adjoints in reverse topological order.

    Returns the gradient for every parameter bound into the graph (zeros
    for parameters that do not influence the output). ``seed_gradient``
    defaults to all-ones, matching d(sum of outputs)/d(node).
    """
    if not graph._evaluated:
        raise GraphError("backpropagate called before evaluate_graph")
    out = graph.output
    if seed_gradient is None:
        seed = np.ones_like(out.value)
    else:
        seed = as_matrix(seed_gradient)
        if seed.shape != out.value.shape:
            raise ShapeError(f"seed gradient {seed.shape} does not match output {out.value.shape}")
    for node in graph.nodes:
        node.grad = None
        node.pending = node.n_consumers
    out.grad = seed.copy()
    for node in reversed(graph.nodes):
        if node.grad is None or not node.inputs:
            continue
        _BACKWARD[node.op](node)
    return {
        name: (node.grad if node.grad is not None else np.zeros_like(node.value))
        for name, node in graph.params.items()
    }


def _accumulate(node: Node, contribution: np.ndarray, owned: bool = True):
    """Add one adjoint contribution.

    ``owned`` marks contributions freshly allocated by the caller; unowned
    arrays (another node's gradient, or a view of one) are only adopted
    without copy when this is the final contribution, so they are never
    mutated afterwards.
    """
    node.pending -= 1
    if node.grad is None:
        if owned or node.pending == 0:
            node.grad = contribution
        else:
            node.grad = contribution.copy()
    else:
        node.grad += contribution


def _bw_matmul(node: Node):
    a, b = node.inputs
    g = node.grad
    if node.aux:  # C = A @ B.T
        _accumulate(a, g @ b.value)
        _accumulate(b, g.T @ a.value)
    else:
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)


def _bw_add(node: Node):
    a, b = node.inputs
    _accumulate(a, node.grad, owned=False)
    _accumulate(b, node.grad, owned=False)


def _bw_mul(node: Node):
    a, b = node.inputs
    _accumulate(a, node.grad * b.value)
    _accumulate(b, node.grad * a.value)


def _bw_add_bias(node: Node):
    a, bias = node.inputs
    _accumulate(a, node.grad, owned=False)
    _accumulate(bias, node.grad.sum(axis=0, keepdims=True))


def _bw_relu(node: Node):
    (a,) = node.inputs
    # Subgradient 0 at the kink.
    _accumulate(a, np.where(a.value > 0.0, node.grad, 0.0))


def _bw_sigmoid(node: Node):
    (a,) = node.inputs
    y = node.value
    _accumulate(a, node.grad * y * (1.0 - y))


def _bw_softmax_rows(node: Node):
    (a,) = node.inputs
    y = node.value
    g = node.grad
    _accumulate(a, y * (g - (g * y).sum(axis=1, keepdims=True)))


def _bw_log(node: Node):
    (a,) = node.inputs
    _accumulate(a, node.grad / a.value)


def _bw_scale(node: Node):
    (a,) = node.inputs
    _accumulate(a, node.grad * node.aux)


def _bw_concat_cols(node: Node):
    offset = 0
    for part, width in zip(node.inputs, node.aux):
        _accumulate(part, node.grad[:, offset:offset + width], owned=False)
        offset += width


def _bw_concat_rows(node: Node):
    offset = 0
    for part, count in zip(node.inputs, node.aux):
        _accumulate(part, node.grad[offset:offset + count], owned=False)
        offset += count


def _bw_slice_rows(node: Node):
    (a,) = node.inputs
    start, stop = node.aux
    if a.grad is None:
        a.grad = np.zeros_like(a.value)
    a.grad[start:stop] += node.grad


def _bw_pairwise_distance(node: Node):
    q, k = node.inputs
    d = node.value
    g = node.grad
    # d(D_ij)/dq_i = (q_i - k_j) / D_ij; subgradient 0 at coincident rows.
    u = np.where(d > 0.0, g / np.where(d > 0.0, d, 1.0), 0.0)
    _accumulate(q, u.sum(axis=1, keepdims=True) * q.value - u @ k.value)
    _accumulate(k, u.sum(axis=0)[:, None] * k.value - u.T @ q.value)


def _bw_mean_reduce(node: Node):
    (a,) = node.inputs
    _accumulate(a, np.full_like(a.value, node.grad[0, 0] / a.value.size))


def _bw_layer_norm(node: Node):
    (a,) = node.inputs
    y = node.value
    s = node.aux
    g = node.grad
    n = y.shape[1]
    g_mean = g.mean(axis=1, keepdims=True)
    gy_mean = (g * y).mean(axis=1, keepdims=True)
    _accumulate(a, (g - g_mean - y * gy_mean) / s)


_BACKWARD = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "mul": _bw_mul,
    "add_bias": _bw_add_bias,
    "relu": _bw_relu,
    "sigmoid": _bw_sigmoid,
    "softmax_rows": _bw_softmax_rows,
    "log": _bw_log,
    "scale": _bw_scale,
    "concat_cols": _bw_concat_cols,
    "concat_rows": _bw_concat_rows,
    "slice_rows": _bw_slice_rows,
    "pairwise_distance": _bw_pairwise_distance,
    "mean_reduce": _bw_mean_reduce,
    "layer_norm": _bw_layer_norm,
}


# ---------------------------------------------------------------------------
# Parameters and the Adam optimizer
# ---------------------------------------------------------------------------


@dataclass
class ParamEntry:
    value: np.ndarray
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self):
        self.value = as_matrix(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParameterStore:
    """Named parameter tensors plus their Adam moment state."""

    def __init__(self):
        self.entries: dict[str, ParamEntry] = {}

    def add(self, name: str, array) -> np.ndarray:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.entries[name] = ParamEntry(array)
        return self.entries[name].value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return sorted(self.entries)

    def values(self) -> dict[str, np.ndarray]:
        return {name: entry.value for name, entry in self.entries.items()}

    def bind_all(self, graph: Graph) -> dict[str, Node]:
        return {name: graph.parameter(name, entry.value) for name, entry in self.entries.items()}


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(
    store: ParameterStore,
    gradients: dict[str, np.ndarray],
    learning_rate: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """Standard Adam update with bias correction, applied in place."""
    missing = [name for name in store.entries if name not in gradients]
    if missing:
        raise KeyError(f"missing gradients for parameters: {sorted(missing)}")
    for name in store.names():
        entry = store.entries[name]
        g = gradients[name]
        if g.shape != entry.value.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {entry.value.shape}")
        entry.step += 1
        entry.m = beta1 * entry.m + (1.0 - beta1) * g
        entry.v = beta2 * entry.v + (1.0 - beta2) * (g * g)
        m_hat = entry.m / (1.0 - beta1 ** entry.step)
        v_hat = entry.v / (1.0 - beta2 ** entry.step)
        entry.value -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def add_dense(store: ParameterStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    """Register one affine layer: glorot-uniform weight, zero bias."""
    store.add(f"{name}.w", glorot_uniform(rng, fan_in, fan_out))
    store.add(f"{name}.b", np.zeros((1, fan_out)))


def dense(graph: Graph, params: dict[str, Node], name: str, x: Node) -> Node:
    return graph.add_bias(graph.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])
