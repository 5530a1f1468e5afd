"""Attention machinery: dot-product lookup, Euclidean soft-kNN, layer
normalization, and the Transformer-style residual block.

Every layer is expressed as a graph builder over autodiff primitives, so
the same code path serves training, inference, and gradient checking.
Plain-array wrappers are provided for callers that just want numbers.

The block keeps a single key/query projection: keys and queries must live
in one shared space for distances and dot products between them to mean
anything, which is the whole premise of using the embedding for novelty.
When a lookup is driven by externally supplied keys (e.g. keys derived
from a separate encoder), the projection is applied to the query side
only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node, ParameterStore, as_matrix, evaluate_graph, glorot_uniform

LAYER_NORM_EPS = 1e-8


def dot_attention_weights_node(g: Graph, keys: Node, query: Node) -> Node:
    """softmax over key.query dot products, one weight row per query row."""
    if keys.shape[0] < 1:
        raise ValueError("dot attention requires at least one key")
    return g.softmax_rows(g.matmul(query, keys, transpose_b=True))


def soft_knn_node(g: Graph, keys: Node, values: Node, query: Node, alpha: float) -> tuple[Node, Node]:
    """Differentiable nearest-neighbour lookup.

    Weights are a softmax over -alpha * Euclidean distance between the
    query rows and key rows; the output is the weight-averaged values.
    Returns (output, weights).
    """
    if alpha <= 0:
        raise ValueError(f"soft-kNN sharpness must be positive, got {alpha}")
    if keys.shape[0] < 1:
        raise ValueError("soft-kNN requires a non-empty memory")
    if keys.shape[0] != values.shape[0]:
        raise ValueError(f"keys/values row mismatch: {keys.shape} vs {values.shape}")
    weights = g.softmax_rows(g.scale(g.pairwise_distance(query, keys), -alpha))
    return g.matmul(weights, values), weights


def dot_attention_weights(keys, query) -> np.ndarray:
    keys = as_matrix(keys)
    query = as_matrix(query)
    g = Graph()
    w = dot_attention_weights_node(g, g.input(keys), g.input(query))
    g.set_output(w)
    out = evaluate_graph(g)
    return out[0] if out.shape[0] == 1 else out


def soft_knn(keys, values, query, alpha: float) -> np.ndarray:
    keys, values, query = as_matrix(keys), as_matrix(values), as_matrix(query)
    g = Graph()
    out, _ = soft_knn_node(g, g.input(keys), g.input(values), g.input(query), alpha)
    g.set_output(out)
    result = evaluate_graph(g)
    return result[0] if result.shape[0] == 1 else result


def soft_knn_weights(keys, query, alpha: float) -> np.ndarray:
    """Just the weight rows of the soft-kNN lookup."""
    keys, query = as_matrix(keys), as_matrix(query)
    g = Graph()
    _, w = soft_knn_node(g, g.input(keys), g.input(np.zeros((keys.shape[0], 1))), g.input(query), alpha)
    g.set_output(w)
    out = evaluate_graph(g)
    return out[0] if out.shape[0] == 1 else out


def layer_normalize(rows) -> np.ndarray:
    g = Graph()
    g.set_output(g.layer_norm(g.input(as_matrix(rows)), LAYER_NORM_EPS))
    return evaluate_graph(g)


@dataclass
class AttentionBlock:
    """Transformer-style residual block with 8-d attention spaces.

    mode "residual" keeps the first residual add; "replace" drops it so
    the post-attention state carries memory information only.
    """

    prefix: str
    width: int
    embed_dim: int = 8
    mode: str = "residual"

    def __post_init__(self):
        if self.mode not in ("residual", "replace"):
            raise ValueError(f"unknown block mode {self.mode!r}")

    def register(self, store: ParameterStore, rng: np.random.Generator) -> None:
        store.add(f"{self.prefix}.kq.w", glorot_uniform(rng, self.width, self.embed_dim))
        store.add(f"{self.prefix}.val.w", glorot_uniform(rng, self.width, self.embed_dim))
        store.add(f"{self.prefix}.up.w", glorot_uniform(rng, self.embed_dim, self.width))
        store.add(f"{self.prefix}.ff1.w", glorot_uniform(rng, self.width, self.width))
        store.add(f"{self.prefix}.ff1.b", np.zeros((1, self.width)))
        store.add(f"{self.prefix}.ff2.w", glorot_uniform(rng, self.width, self.width))
        store.add(f"{self.prefix}.ff2.b", np.zeros((1, self.width)))

    def apply(
        self,
        g: Graph,
        params: dict[str, Node],
        z_in: Node,
        memory: Node,
        external_keys: Node | None = None,
        attention_slices: list[tuple[int, int, int, int]] | None = None,
    ) -> tuple[Node, Node]:
        """Run the block; returns (z_out, attention weights).

        ``memory`` carries the value stream (width columns). Keys are the
        kq projection of ``memory`` unless ``external_keys`` supplies them
        directly. ``attention_slices`` restricts each query row span to a
        key row span as (q_start, q_stop, m_start, m_stop) groups, letting
        independent sequences share one tape; weights then come back as a
        row-concatenated node aligned with z_in.
        """
        if memory.shape[0] < 1:
            raise ValueError("attention block requires a non-empty memory")
        if z_in.shape[1] != self.width or memory.shape[1] != self.width:
            raise ValueError(
                f"width mismatch: block={self.width}, z_in={z_in.shape}, memory={memory.shape}"
            )
        queries = g.matmul(z_in, params[f"{self.prefix}.kq.w"])
        keys = external_keys if external_keys is not None else g.matmul(memory, params[f"{self.prefix}.kq.w"])
        values = g.matmul(memory, params[f"{self.prefix}.val.w"])

        if attention_slices is None:
            weights = g.softmax_rows(g.matmul(queries, keys, transpose_b=True))
            pooled = g.matmul(weights, values)
        else:
            pooled_parts = []
            weight_parts = []
            for q0, q1, m0, m1 in attention_slices:
                q_part = g.slice_rows(queries, q0, q1)
                k_part = g.slice_rows(keys, m0, m1)
                v_part = g.slice_rows(values, m0, m1)
                w_part = g.softmax_rows(g.matmul(q_part, k_part, transpose_b=True))
                weight_parts.append(w_part)
                pooled_parts.append(g.matmul(w_part, v_part))
            pooled = g.concat_rows(pooled_parts)
            weights = weight_parts[0] if len(weight_parts) == 1 else g.concat_rows(weight_parts)

        attn = g.matmul(pooled, params[f"{self.prefix}.up.w"])
        if self.mode == "residual":
            z_star = g.layer_norm(g.add(z_in, attn), LAYER_NORM_EPS)
        else:
            z_star = g.layer_norm(attn, LAYER_NORM_EPS)
        hidden = g.relu(g.add_bias(g.matmul(z_star, params[f"{self.prefix}.ff1.w"]), params[f"{self.prefix}.ff1.b"]))
        ff = g.add_bias(g.matmul(hidden, params[f"{self.prefix}.ff2.w"]), params[f"{self.prefix}.ff2.b"])
        z_out = g.layer_norm(g.add(z_star, ff), LAYER_NORM_EPS)
        return z_out, weights


def transformer_block(block: AttentionBlock, store: ParameterStore, z_in, memory) -> np.ndarray:
    """Plain-array forward pass of one block."""
    g = Graph()
    params = store.bind_all(g)
    z_node, _ = block.apply(g, params, g.input(as_matrix(z_in)), g.input(as_matrix(memory)))
    g.set_output(z_node)
    return evaluate_graph(g)
