"""Built-in verification: gradient checks for every layer and both
networks at reduced width, attention invariants, the collision-physics
oracle, and a checkpoint round trip.

The graph builders here are shared with the test suite so the CLI
selftest and pytest exercise identical constructions.
"""

from __future__ import annotations

import numpy as np

from .attention import AttentionBlock, soft_knn_node, dot_attention_weights_node
from .autodiff import Graph, ParameterStore, add_dense, dense
from .checkpoint import load_checkpoint, save_checkpoint
from .explorer import Episode, ExplorerArch, ExplorerNetwork, build_explorer_loss_graph
from .floorplan import AgentState, fine_timestep_step, generate_floorplan, random_direction, sample_start, step_agent
from .gradcheck import gradient_check
from .guessing import GuesserArch, GuesserNetwork, build_guesser_loss_graph, random_game


def linear_sigmoid_logistic_case(seed: int = 0):
    """Single linear layer + sigmoid + logistic loss on fixed random data."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 3))
    y = rng.integers(0, 2, size=(6, 1)).astype(np.float64)
    store = ParameterStore()
    add_dense(store, "lin", 3, 1, rng)

    def build(s: ParameterStore) -> Graph:
        g = Graph()
        params = s.bind_all(g)
        p = g.sigmoid(dense(g, params, "lin", g.input(x)))
        ones = g.input(np.ones_like(y))
        eps = g.input(np.full_like(y, 1e-12))
        ll = g.add(
            g.mul(g.input(y), g.log(g.add(p, eps))),
            g.mul(g.input(1.0 - y), g.log(g.add(g.add(ones, g.scale(p, -1.0)), eps))),
        )
        g.set_output(g.scale(g.mean_reduce(ll), -1.0))
        return g

    return build, store


def soft_knn_case(seed: int = 0, n_memories: int = 5, key_dim: int = 24, alpha: float = 20.0):
    """Soft-kNN lookup with learned key/value tables and a learned query."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("keys", rng.standard_normal((n_memories, key_dim)))
    store.add("values", rng.standard_normal((n_memories, 3)))
    store.add("query", rng.standard_normal((1, key_dim)))

    def build(s: ParameterStore) -> Graph:
        g = Graph()
        params = s.bind_all(g)
        out, _ = soft_knn_node(g, params["keys"], params["values"], params["query"], alpha)
        g.set_output(g.mean_reduce(out))
        return g

    return build, store


def dot_attention_case(seed: int = 0, n_keys: int = 6, dim: int = 8):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("keys", rng.standard_normal((n_keys, dim)))
    store.add("query", rng.standard_normal((2, dim)))

    def build(s: ParameterStore) -> Graph:
        g = Graph()
        params = s.bind_all(g)
        w = dot_attention_weights_node(g, params["keys"], params["query"])
        # weigh squared weights so the gradient is not annihilated by the
        # rows-sum-to-one constraint
        g.set_output(g.mean_reduce(g.mul(w, w)))
        return g

    return build, store


def layer_norm_case(seed: int = 0):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("x", rng.standard_normal((4, 7)))
    probe = rng.standard_normal((4, 7))

    def build(s: ParameterStore) -> Graph:
        g = Graph()
        params = s.bind_all(g)
        g.set_output(g.mean_reduce(g.mul(g.layer_norm(params["x"]), g.input(probe))))
        return g

    return build, store


def transformer_block_case(seed: int = 0, width: int = 16, mode: str = "residual"):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    block = AttentionBlock("blk", width, embed_dim=8, mode=mode)
    block.register(store, rng)
    z_in = rng.standard_normal((4, width))
    memory = rng.standard_normal((5, width))
    probe = rng.standard_normal((4, width))

    def build(s: ParameterStore) -> Graph:
        g = Graph()
        params = s.bind_all(g)
        z, _ = block.apply(g, params, g.input(z_in), g.input(memory))
        g.set_output(g.mean_reduce(g.mul(z, g.input(probe))))
        return g

    return build, store


def explorer_network_case(seed: int = 0, hidden: int = 16, n_memories: int = 5, n_queries: int = 1):
    """Full collision-prediction pipeline at reduced width."""
    rng = np.random.default_rng(seed)
    arch = ExplorerArch(hidden=hidden, n_hidden=4, key_dim=8, value_dim=hidden, alpha=20.0)
    net = ExplorerNetwork.initialize(arch, seed)
    mem_sao = np.hstack(
        [
            rng.uniform(0, 1, size=(n_memories, 2)),
            _unit_rows(rng, n_memories),
            rng.integers(0, 2, size=(n_memories, 1)).astype(np.float64),
        ]
    )
    q_sa = np.hstack([rng.uniform(0, 1, size=(n_queries, 2)), _unit_rows(rng, n_queries)])
    labels = rng.integers(0, 2, size=(n_queries, 1)).astype(np.float64)
    episode = Episode(mem_sao, q_sa, labels)

    def build(s: ParameterStore) -> Graph:
        return build_explorer_loss_graph(ExplorerNetwork(arch, s), [episode])

    return build, net.store


def guesser_network_case(seed: int = 0, hidden: int = 16, memory_len: int = 4):
    """Full guesser pipeline at reduced width on one short game."""
    rng = np.random.default_rng(seed)
    arch = GuesserArch(hidden=hidden)
    net = GuesserNetwork.initialize(arch, seed)
    game = random_game(int(rng.integers(1, 257)), memory_len, rng)
    guesses = np.array([game.guesses])
    outcomes = np.array([[int(o) for o in game.outcomes]])
    targets = np.array([game.target])

    def build(s: ParameterStore) -> Graph:
        return build_guesser_loss_graph(GuesserNetwork(arch, s), guesses, outcomes, targets)

    return build, net.store


def _unit_rows(rng: np.random.Generator, n: int) -> np.ndarray:
    theta = rng.uniform(0, 2 * np.pi, size=n)
    return np.stack([np.cos(theta), np.sin(theta)], axis=1)


GRADIENT_CASES = [
    ("linear+sigmoid+logistic", linear_sigmoid_logistic_case, 1e-5),
    ("soft-knn", soft_knn_case, 1e-4),
    ("dot-attention", dot_attention_case, 1e-4),
    ("layer-norm", layer_norm_case, 1e-4),
    ("transformer-block", transformer_block_case, 1e-4),
    ("explorer-network", explorer_network_case, 1e-4),
    ("guesser-network", guesser_network_case, 1e-4),
]


def run_selftest(verbose: bool = True) -> int:
    """Run all built-in checks; returns 0 on success, 1 on any failure."""
    failures = 0

    def report(name: str, ok: bool, detail: str = ""):
        nonlocal failures
        if not ok:
            failures += 1
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}{': ' + detail if detail else ''}")

    for name, case, tol in GRADIENT_CASES:
        build, store = case()
        result = gradient_check(build, store, tolerance=tol, max_entries_per_param=24)
        report(f"gradient {name}", result.passed, f"max rel err {result.worst:.2e} (tol {tol:.0e})")

    rng = np.random.default_rng(123)
    worst_sum = 0.0
    for _ in range(200):
        from .attention import dot_attention_weights, soft_knn_weights

        keys = rng.standard_normal((int(rng.integers(1, 9)), 5))
        w1 = soft_knn_weights(keys, rng.standard_normal(5), 20.0)
        w2 = dot_attention_weights(keys, rng.standard_normal(5))
        worst_sum = max(worst_sum, abs(w1.sum() - 1.0), abs(w2.sum() - 1.0))
    report("attention weights sum to one", worst_sum < 1e-12, f"worst deviation {worst_sum:.1e}")

    mismatches = 0
    for _ in range(100):
        keys = rng.standard_normal((8, 5))
        q = rng.standard_normal(5)
        d = np.sqrt(((keys - q) ** 2).sum(axis=1))
        w = soft_knn_weights(keys, q, 1e4)
        if int(np.argmax(w)) != int(np.argmin(d)):
            mismatches += 1
    report("soft-knn sharp limit matches nearest neighbour", mismatches == 0, f"{mismatches} mismatches")

    worst_pos = 0.0
    flag_mismatch = 0
    for i in range(50):
        plan = generate_floorplan(9000 + i)
        start = sample_start(plan, rng)
        direction = random_direction(rng)
        exact = step_agent(plan, start, direction, 0.2)
        ref = fine_timestep_step(plan, start, direction, 0.2)
        worst_pos = max(worst_pos, float(np.hypot(exact[0].position[0] - ref[0].position[0], exact[0].position[1] - ref[0].position[1])))
        flag_mismatch += int(exact[1] != ref[1])
    report(
        "collision stepper matches fine-timestep oracle",
        worst_pos < 1e-4 and flag_mismatch == 0,
        f"worst position error {worst_pos:.1e}, {flag_mismatch} flag mismatches",
    )

    import tempfile
    from pathlib import Path

    store = ParameterStore()
    store.add("a", rng.standard_normal((3, 4)))
    store.add("b", rng.standard_normal((1, 5)))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "roundtrip.ckpt"
        save_checkpoint(path, store)
        loaded = load_checkpoint(path)
    ok = all(
        np.array_equal(loaded[name].astype(np.float32), store[name].astype(np.float32))
        for name in store.names()
    )
    report("checkpoint round trip bit-exact at 32-bit", ok)

    if verbose:
        print("selftest:", "all checks passed" if failures == 0 else f"{failures} check(s) FAILED")
    return 0 if failures == 0 else 1
