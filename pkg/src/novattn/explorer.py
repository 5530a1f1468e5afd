"""Collision-prediction network for the floorplan task, its training loop,
and the greedy curiosity policy it induces.

The network has three trunks sharing one embedding story: E_s maps
(position, action) pairs to 24-d keys (the same trunk embeds queries, so
proposed actions land in the memory's key space), E_o maps full
(position, action, collision) records to 128-d values, and a soft-kNN
lookup feeds a prediction head P that outputs collision probability.
Novelty of a proposal is its key's distance to the nearest stored key.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import soft_knn_node
from .autodiff import (
    Graph,
    Node,
    ParameterStore,
    adam_step,
    add_dense,
    backpropagate,
    dense,
    evaluate_graph,
)
from .floorplan import (
    AgentState,
    Floorplan,
    Transition,
    random_direction,
    rollout_random,
    sample_start,
    step_agent,
)
from .seeds import stream

SA_DIM = 4  # x, y, ax, ay
SAO_DIM = 5  # + collision flag


@dataclass(frozen=True)
class ExplorerArch:
    hidden: int = 256
    n_hidden: int = 4
    key_dim: int = 24
    value_dim: int = 128
    alpha: float = 20.0


class ExplorerNetwork:
    """Parameter container; all math lives in the graph builders below."""

    def __init__(self, arch: ExplorerArch, store: ParameterStore):
        self.arch = arch
        self.store = store

    @classmethod
    def initialize(cls, arch: ExplorerArch, seed: int) -> "ExplorerNetwork":
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        _register_mlp(store, "es", SA_DIM, arch.hidden, arch.n_hidden, arch.key_dim, rng)
        _register_mlp(store, "eo", SAO_DIM, arch.hidden, arch.n_hidden, arch.value_dim, rng)
        _register_mlp(store, "p", arch.value_dim, arch.hidden, arch.n_hidden, 1, rng)
        return cls(arch, store)


def _register_mlp(store, prefix, n_in, hidden, n_hidden, n_out, rng):
    dims = [n_in] + [hidden] * n_hidden + [n_out]
    for i in range(n_hidden):
        add_dense(store, f"{prefix}.h{i}", dims[i], dims[i + 1], rng)
    add_dense(store, f"{prefix}.proj", hidden, n_out, rng)


def _mlp(g: Graph, params: dict[str, Node], prefix: str, x: Node, n_hidden: int) -> Node:
    for i in range(n_hidden):
        x = g.relu(dense(g, params, f"{prefix}.h{i}", x))
    return dense(g, params, f"{prefix}.proj", x)


def es_forward(g: Graph, params, net: ExplorerNetwork, sa: Node) -> Node:
    return _mlp(g, params, "es", sa, net.arch.n_hidden)


def eo_forward(g: Graph, params, net: ExplorerNetwork, sao: Node) -> Node:
    return _mlp(g, params, "eo", sao, net.arch.n_hidden)


def p_forward(g: Graph, params, net: ExplorerNetwork, pooled: Node) -> Node:
    return g.sigmoid(_mlp(g, params, "p", pooled, net.arch.n_hidden))


def _check_unit_action(action):
    ax, ay = action
    if abs(np.hypot(ax, ay) - 1.0) > 1e-9:
        raise ValueError(f"action must be a unit vector, got {action}")


def embed_state_actions(net: ExplorerNetwork, sa: np.ndarray) -> np.ndarray:
    """Key embeddings for a batch of (x, y, ax, ay) rows."""
    g = Graph()
    params = net.store.bind_all(g)
    g.set_output(es_forward(g, params, net, g.input(sa)))
    return evaluate_graph(g)


def embed_state_action(net: ExplorerNetwork, state, action) -> np.ndarray:
    _check_unit_action(action)
    sa = np.array([[state[0], state[1], action[0], action[1]]])
    return embed_state_actions(net, sa)[0]


def embed_outcomes(net: ExplorerNetwork, sao: np.ndarray) -> np.ndarray:
    g = Graph()
    params = net.store.bind_all(g)
    g.set_output(eo_forward(g, params, net, g.input(sao)))
    return evaluate_graph(g)


class EpisodicMemory:
    """Transitions plus cached key/value embeddings, grown in place.

    Caches are valid for the parameters they were computed under; call
    ``rebuild`` after any parameter update.
    """

    def __init__(self, net: ExplorerNetwork, capacity: int = 64):
        self.net = net
        self.transitions: list[Transition] = []
        self._keys = np.empty((capacity, net.arch.key_dim))
        self._values = np.empty((capacity, net.arch.value_dim))

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: len(self.transitions)]

    @property
    def values(self) -> np.ndarray:
        return self._values[: len(self.transitions)]

    def append(self, transition: Transition) -> None:
        n = len(self.transitions)
        if n == self._keys.shape[0]:
            self._keys = np.vstack([self._keys, np.empty_like(self._keys)])
            self._values = np.vstack([self._values, np.empty_like(self._values)])
        self._keys[n], self._values[n] = self._embed_one(transition)
        self.transitions.append(transition)

    def extend(self, transitions) -> None:
        for t in transitions:
            self.append(t)

    def _embed_one(self, t: Transition) -> tuple[np.ndarray, np.ndarray]:
        # One row at a time: BLAS reduction order depends on batch shape,
        # and cache entries are contracted to be bit-identical to a fresh
        # single-row embedding.
        sa = np.array([[*t.state, *t.action]])
        sao = np.array([[*t.state, *t.action, float(t.collided)]])
        return embed_state_actions(self.net, sa)[0], embed_outcomes(self.net, sao)[0]

    def rebuild(self) -> None:
        for n, t in enumerate(self.transitions):
            self._keys[n], self._values[n] = self._embed_one(t)


def _nearest_distances(keys: np.ndarray, query_keys: np.ndarray) -> np.ndarray:
    """Exact min Euclidean distance from each query key to the stored keys.

    Plain row differences (matching a brute-force per-pair norm bit for
    bit); chunked so the broadcast stays within a few MB.
    """
    out = np.empty(query_keys.shape[0])
    chunk = max(1, int(2_000_000 // max(1, keys.shape[0])))
    for i in range(0, query_keys.shape[0], chunk):
        block = query_keys[i : i + chunk]
        diff = block[:, None, :] - keys[None, :, :]
        out[i : i + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)).min(axis=1)
    return out


def novelty_score(net: ExplorerNetwork, memory: EpisodicMemory, state, action) -> float:
    """Distance from the proposal's key embedding to its nearest memory key."""
    if len(memory) == 0:
        raise ValueError("novelty score requires a non-empty memory")
    key = embed_state_action(net, state, action)
    return float(_nearest_distances(memory.keys, key[None, :])[0])


def novelty_scores_batch(net: ExplorerNetwork, memory: EpisodicMemory, state, actions: np.ndarray) -> np.ndarray:
    if len(memory) == 0:
        raise ValueError("novelty score requires a non-empty memory")
    sa = np.empty((actions.shape[0], SA_DIM))
    sa[:, 0] = state[0]
    sa[:, 1] = state[1]
    sa[:, 2:] = actions
    keys = embed_state_actions(net, sa)
    return _nearest_distances(memory.keys, keys)


def predict_collision_prob(net: ExplorerNetwork, memory: EpisodicMemory, state, action) -> float:
    """P(collision) for a proposed action, via soft-kNN over the memory."""
    if len(memory) == 0:
        raise ValueError("prediction requires a non-empty memory")
    _check_unit_action(action)
    g = Graph()
    params = net.store.bind_all(g)
    query = es_forward(g, params, net, g.input(np.array([[state[0], state[1], action[0], action[1]]])))
    pooled, _ = soft_knn_node(g, g.input(memory.keys), g.input(memory.values), query, net.arch.alpha)
    g.set_output(p_forward(g, params, net, pooled))
    return float(evaluate_graph(g)[0, 0])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    memory_sao: np.ndarray  # (M, 5)
    query_sa: np.ndarray  # (Q, 4)
    labels: np.ndarray  # (Q, 1)


@dataclass
class TrainConfig:
    n_batches: int = 15000
    episodes_per_batch: int = 50
    memory_window: int = 300
    query_window: int = 100
    learning_rate: float = 4e-4
    lr_decay: float = 0.9
    lr_patience: int = 10
    lr_floor: float = 1e-6
    eval_every: int = 100
    holdout_fraction: float = 0.05
    eval_episodes: int = 20


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    eval_batches: list[int] = field(default_factory=list)
    eval_loss: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)


class PatienceSchedule:
    """Decay the learning rate whenever the monitored loss fails to reach a
    new minimum for ``patience`` consecutive evaluations. Never raises the
    rate; the floor only clamps decays from above."""

    def __init__(self, lr: float, decay: float, patience: int, floor: float):
        self.lr = lr
        self.decay = decay
        self.patience = patience
        self.floor = floor
        self.best = np.inf
        self.misses = 0

    def observe(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.misses = 0
        else:
            self.misses += 1
            if self.misses >= self.patience:
                self.lr = min(self.lr, max(self.lr * self.decay, self.floor))
                self.misses = 0
        return self.lr


def transitions_to_arrays(transitions: list[Transition]) -> np.ndarray:
    return np.array([[*t.state, *t.action, float(t.collided)] for t in transitions])


def _episode_from_window(traj: np.ndarray, start: int, cfg: TrainConfig) -> Episode:
    mem = traj[start - cfg.memory_window : start]
    qry = traj[start : start + cfg.query_window]
    return Episode(mem, qry[:, :SA_DIM].copy(), qry[:, SA_DIM:].copy())


def build_explorer_loss_graph(net: ExplorerNetwork, episodes: list[Episode]) -> Graph:
    """One tape for a whole batch: dense trunks run on row-stacked inputs,
    the soft-kNN lookups are sliced out per episode."""
    g = Graph()
    params = net.store.bind_all(g)
    m = episodes[0].memory_sao.shape[0]
    q = episodes[0].query_sa.shape[0]
    mem_sao = np.vstack([ep.memory_sao for ep in episodes])
    keys = es_forward(g, params, net, g.input(mem_sao[:, :SA_DIM]))
    values = eo_forward(g, params, net, g.input(mem_sao))
    queries = es_forward(g, params, net, g.input(np.vstack([ep.query_sa for ep in episodes])))
    pooled_parts = []
    for i in range(len(episodes)):
        k_i = g.slice_rows(keys, i * m, (i + 1) * m)
        v_i = g.slice_rows(values, i * m, (i + 1) * m)
        q_i = g.slice_rows(queries, i * q, (i + 1) * q)
        out_i, _ = soft_knn_node(g, k_i, v_i, q_i, net.arch.alpha)
        pooled_parts.append(out_i)
    prob = p_forward(g, params, net, g.concat_rows(pooled_parts))
    labels = np.vstack([ep.labels for ep in episodes])
    g.set_output(binary_cross_entropy(g, prob, labels))
    return g


def binary_cross_entropy(g: Graph, prob: Node, labels: np.ndarray) -> Node:
    """Mean logistic loss; a 1e-12 floor inside each log guards against
    saturated sigmoids."""
    y = g.input(labels)
    one_minus_y = g.input(1.0 - labels)
    ones = g.input(np.ones_like(labels))
    eps = g.input(np.full_like(labels, 1e-12))
    log_p = g.log(g.add(prob, eps))
    log_not_p = g.log(g.add(g.add(ones, g.scale(prob, -1.0)), eps))
    ll = g.add(g.mul(y, log_p), g.mul(one_minus_y, log_not_p))
    return g.scale(g.mean_reduce(ll), -1.0)


def batch_loss(net: ExplorerNetwork, episodes: list[Episode]) -> float:
    g = build_explorer_loss_graph(net, episodes)
    return float(evaluate_graph(g)[0, 0])


def _sample_episode(trajs: list[np.ndarray], rng: np.random.Generator, idx: int, cfg: TrainConfig) -> Episode:
    traj = trajs[idx]
    start = int(rng.integers(cfg.memory_window, traj.shape[0] - cfg.query_window + 1))
    return _episode_from_window(traj, start, cfg)


def train_explorer(
    corpus: list[list[Transition]],
    net: ExplorerNetwork,
    cfg: TrainConfig,
    root_seed: int,
    log_every: int = 0,
) -> TrainingHistory:
    """Adam on batched logistic loss with held-out-driven learning-rate decay.

    Every ``eval_every`` batches the held-out loss is measured; after
    ``lr_patience`` consecutive evaluations without a new minimum the
    learning rate is multiplied by ``lr_decay`` (never below ``lr_floor``).
    """
    min_len = cfg.memory_window + cfg.query_window
    if any(len(t) < min_len for t in corpus):
        raise ValueError(f"every corpus trajectory needs at least {min_len} steps")
    n_hold = max(1, int(round(len(corpus) * cfg.holdout_fraction)))
    if len(corpus) - n_hold < cfg.episodes_per_batch:
        raise ValueError(
            f"corpus too small: {len(corpus)} trajectories cannot fill "
            f"batches of {cfg.episodes_per_batch} after holding out {n_hold}"
        )
    train_trajs = [transitions_to_arrays(t) for t in corpus[:-n_hold]]
    hold_trajs = [transitions_to_arrays(t) for t in corpus[-n_hold:]]

    hold_rng = stream(root_seed, "explorer/holdout-episodes")
    eval_episodes = [
        _sample_episode(hold_trajs, hold_rng, int(hold_rng.integers(len(hold_trajs))), cfg)
        for _ in range(cfg.eval_episodes)
    ]

    batch_rng = stream(root_seed, "explorer/batches")
    history = TrainingHistory()
    schedule = PatienceSchedule(cfg.learning_rate, cfg.lr_decay, cfg.lr_patience, cfg.lr_floor)
    for batch_idx in range(cfg.n_batches):
        chosen = batch_rng.choice(len(train_trajs), size=cfg.episodes_per_batch, replace=False)
        episodes = [_sample_episode(train_trajs, batch_rng, int(i), cfg) for i in chosen]
        g = build_explorer_loss_graph(net, episodes)
        loss = float(evaluate_graph(g)[0, 0])
        grads = backpropagate(g, np.ones((1, 1)))
        adam_step(net.store, grads, schedule.lr)
        history.train_loss.append(loss)
        history.learning_rates.append(schedule.lr)
        if (batch_idx + 1) % cfg.eval_every == 0:
            eval_loss = batch_loss(net, eval_episodes)
            history.eval_batches.append(batch_idx + 1)
            history.eval_loss.append(eval_loss)
            schedule.observe(eval_loss)
            if log_every and ((batch_idx + 1) % log_every == 0):
                print(
                    f"batch {batch_idx + 1}/{cfg.n_batches} "
                    f"train {loss:.4f} eval {eval_loss:.4f} lr {schedule.lr:.2e}",
                    flush=True,
                )
    return history


# ---------------------------------------------------------------------------
# Greedy curious policy and evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RolloutConfig:
    step_length: float = 0.05
    warmup_steps: int = 50
    n_proposals: int = 50


def greedy_curious_rollout(
    net: ExplorerNetwork,
    plan: Floorplan,
    n_greedy: int,
    rng: np.random.Generator,
    cfg: RolloutConfig = RolloutConfig(),
    start: AgentState | None = None,
    memory: EpisodicMemory | None = None,
) -> tuple[list[Transition], list[tuple[float, float]]]:
    """Warm up with random steps, then repeatedly execute the proposal whose
    key embedding is farthest from its nearest memory key.

    Returns all transitions (warmup + greedy) and the visited positions.
    """
    if start is None:
        start = sample_start(plan, rng)
    if memory is None:
        memory = EpisodicMemory(net, capacity=cfg.warmup_steps + n_greedy + 1)
    state = start
    transitions: list[Transition] = []
    positions = [state.position]
    for _ in range(cfg.warmup_steps):
        action = random_direction(rng)
        new_state, hit = step_agent(plan, state, action, cfg.step_length)
        t = Transition(state.position, action, hit)
        transitions.append(t)
        memory.append(t)
        positions.append(new_state.position)
        state = new_state
    for _ in range(n_greedy):
        proposals = np.array([random_direction(rng) for _ in range(cfg.n_proposals)])
        scores = novelty_scores_batch(net, memory, state.position, proposals)
        action = tuple(proposals[int(np.argmax(scores))])
        new_state, hit = step_agent(plan, state, action, cfg.step_length)
        t = Transition(state.position, action, hit)
        transitions.append(t)
        memory.append(t)
        positions.append(new_state.position)
        state = new_state
    return transitions, positions


def novelty_field(
    net: ExplorerNetwork,
    memory: EpisodicMemory,
    plan: Floorplan,
    grid: int = 32,
    n_proposals: int = 50,
    proposal_seed: int = 0,
) -> list[tuple[float, float, float, float, float]]:
    """Max proposal novelty and its action at every in-region grid point.

    Rows are (x, y, novelty, ax, ay).
    """
    if len(memory) == 0:
        raise ValueError("novelty field requires a non-empty memory")
    rng = np.random.default_rng(proposal_seed)
    rows = []
    for iy in range(grid):
        for ix in range(grid):
            x = (ix + 0.5) / grid
            y = (iy + 0.5) / grid
            if not plan.contains((x, y)):
                continue
            proposals = np.array([random_direction(rng) for _ in range(n_proposals)])
            scores = novelty_scores_batch(net, memory, (x, y), proposals)
            best = int(np.argmax(scores))
            rows.append((x, y, float(scores[best]), float(proposals[best, 0]), float(proposals[best, 1])))
    return rows


def question_saliency_map(
    net: ExplorerNetwork,
    plan: Floorplan,
    question: tuple[tuple[float, float], tuple[float, float]],
    grid: int = 32,
    actions_per_point: int = 8,
    proposal_seed: int = 0,
) -> list[tuple[float, float, float, float, float]]:
    """Soft-kNN attention of one question over a virtual probe grid.

    Probes are (position, action) pairs on a grid of in-region points;
    the returned weight of each probe is the share of the question's
    attention it would receive as a memory entry. Rows are
    (x, y, ax, ay, weight), with weights summing to 1.
    """
    state, action = question
    rng = np.random.default_rng(proposal_seed)
    probes = []
    for iy in range(grid):
        for ix in range(grid):
            x = (ix + 0.5) / grid
            y = (iy + 0.5) / grid
            if not plan.contains((x, y)):
                continue
            for _ in range(actions_per_point):
                ax, ay = random_direction(rng)
                probes.append((x, y, ax, ay))
    probe_sa = np.asarray(probes)
    probe_keys = embed_state_actions(net, probe_sa)
    q_key = embed_state_action(net, state, action)
    d = np.sqrt(((probe_keys - q_key[None, :]) ** 2).sum(axis=1))
    logits = -net.arch.alpha * d
    logits -= logits.max()
    w = np.exp(logits)
    w /= w.sum()
    return [(p[0], p[1], p[2], p[3], float(wi)) for p, wi in zip(probes, w)]


EVAL_POLICIES = ("random", "untrained", "trained")


def evaluate_exploration(
    nets: dict[str, ExplorerNetwork | None],
    root_seed: int,
    n_plans: int = 15,
    n_steps: int = 5000,
    rollout_cfg: RolloutConfig = RolloutConfig(),
    grid: int = 16,
    log=None,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Mean/stderr coverage curves for each policy over fresh floorplans.

    Every policy sees the same plans and start points; curves have
    ``n_steps + 1`` entries (index 0 is the start cell).
    """
    from .floorplan import coverage_curve, generate_floorplan
    from .seeds import derive_seed

    plans = [generate_floorplan(derive_seed(root_seed, f"eval-plan-{i}")) for i in range(n_plans)]
    starts = [sample_start(plan, stream(root_seed, f"eval-start-{i}")) for i, plan in enumerate(plans)]
    results: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for policy, net in nets.items():
        curves = np.empty((n_plans, n_steps + 1))
        for i, plan in enumerate(plans):
            rng = stream(root_seed, f"eval-rollout/{policy}/{i}")
            if net is None:
                _, positions = rollout_random(plan, starts[i], n_steps, rng, rollout_cfg.step_length)
            else:
                _, positions = greedy_curious_rollout(
                    net, plan, n_steps - rollout_cfg.warmup_steps, rng, rollout_cfg, start=starts[i]
                )
            curves[i] = coverage_curve(positions, grid)
            if log:
                log(f"{policy}: plan {i + 1}/{n_plans} covered {int(curves[i][-1])} cells")
        mean = curves.mean(axis=0)
        stderr = curves.std(axis=0, ddof=1) / np.sqrt(n_plans)
        results[policy] = (mean, stderr)
    return results
