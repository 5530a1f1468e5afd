"""High/low number guessing: environment, attentive guesser network,
training on random games with future-memory access, and playout policies.

The network "plays the game against its own memory": a learned initial
query state drives three attention lookups into the record of past
guesses, where lookups are indexed by guess encodings only (never by
outcomes), so attention can be read out over *virtual* never-made guesses
to decide which guess would be most informative next.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .attention import AttentionBlock
from .autodiff import (
    Graph,
    Node,
    ParameterStore,
    adam_step,
    add_dense,
    backpropagate,
    dense,
    evaluate_graph,
    glorot_uniform,
)
from .seeds import stream

N_VALUES = 256
GAME_LENGTH = 30
N_SELF_BLOCKS = 2
N_QUERY_BLOCKS = 3


class Outcome(IntEnum):
    TOO_LOW = 0
    TOO_HIGH = 1
    CORRECT = 2


_OUTCOME_NAMES = {Outcome.TOO_LOW: "low", Outcome.TOO_HIGH: "high", Outcome.CORRECT: "correct"}
_OUTCOME_FROM_NAME = {v: k for k, v in _OUTCOME_NAMES.items()}


def game_oracle(target: int, guess: int) -> Outcome:
    _check_value(target)
    _check_value(guess)
    if guess == target:
        return Outcome.CORRECT
    return Outcome.TOO_LOW if guess < target else Outcome.TOO_HIGH


def _check_value(v: int) -> None:
    if not (1 <= v <= N_VALUES):
        raise ValueError(f"value {v} outside [1, {N_VALUES}]")


def thermometer_encode(guess: int) -> np.ndarray:
    """256-d binary vector whose first ``guess`` entries are one."""
    _check_value(guess)
    vec = np.zeros(N_VALUES)
    vec[:guess] = 1.0
    return vec


def thermometer_rows(guesses: np.ndarray) -> np.ndarray:
    """Thermometer codes for an integer array, one row per guess."""
    g = np.asarray(guesses, dtype=np.int64)
    if ((g < 1) | (g > N_VALUES)).any():
        raise ValueError("guess outside [1, 256]")
    return (np.arange(N_VALUES)[None, :] < g[:, None]).astype(np.float64)


def outcome_onehot_rows(outcomes: np.ndarray) -> np.ndarray:
    o = np.asarray(outcomes, dtype=np.int64)
    rows = np.zeros((o.shape[0], 3))
    rows[np.arange(o.shape[0]), o] = 1.0
    return rows


@dataclass(frozen=True)
class GameRecord:
    target: int
    guesses: tuple[int, ...]
    outcomes: tuple[Outcome, ...]

    def __post_init__(self):
        _check_value(self.target)
        if len(self.guesses) != len(self.outcomes):
            raise ValueError("guesses and outcomes must have equal length")
        for g, o in zip(self.guesses, self.outcomes):
            if game_oracle(self.target, g) != o:
                raise ValueError(f"outcome {o} inconsistent with target {self.target}, guess {g}")

    @property
    def solved_at(self) -> int | None:
        """1-based move number of the first correct guess, if any."""
        for i, o in enumerate(self.outcomes):
            if o is Outcome.CORRECT:
                return i + 1
        return None


def random_game(target: int, length: int, rng: np.random.Generator) -> GameRecord:
    guesses = tuple(int(v) for v in rng.integers(1, N_VALUES + 1, size=length))
    outcomes = tuple(game_oracle(target, g) for g in guesses)
    return GameRecord(target, guesses, outcomes)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GuesserArch:
    hidden: int = 128
    embed_dim: int = 8
    es_layers: int = 3
    head_layers: int = 2


class GuesserNetwork:
    def __init__(self, arch: GuesserArch, store: ParameterStore):
        self.arch = arch
        self.store = store
        self.self_blocks = [
            AttentionBlock(f"oc.block{i}", arch.hidden, arch.embed_dim, mode="residual")
            for i in range(N_SELF_BLOCKS)
        ]
        self.query_blocks = [
            AttentionBlock(
                f"q.block{i}",
                arch.hidden,
                arch.embed_dim,
                mode="replace" if i == N_QUERY_BLOCKS - 1 else "residual",
            )
            for i in range(N_QUERY_BLOCKS)
        ]

    @classmethod
    def initialize(cls, arch: GuesserArch, seed: int) -> "GuesserNetwork":
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        dims = [N_VALUES] + [arch.hidden] * arch.es_layers
        for i in range(arch.es_layers):
            add_dense(store, f"es.h{i}", dims[i], dims[i + 1], rng)
        store.add("es.key.w", glorot_uniform(rng, arch.hidden, arch.embed_dim))
        store.add("es.key.b", np.zeros((1, arch.embed_dim)))
        add_dense(store, "oc.in", arch.hidden + 3, arch.hidden, rng)
        store.add("q.init", glorot_uniform(rng, 1, arch.hidden))
        net = cls(arch, store)
        for block in net.self_blocks + net.query_blocks:
            block.register(store, rng)
        for i in range(arch.head_layers):
            add_dense(store, f"head.h{i}", arch.hidden, arch.hidden, rng)
        add_dense(store, "head.out", arch.hidden, N_VALUES, rng)
        return net


def _es_hidden(g: Graph, params, net: GuesserNetwork, thermo: Node) -> Node:
    x = thermo
    for i in range(net.arch.es_layers):
        x = g.relu(dense(g, params, f"es.h{i}", x))
    return x


def _es_keys(g: Graph, params, hidden: Node) -> Node:
    return g.add_bias(g.matmul(hidden, params["es.key.w"]), params["es.key.b"])


def _outcome_values(
    g: Graph,
    params,
    net: GuesserNetwork,
    es_hidden: Node,
    onehot: Node,
    self_slices=None,
) -> Node:
    """Outcome pathway: guesses and outcomes cross-reference each other
    through the two self-attention blocks."""
    z = g.relu(dense(g, params, "oc.in", g.concat_cols([es_hidden, onehot])))
    for block in net.self_blocks:
        z, _ = block.apply(g, params, z, z, attention_slices=self_slices)
    return z


def _query_state(
    g: Graph,
    params,
    net: GuesserNetwork,
    n_rows: int,
    memory_values: Node,
    memory_keys: Node,
    query_slices=None,
) -> tuple[Node, list[Node]]:
    """Drive the learned initial query through the three lookups.

    Returns the final state rows and each lookup's attention weights.
    """
    if n_rows == 1:
        z = params["q.init"]
    else:
        z = g.matmul(g.input(np.ones((n_rows, 1))), params["q.init"])
    weight_nodes = []
    for block in net.query_blocks:
        z, w = block.apply(
            g, params, z, memory_values, external_keys=memory_keys, attention_slices=query_slices
        )
        weight_nodes.append(w)
    return z, weight_nodes


def _head(g: Graph, params, net: GuesserNetwork, z: Node) -> Node:
    x = z
    for i in range(net.arch.head_layers):
        x = g.relu(dense(g, params, f"head.h{i}", x))
    return g.softmax_rows(dense(g, params, "head.out", x))


def _memory_arrays(entries) -> tuple[np.ndarray, np.ndarray]:
    if len(entries) == 0:
        raise ValueError("memory must contain at least one (guess, outcome) entry")
    guesses = np.array([e[0] for e in entries], dtype=np.int64)
    outcomes = np.array([int(e[1]) for e in entries], dtype=np.int64)
    return thermometer_rows(guesses), outcome_onehot_rows(outcomes)


def encode_memory(net: GuesserNetwork, entries) -> tuple[np.ndarray, np.ndarray]:
    """Keys (n x embed) from guess encodings only; values (n x hidden) from
    the outcome pathway."""
    thermo, onehot = _memory_arrays(entries)
    g = Graph()
    params = net.store.bind_all(g)
    hidden = _es_hidden(g, params, net, g.input(thermo))
    keys = _es_keys(g, params, hidden)
    values = _outcome_values(g, params, net, hidden, g.input(onehot))
    g.set_output(values)
    evaluate_graph(g)
    return keys.value, values.value


def candidate_keys(net: GuesserNetwork, candidates=None) -> np.ndarray:
    """Key embeddings of candidate guesses (defaults to all 256)."""
    if candidates is None:
        candidates = np.arange(1, N_VALUES + 1)
    thermo = thermometer_rows(np.asarray(candidates))
    g = Graph()
    params = net.store.bind_all(g)
    g.set_output(_es_keys(g, params, _es_hidden(g, params, net, g.input(thermo))))
    return evaluate_graph(g)


def predict_target_distribution(net: GuesserNetwork, entries) -> np.ndarray:
    """256-way probability vector over the secret number, from real memory only."""
    keys, values = encode_memory(net, entries)
    g = Graph()
    params = net.store.bind_all(g)
    z, _ = _query_state(g, params, net, 1, g.input(values), g.input(keys))
    g.set_output(_head(g, params, net, z))
    return evaluate_graph(g)[0]


@dataclass
class SaliencyProfile:
    """Attention read-out over real memory plus virtual candidate keys.

    ``lookup_weights[i]`` is lookup i's full weight row (reals first, then
    one entry per candidate); each row sums to 1.
    """

    lookup_weights: list[np.ndarray]
    n_real: int
    candidates: np.ndarray

    def candidate_weights(self, lookup: int) -> np.ndarray:
        return self.lookup_weights[lookup][self.n_real :]

    def aggregate(self, mode: str = "third") -> np.ndarray:
        if mode == "third":
            return self.candidate_weights(N_QUERY_BLOCKS - 1)
        if mode == "mean":
            return np.mean([self.candidate_weights(i) for i in range(N_QUERY_BLOCKS)], axis=0)
        raise ValueError(f"unknown saliency aggregate {mode!r}")


def saliency_over_candidates(net: GuesserNetwork, entries, candidates=None) -> SaliencyProfile:
    """Second pass over memory with virtual keys appended.

    Virtual entries have no outcomes, so their value rows are zero: they
    soak up attention weight (that is the read-out) but contribute nothing
    to the pooled values. The prediction pass never sees them.
    """
    if candidates is None:
        candidates = np.arange(1, N_VALUES + 1)
    candidates = np.asarray(candidates, dtype=np.int64)
    keys, values = encode_memory(net, entries)
    virtual = candidate_keys(net, candidates)
    all_keys = np.vstack([keys, virtual])
    all_values = np.vstack([values, np.zeros((virtual.shape[0], values.shape[1]))])
    g = Graph()
    params = net.store.bind_all(g)
    _, weight_nodes = _query_state(g, params, net, 1, g.input(all_values), g.input(all_keys))
    g.set_output(weight_nodes[-1])
    evaluate_graph(g)
    return SaliencyProfile([w.value[0] for w in weight_nodes], keys.shape[0], candidates)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class GuesserTrainConfig:
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 1e-4
    game_length: int = GAME_LENGTH


@dataclass
class GuesserHistory:
    batch_loss: list[float]
    epoch_loss: list[float]


def _game_arrays(games: list[GameRecord], length: int):
    guesses = np.array([g.guesses for g in games], dtype=np.int64)
    outcomes = np.array([[int(o) for o in g.outcomes] for g in games], dtype=np.int64)
    targets = np.array([g.target for g in games], dtype=np.int64)
    if guesses.shape[1] != length:
        raise ValueError(f"corpus games must have length {length}, got {guesses.shape[1]}")
    return guesses, outcomes, targets


def build_guesser_loss_graph(
    net: GuesserNetwork,
    guesses: np.ndarray,
    outcomes: np.ndarray,
    targets: np.ndarray,
) -> Graph:
    """Cross-entropy of the predicted distribution against each game's
    target, with the full (future-inclusive) memory encoded per game."""
    b, length = guesses.shape
    thermo = thermometer_rows(guesses.reshape(-1))
    onehot = outcome_onehot_rows(outcomes.reshape(-1))
    self_slices = [(i * length, (i + 1) * length, i * length, (i + 1) * length) for i in range(b)]
    query_slices = [(i, i + 1, i * length, (i + 1) * length) for i in range(b)]

    g = Graph()
    params = net.store.bind_all(g)
    hidden = _es_hidden(g, params, net, g.input(thermo))
    keys = _es_keys(g, params, hidden)
    values = _outcome_values(g, params, net, hidden, g.input(onehot), self_slices=self_slices)
    z, _ = _query_state(g, params, net, b, values, keys, query_slices=query_slices)
    probs = _head(g, params, net, z)

    mask = np.zeros((b, N_VALUES))
    mask[np.arange(b), targets - 1] = 1.0
    eps = g.input(np.full((b, N_VALUES), 1e-12))
    picked = g.mul(g.input(mask), g.log(g.add(probs, eps)))
    g.set_output(g.scale(g.mean_reduce(picked), -float(N_VALUES)))
    return g


def train_guesser(
    games: list[GameRecord],
    net: GuesserNetwork,
    cfg: GuesserTrainConfig,
    root_seed: int,
    log_every: int = 0,
) -> GuesserHistory:
    guesses, outcomes, targets = _game_arrays(games, cfg.game_length)
    order_rng = stream(root_seed, "guesser/epochs")
    history = GuesserHistory([], [])
    n = guesses.shape[0]
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            g = build_guesser_loss_graph(net, guesses[idx], outcomes[idx], targets[idx])
            loss = float(evaluate_graph(g)[0, 0])
            grads = backpropagate(g, np.ones((1, 1)))
            adam_step(net.store, grads, cfg.learning_rate)
            history.batch_loss.append(loss)
            epoch_losses.append(loss)
        history.epoch_loss.append(float(np.mean(epoch_losses)))
        if log_every and ((epoch + 1) % log_every == 0):
            print(f"epoch {epoch + 1}/{cfg.epochs} loss {history.epoch_loss[-1]:.4f}", flush=True)
    return history


# ---------------------------------------------------------------------------
# Playout policies
# ---------------------------------------------------------------------------

POLICIES = ("saliency", "prediction", "binary_search", "passive", "random")


class ConsistentRange:
    """The exact set of targets consistent with high/low feedback.

    Feedback on any guess only ever trims one end, so the set stays a
    contiguous range; it must always contain the target."""

    def __init__(self):
        self.lo = 1
        self.hi = N_VALUES

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    def update(self, guess: int, outcome: Outcome) -> None:
        if outcome is Outcome.TOO_LOW:
            self.lo = max(self.lo, guess + 1)
        elif outcome is Outcome.TOO_HIGH:
            self.hi = min(self.hi, guess - 1)
        else:
            self.lo = self.hi = guess
        if self.lo > self.hi:
            raise RuntimeError("inconsistent feedback: no candidate target remains")

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.lo, self.hi + 1))


def play_policy(
    policy: str,
    net: GuesserNetwork | None,
    target: int,
    rng: np.random.Generator,
    max_moves: int = 20,
    saliency_aggregate: str = "third",
    virtual_keys: np.ndarray | None = None,
) -> GameRecord:
    """Play one game; stops at the first correct guess or after max_moves.

    Network policies spend their first move on a seeded random guess to
    populate memory, then argmax their score over candidates with
    already-made guesses masked out (ties break toward the lower guess).
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if policy in ("saliency", "prediction") and net is None:
        raise ValueError(f"policy {policy!r} requires a network")
    if policy == "saliency" and virtual_keys is None:
        virtual_keys = candidate_keys(net)

    guesses: list[int] = []
    outcomes: list[Outcome] = []
    consistent = ConsistentRange()
    unguessed = list(range(1, N_VALUES + 1))

    def record(guess: int) -> Outcome:
        outcome = game_oracle(target, guess)
        guesses.append(guess)
        outcomes.append(outcome)
        consistent.update(guess, outcome)
        if guess in unguessed:
            unguessed.remove(guess)
        return outcome

    lo, hi = 1, N_VALUES
    for move in range(max_moves):
        if policy == "binary_search":
            guess = (lo + hi) // 2
        elif policy == "passive":
            guess = consistent.sample(rng)
        elif policy == "random":
            guess = unguessed[int(rng.integers(len(unguessed)))]
        elif move == 0:
            guess = int(rng.integers(1, N_VALUES + 1))
        else:
            entries = list(zip(guesses, outcomes))
            if policy == "prediction":
                scores = predict_target_distribution(net, entries).copy()
            else:
                scores = _saliency_scores(net, entries, saliency_aggregate, virtual_keys)
            for seen in guesses:
                scores[seen - 1] = -np.inf
            guess = int(np.argmax(scores)) + 1
        outcome = record(guess)
        if outcome is Outcome.CORRECT:
            break
        if policy == "binary_search":
            if outcome is Outcome.TOO_LOW:
                lo = guess + 1
            else:
                hi = guess - 1
    return GameRecord(target, tuple(guesses), tuple(outcomes))


def _saliency_scores(net, entries, aggregate, virtual_keys) -> np.ndarray:
    """Saliency pass with precomputed virtual keys (parameters frozen)."""
    keys, values = encode_memory(net, entries)
    all_keys = np.vstack([keys, virtual_keys])
    all_values = np.vstack([values, np.zeros((virtual_keys.shape[0], values.shape[1]))])
    g = Graph()
    params = net.store.bind_all(g)
    _, weight_nodes = _query_state(g, params, net, 1, g.input(all_values), g.input(all_keys))
    g.set_output(weight_nodes[-1])
    evaluate_graph(g)
    profile = SaliencyProfile([w.value[0] for w in weight_nodes], keys.shape[0], np.arange(1, N_VALUES + 1))
    return profile.aggregate(aggregate).copy()


def evaluate_success_curve(
    policies,
    net: GuesserNetwork | None,
    n_games: int,
    root_seed: int,
    max_moves: int = 20,
    saliency_aggregate: str = "third",
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Cumulative success rate by move for each policy.

    Deterministic policies (binary search) are enumerated exactly over all
    256 targets; stochastic ones play ``n_games`` sampled games.
    """
    results = {}
    vkeys = candidate_keys(net) if net is not None and "saliency" in policies else None
    for policy in policies:
        if policy == "binary_search":
            records = [
                play_policy(policy, None, t, np.random.default_rng(0), max_moves)
                for t in range(1, N_VALUES + 1)
            ]
            counts = _solved_by_move(records, max_moves)
            results[policy] = (counts / N_VALUES, np.zeros(max_moves))
        else:
            rng = stream(root_seed, f"guesser-eval/{policy}")
            records = []
            for _ in range(n_games):
                target = int(rng.integers(1, N_VALUES + 1))
                records.append(
                    play_policy(policy, net, target, rng, max_moves, saliency_aggregate, vkeys)
                )
            rate = _solved_by_move(records, max_moves) / n_games
            stderr = np.sqrt(rate * (1.0 - rate) / n_games)
            results[policy] = (rate, stderr)
    return results


def _solved_by_move(records: list[GameRecord], max_moves: int) -> np.ndarray:
    counts = np.zeros(max_moves)
    for rec in records:
        if rec.solved_at is not None:
            counts[rec.solved_at - 1 :] += 1
    return counts


# ---------------------------------------------------------------------------
# Corpus persistence: target, then (guess, outcome) pairs
# ---------------------------------------------------------------------------


def save_games(games: list[GameRecord], path) -> None:
    length = len(games[0].guesses)
    header = ["target"]
    for i in range(1, length + 1):
        header += [f"guess_{i}", f"outcome_{i}"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for game in games:
            row = [game.target]
            for guess, outcome in zip(game.guesses, game.outcomes):
                row += [guess, _OUTCOME_NAMES[outcome]]
            writer.writerow(row)


def load_games(path) -> list[GameRecord]:
    games = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "target":
            raise ValueError(f"unexpected games header in {path}")
        for row in reader:
            if not row:
                continue
            target = int(row[0])
            guesses = tuple(int(v) for v in row[1::2])
            outcomes = tuple(_OUTCOME_FROM_NAME[v] for v in row[2::2])
            games.append(GameRecord(target, guesses, outcomes))
    return games
