"""Explorer model tests: embedding contracts, prediction pipeline against a
straight-line scripted oracle, brute-force novelty, rollout behaviour, and
training-loop plumbing at toy scale."""

import numpy as np
import pytest

from novattn.autodiff import evaluate_graph
from novattn.explorer import (
    Episode,
    EpisodicMemory,
    ExplorerArch,
    ExplorerNetwork,
    RolloutConfig,
    TrainConfig,
    batch_loss,
    build_explorer_loss_graph,
    embed_state_action,
    embed_state_actions,
    embed_outcomes,
    greedy_curious_rollout,
    novelty_field,
    novelty_score,
    novelty_scores_batch,
    predict_collision_prob,
    question_saliency_map,
    train_explorer,
)
from novattn.floorplan import generate_floorplan, rollout_random, sample_start
from novattn.gradcheck import gradient_check
from novattn.selftest import explorer_network_case

TINY = ExplorerArch(hidden=24, n_hidden=2, key_dim=6, value_dim=10, alpha=20.0)


@pytest.fixture()
def tiny_net():
    return ExplorerNetwork.initialize(TINY, seed=1)


def _random_memory(net, rng, n=12):
    memory = EpisodicMemory(net)
    plan = generate_floorplan(77)
    start = sample_start(plan, rng)
    transitions, _ = rollout_random(plan, start, n, rng)
    memory.extend(transitions)
    return memory, plan, transitions


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def test_embedding_deterministic_and_correct_dim():
    net = ExplorerNetwork.initialize(ExplorerArch(), seed=3)  # published widths
    key_a = embed_state_action(net, (0.3, 0.4), (1.0, 0.0))
    key_b = embed_state_action(net, (0.3, 0.4), (1.0, 0.0))
    assert key_a.shape == (24,)
    assert np.array_equal(key_a, key_b)


def test_embedding_rejects_non_unit_action(tiny_net):
    with pytest.raises(ValueError):
        embed_state_action(tiny_net, (0.3, 0.4), (0.5, 0.5))


def test_fresh_network_keys_nondegenerate():
    net = ExplorerNetwork.initialize(ExplorerArch(), seed=4)
    rng = np.random.default_rng(0)
    theta = rng.uniform(0, 2 * np.pi, size=1000)
    sa = np.column_stack([rng.uniform(0, 1, (1000, 2)), np.cos(theta), np.sin(theta)])
    keys = embed_state_actions(net, sa)
    assert np.isfinite(keys).all()
    assert (keys.std(axis=0) > 0).all()


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def test_prediction_requires_memory(tiny_net):
    memory = EpisodicMemory(tiny_net)
    with pytest.raises(ValueError):
        predict_collision_prob(tiny_net, memory, (0.5, 0.5), (1.0, 0.0))


def test_prediction_in_unit_interval(tiny_net):
    rng = np.random.default_rng(2)
    memory, plan, _ = _random_memory(tiny_net, rng)
    # batched equivalent of 1e4 scalar calls, through the same graph ops
    from novattn.attention import soft_knn_node
    from novattn.autodiff import Graph
    from novattn.explorer import es_forward, p_forward

    theta = rng.uniform(0, 2 * np.pi, size=10_000)
    sa = np.column_stack([rng.uniform(0, 1, (10_000, 2)), np.cos(theta), np.sin(theta)])
    g = Graph()
    params = tiny_net.store.bind_all(g)
    query = es_forward(g, params, tiny_net, g.input(sa))
    pooled, _ = soft_knn_node(g, g.input(memory.keys), g.input(memory.values), query, TINY.alpha)
    g.set_output(p_forward(g, params, tiny_net, pooled))
    probs = evaluate_graph(g)
    assert (probs > 0).all() and (probs < 1).all()


def test_single_transition_memory_prediction_ignores_query(tiny_net):
    rng = np.random.default_rng(3)
    memory, plan, transitions = _random_memory(tiny_net, rng, n=1)
    p1 = predict_collision_prob(tiny_net, memory, (0.2, 0.2), (1.0, 0.0))
    p2 = predict_collision_prob(tiny_net, memory, (0.8, 0.9), (0.0, -1.0))
    # soft-kNN weight over one memory is [1], so P sees only that value row
    assert abs(p1 - p2) < 1e-12


def _mlp_oracle(store, prefix, x, n_hidden):
    h = x
    for i in range(n_hidden):
        h = np.maximum(h @ store[f"{prefix}.h{i}.w"] + store[f"{prefix}.h{i}.b"], 0.0)
    return h @ store[f"{prefix}.proj.w"] + store[f"{prefix}.proj.b"]


def test_pipeline_matches_scripted_composition(tiny_net):
    """Straight-line numpy re-implementation of embed -> soft-kNN -> P."""
    rng = np.random.default_rng(4)
    memory, plan, transitions = _random_memory(tiny_net, rng, n=9)
    state, action = (0.41, 0.37), (0.6, 0.8)
    got = predict_collision_prob(tiny_net, memory, state, action)

    store = tiny_net.store
    mem_sa = np.array([[*t.state, *t.action] for t in transitions])
    mem_sao = np.array([[*t.state, *t.action, float(t.collided)] for t in transitions])
    keys = _mlp_oracle(store, "es", mem_sa, TINY.n_hidden)
    values = _mlp_oracle(store, "eo", mem_sao, TINY.n_hidden)
    query = _mlp_oracle(store, "es", np.array([[*state, *action]]), TINY.n_hidden)
    d = np.sqrt(((keys - query) ** 2).sum(axis=1))
    w = np.exp(-TINY.alpha * (d - d.min()))
    w /= w.sum()
    pooled = w @ values
    logit = _mlp_oracle(store, "p", pooled[None, :], TINY.n_hidden)
    expected = 1.0 / (1.0 + np.exp(-logit[0, 0]))
    assert abs(got - expected) < 1e-10


# ---------------------------------------------------------------------------
# novelty
# ---------------------------------------------------------------------------


def test_novelty_zero_for_memorized_pair(tiny_net):
    rng = np.random.default_rng(5)
    memory, plan, transitions = _random_memory(tiny_net, rng)
    t = transitions[4]
    assert novelty_score(tiny_net, memory, t.state, t.action) == 0.0


def test_novelty_empty_memory_fails(tiny_net):
    with pytest.raises(ValueError):
        novelty_score(tiny_net, EpisodicMemory(tiny_net), (0.5, 0.5), (1.0, 0.0))


def test_novelty_matches_brute_force_and_permutation_invariant(tiny_net):
    rng = np.random.default_rng(6)
    memory, plan, transitions = _random_memory(tiny_net, rng, n=20)
    state, action = (0.31, 0.62), (0.0, 1.0)
    score = novelty_score(tiny_net, memory, state, action)
    # brute force: per-key norm, one at a time
    query = embed_state_action(tiny_net, state, action)
    brute = min(float(np.linalg.norm(query - k)) for k in memory.keys)
    assert abs(score - brute) < 1e-12

    shuffled = EpisodicMemory(tiny_net)
    order = rng.permutation(len(transitions))
    shuffled.extend([transitions[i] for i in order])
    assert abs(novelty_score(tiny_net, shuffled, state, action) - score) < 1e-12


def test_novelty_argmax_invariant_to_key_space_scaling(tiny_net):
    rng = np.random.default_rng(7)
    memory, plan, _ = _random_memory(tiny_net, rng, n=15)
    theta = rng.uniform(0, 2 * np.pi, size=40)
    proposals = np.column_stack([np.cos(theta), np.sin(theta)])
    state = (0.45, 0.5)
    before = novelty_scores_batch(tiny_net, memory, state, proposals)

    for suffix in ("w", "b"):
        tiny_net.store.entries[f"es.proj.{suffix}"].value *= 3.7
    memory.rebuild()
    after = novelty_scores_batch(tiny_net, memory, state, proposals)
    assert int(np.argmax(before)) == int(np.argmax(after))
    assert np.abs(after - 3.7 * before).max() < 1e-9


def test_memory_caches_match_fresh_recomputation(tiny_net):
    rng = np.random.default_rng(8)
    memory, plan, transitions = _random_memory(tiny_net, rng, n=10)
    # bit-for-bit against the canonical single-row embedding path
    for i, t in enumerate(transitions):
        sa = np.array([[*t.state, *t.action]])
        sao = np.array([[*t.state, *t.action, float(t.collided)]])
        assert np.array_equal(memory.keys[i], embed_state_actions(tiny_net, sa)[0])
        assert np.array_equal(memory.values[i], embed_outcomes(tiny_net, sao)[0])
    before = memory.keys.copy()
    memory.rebuild()
    assert np.array_equal(memory.keys, before)


# ---------------------------------------------------------------------------
# greedy rollout
# ---------------------------------------------------------------------------


def test_rollout_memory_length_and_positions(tiny_net):
    plan = generate_floorplan(21)
    rng = np.random.default_rng(9)
    memory = EpisodicMemory(tiny_net)
    cfg = RolloutConfig(warmup_steps=10, n_proposals=5)
    transitions, positions = greedy_curious_rollout(tiny_net, plan, 25, rng, cfg, memory=memory)
    assert len(memory) == 10 + 25
    assert len(transitions) == 35
    assert len(positions) == 36
    assert all(plan.contains(p) for p in positions)


def test_rollout_with_one_proposal_equals_random_policy(tiny_net):
    plan = generate_floorplan(22)
    start = sample_start(plan, np.random.default_rng(1))
    cfg = RolloutConfig(warmup_steps=4, n_proposals=1)
    greedy, g_pos = greedy_curious_rollout(
        tiny_net, plan, 30, np.random.default_rng(33), cfg, start=start
    )
    random_t, r_pos = rollout_random(plan, start, 34, np.random.default_rng(33), cfg.step_length)
    assert greedy == random_t
    assert g_pos == r_pos


def test_rollout_actions_match_brute_force_replay(tiny_net):
    """Replay the rollout's rng stream and recompute every greedy choice
    with an independent brute-force nearest-neighbour loop."""
    from novattn.floorplan import Transition, random_direction, step_agent

    plan = generate_floorplan(23)
    seed = 91
    cfg = RolloutConfig(warmup_steps=6, n_proposals=8)
    start = sample_start(plan, np.random.default_rng(2))
    transitions, _ = greedy_curious_rollout(
        tiny_net, plan, 12, np.random.default_rng(seed), cfg, start=start
    )

    rng = np.random.default_rng(seed)
    state = start
    keys = []
    for i in range(6):
        action = random_direction(rng)
        assert transitions[i].action == action
        keys.append(embed_state_action(tiny_net, state.position, action))
        state, _ = step_agent(plan, state, action, cfg.step_length)
    for i in range(6, 18):
        proposals = [random_direction(rng) for _ in range(8)]
        scores = []
        for a in proposals:
            q = embed_state_action(tiny_net, state.position, a)
            scores.append(min(float(np.linalg.norm(q - k)) for k in keys))
        best = proposals[int(np.argmax(scores))]
        assert transitions[i].action == best
        keys.append(embed_state_action(tiny_net, state.position, best))
        state, _ = step_agent(plan, state, best, cfg.step_length)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


def test_novelty_field_rows_inside_region_and_deterministic(tiny_net):
    rng = np.random.default_rng(11)
    memory, plan, _ = _random_memory(tiny_net, rng, n=15)
    rows_a = novelty_field(tiny_net, memory, plan, grid=10, n_proposals=6, proposal_seed=3)
    rows_b = novelty_field(tiny_net, memory, plan, grid=10, n_proposals=6, proposal_seed=3)
    assert rows_a == rows_b
    assert len(rows_a) > 0
    for x, y, nov, ax, ay in rows_a:
        assert plan.contains((x, y))
        assert nov >= 0.0
        assert abs(np.hypot(ax, ay) - 1.0) < 1e-9


def test_question_saliency_weights_sum_to_one_and_peak_at_question(tiny_net):
    rng = np.random.default_rng(12)
    plan = generate_floorplan(31)
    question_state = sample_start(plan, rng).position
    question_action = (1.0, 0.0)
    rows = question_saliency_map(
        tiny_net, plan, (question_state, question_action), grid=12, actions_per_point=4
    )
    weights = np.array([r[4] for r in rows])
    assert abs(weights.sum() - 1.0) < 1e-9

    # a probe identical to the question must win: append and recompute
    probe_rows = [(r[0], r[1], r[2], r[3]) for r in rows]
    probe_rows.append((*question_state, *question_action))
    sa = np.asarray(probe_rows)
    keys = embed_state_actions(tiny_net, sa)
    q = embed_state_action(tiny_net, question_state, question_action)
    d = np.sqrt(((keys - q) ** 2).sum(axis=1))
    w = np.exp(-TINY.alpha * (d - d.min()))
    w /= w.sum()
    assert int(np.argmax(w)) == len(probe_rows) - 1


# ---------------------------------------------------------------------------
# training plumbing
# ---------------------------------------------------------------------------


def _toy_corpus(n_traj=12, steps=450):
    corpus = []
    for i in range(n_traj):
        plan = generate_floorplan(400 + i)
        start = sample_start(plan, np.random.default_rng(500 + i))
        transitions, _ = rollout_random(plan, start, steps, np.random.default_rng(600 + i))
        corpus.append(transitions)
    return corpus


def test_train_explorer_rejects_short_trajectories(tiny_net):
    corpus = _toy_corpus(n_traj=6, steps=350)
    cfg = TrainConfig(n_batches=1, episodes_per_batch=2, memory_window=300, query_window=100)
    with pytest.raises(ValueError, match="at least"):
        train_explorer(corpus, tiny_net, cfg, root_seed=0)


def test_train_explorer_rejects_small_corpus(tiny_net):
    corpus = _toy_corpus(n_traj=3)
    cfg = TrainConfig(n_batches=1, episodes_per_batch=5, memory_window=300, query_window=100)
    with pytest.raises(ValueError, match="corpus too small"):
        train_explorer(corpus, tiny_net, cfg, root_seed=0)


def test_train_explorer_loss_goes_down_at_toy_scale(tiny_net):
    corpus = _toy_corpus()
    cfg = TrainConfig(
        n_batches=40,
        episodes_per_batch=4,
        memory_window=300,
        query_window=100,
        eval_every=10,
        eval_episodes=4,
    )
    history = train_explorer(corpus, tiny_net, cfg, root_seed=1)
    assert len(history.train_loss) == 40
    assert len(history.eval_loss) == 4
    assert np.mean(history.train_loss[-10:]) < np.mean(history.train_loss[:10])


def test_patience_schedule_decays_after_misses():
    from novattn.explorer import PatienceSchedule

    sched = PatienceSchedule(lr=4e-4, decay=0.9, patience=10, floor=1e-6)
    assert sched.observe(1.0) == 4e-4  # new minimum
    for _ in range(9):
        assert sched.observe(1.0) == 4e-4  # nine misses: under patience
    assert sched.observe(1.0) == pytest.approx(4e-4 * 0.9)  # tenth fires
    # a new minimum resets the window
    sched.observe(0.5)
    for _ in range(9):
        sched.observe(0.5)
    assert sched.lr == pytest.approx(4e-4 * 0.9)
    assert sched.observe(0.5) == pytest.approx(4e-4 * 0.81)


def test_patience_schedule_floor_never_raises_rate():
    from novattn.explorer import PatienceSchedule

    sched = PatienceSchedule(lr=1e-6, decay=0.9, patience=1, floor=1e-6)
    sched.observe(1.0)
    assert sched.observe(1.0) == 1e-6  # clamped at the floor
    tiny = PatienceSchedule(lr=1e-9, decay=0.9, patience=1, floor=1e-6)
    tiny.observe(1.0)
    assert tiny.observe(1.0) == 1e-9  # floor must not push the rate up


def test_whole_network_gradient_check_reduced_width():
    build, store = explorer_network_case()
    report = gradient_check(build, store, tolerance=1e-4)
    assert report.passed, report.summary()


def test_batch_graph_equals_per_episode_average(tiny_net):
    """The sliced batch tape must equal the mean of independent episodes."""
    rng = np.random.default_rng(13)
    episodes = []
    for _ in range(3):
        theta = rng.uniform(0, 2 * np.pi, size=8)
        sao = np.column_stack(
            [rng.uniform(0, 1, (8, 2)), np.cos(theta), np.sin(theta), rng.integers(0, 2, 8)]
        )
        theta_q = rng.uniform(0, 2 * np.pi, size=4)
        q = np.column_stack([rng.uniform(0, 1, (4, 2)), np.cos(theta_q), np.sin(theta_q)])
        episodes.append(Episode(sao, q, rng.integers(0, 2, (4, 1)).astype(float)))
    combined = batch_loss(tiny_net, episodes)
    separate = np.mean([batch_loss(tiny_net, [ep]) for ep in episodes])
    assert abs(combined - separate) < 1e-12


# ---------------------------------------------------------------------------
# measured properties of the desk-scale trained network (slow)
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_trained_field_ranks_visited_cells_less_novel(exploration_run):
    from novattn import cli as cli_mod
    from novattn import config as cfg_mod
    from novattn.floorplan import grid_cell
    from novattn.seeds import derive_seed, stream

    cfg = exploration_run["cfg"]
    net = cli_mod._load_explorer(cfg, exploration_run["checkpoint"])
    visited_means, unvisited_means = [], []
    for r in range(10):
        plan = generate_floorplan(derive_seed(cfg.seed, f"field-test-plan-{r}"))
        memory = EpisodicMemory(net, capacity=400)
        _, positions = greedy_curious_rollout(
            net, plan, 300, stream(cfg.seed, f"field-test-rollout-{r}"),
            cfg_mod.rollout_config(cfg), memory=memory,
        )
        rows = novelty_field(net, memory, plan, grid=16, n_proposals=50, proposal_seed=r)
        visited = {grid_cell(p) for p in positions}
        nov_visited = [nov for x, y, nov, _, _ in rows if grid_cell((x, y)) in visited]
        nov_unvisited = [nov for x, y, nov, _, _ in rows if grid_cell((x, y)) not in visited]
        if nov_visited and nov_unvisited:
            visited_means.append(np.mean(nov_visited))
            unvisited_means.append(np.mean(nov_unvisited))
    assert len(visited_means) >= 8
    assert np.mean(visited_means) < np.mean(unvisited_means), (
        f"visited cells should look less novel: {np.mean(visited_means):.4f} vs "
        f"{np.mean(unvisited_means):.4f}"
    )


@pytest.mark.slow
def test_question_saliency_mass_concentrates_locally(exploration_run):
    from novattn import cli as cli_mod
    from novattn.floorplan import random_direction
    from novattn.seeds import derive_seed, stream

    cfg = exploration_run["cfg"]
    net = cli_mod._load_explorer(cfg, exploration_run["checkpoint"])
    plan = generate_floorplan(derive_seed(cfg.seed, "saliency-test-plan"))
    rng = stream(cfg.seed, "saliency-test-questions")
    radius = 2 * cfg.step_length
    within_mass, beyond_mass = [], []
    for q in range(20):
        q_state = sample_start(plan, rng).position
        q_action = random_direction(rng)
        rows = question_saliency_map(
            net, plan, (q_state, q_action), grid=24, actions_per_point=8, proposal_seed=q
        )
        w_in = sum(w for x, y, _, _, w in rows if np.hypot(x - q_state[0], y - q_state[1]) <= radius)
        w_out = sum(w for x, y, _, _, w in rows if np.hypot(x - q_state[0], y - q_state[1]) > radius)
        within_mass.append(w_in)
        beyond_mass.append(w_out)
    assert np.mean(within_mass) > np.mean(beyond_mass), (
        f"saliency should concentrate within {radius} of the question: "
        f"{np.mean(within_mass):.3f} within vs {np.mean(beyond_mass):.3f} beyond"
    )


@pytest.mark.slow
def test_desk_training_loss_moving_average_decreases(exploration_run):
    import csv

    train_losses = []
    with open(exploration_run["root"] / "train" / "explorer_loss.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] == "train" and int(row["batch"]) <= 500:
                train_losses.append(float(row["loss"]))
    assert len(train_losses) == 500
    window = 100
    moving = np.convolve(train_losses, np.ones(window) / window, mode="valid")
    assert (moving[1:] < moving[0]).all(), "100-batch moving average must stay below its start"


@pytest.mark.slow
def test_desk_heldout_loss_beats_base_rate(exploration_run):
    import csv

    from novattn.floorplan import load_trajectories

    corpus = load_trajectories(exploration_run["corpus"])
    collisions = [t.collided for transitions in corpus.values() for t in transitions]
    r = float(np.mean(collisions))
    base_entropy = -r * np.log(r) - (1 - r) * np.log(1 - r)

    eval_losses = []
    with open(exploration_run["root"] / "train" / "explorer_loss.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] == "heldout":
                eval_losses.append(float(row["loss"]))
    assert eval_losses[-1] < eval_losses[0], "held-out loss must improve over training"
    assert eval_losses[-1] < base_entropy, (
        f"trained loss {eval_losses[-1]:.4f} must beat the base-rate entropy {base_entropy:.4f}"
    )
    relative_gain = (base_entropy - eval_losses[-1]) / base_entropy
    assert relative_gain >= 0.20, (
        f"desk-scale training should close >= 20% of the base-rate entropy: got {relative_gain:.1%}"
    )
