"""Command-line driver tying the experiments together reproducibly.

Every subcommand resolves one RunConfig (file < flags), derives all its
randomness from the single root seed, writes artifacts plus the fully
resolved config into --out, and exits 0 on success, 1 on runtime failure,
2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfg_mod
from .config import RunConfig
from .explorer import (
    EpisodicMemory,
    ExplorerNetwork,
    evaluate_exploration,
    greedy_curious_rollout,
    novelty_field,
    question_saliency_map,
    train_explorer,
)
from .floorplan import (
    generate_floorplan,
    load_trajectories,
    random_direction,
    rollout_random,
    sample_start,
    save_floorplan,
    save_trajectories,
)
from .guessing import (
    GuesserNetwork,
    Outcome,
    evaluate_success_curve,
    play_policy,
    random_game,
    saliency_over_candidates,
    save_games,
    load_games,
    train_guesser,
    POLICIES,
)
from .seeds import derive_seed, stream


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def _prepare_out(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_mod.echo_config(cfg, out / "resolved_config.txt")
    return out


# ---------------------------------------------------------------------------
# Pipelines (importable; the CLI wraps these)
# ---------------------------------------------------------------------------


def pipeline_gen_floorplans(cfg: RunConfig, out_dir, count: int = 10) -> list[Path]:
    out = _prepare_out(cfg, out_dir)
    paths = []
    for i in range(count):
        plan = generate_floorplan(
            derive_seed(cfg.seed, f"floorplan-{i}"),
            (cfg.rect_count_min, cfg.rect_count_max),
            (cfg.side_min, cfg.side_max),
        )
        path = out / f"floorplan_{i:03d}.csv"
        save_floorplan(plan, path)
        paths.append(path)
    return paths


def pipeline_gen_trajectories(cfg: RunConfig, out_dir, log=None) -> Path:
    """Random-action corpus: one fresh floorplan per trajectory."""
    out = _prepare_out(cfg, out_dir)
    trajectories = {}
    for i in range(cfg.explorer_trajectories):
        plan = generate_floorplan(
            derive_seed(cfg.seed, f"corpus-plan-{i}"),
            (cfg.rect_count_min, cfg.rect_count_max),
            (cfg.side_min, cfg.side_max),
        )
        start = sample_start(plan, stream(cfg.seed, f"corpus-start-{i}"))
        rng = stream(cfg.seed, f"corpus-actions-{i}")
        transitions, _ = rollout_random(plan, start, cfg.trajectory_steps, rng, cfg.step_length)
        trajectories[i] = transitions
        if log and (i + 1) % 100 == 0:
            log(f"generated {i + 1}/{cfg.explorer_trajectories} trajectories")
    path = out / "trajectories.csv"
    save_trajectories(trajectories, path)
    return path


def pipeline_train_explorer(cfg: RunConfig, out_dir, corpus_path, log=None) -> Path:
    out = _prepare_out(cfg, out_dir)
    corpus_map = load_trajectories(corpus_path)
    corpus = [corpus_map[k] for k in sorted(corpus_map)]
    net = ExplorerNetwork.initialize(cfg_mod.explorer_arch(cfg), derive_seed(cfg.seed, "explorer-init"))
    history = train_explorer(
        corpus,
        net,
        cfg_mod.explorer_train_config(cfg),
        cfg.seed,
        log_every=cfg.eval_every if log else 0,
    )
    ckpt_path = out / "explorer.ckpt"
    ckpt.save_checkpoint(ckpt_path, net.store)
    rows = [("train", i + 1, _fmt(loss)) for i, loss in enumerate(history.train_loss)]
    rows += [("heldout", b, _fmt(loss)) for b, loss in zip(history.eval_batches, history.eval_loss)]
    _write_csv(out / "explorer_loss.csv", ["split", "batch", "loss"], rows)
    return ckpt_path


def _load_explorer(cfg: RunConfig, checkpoint_path) -> ExplorerNetwork:
    net = ExplorerNetwork.initialize(cfg_mod.explorer_arch(cfg), derive_seed(cfg.seed, "explorer-init"))
    ckpt.load_into_store(checkpoint_path, net.store)
    return net


def pipeline_eval_exploration(cfg: RunConfig, out_dir, checkpoint_path, log=None) -> Path:
    out = _prepare_out(cfg, out_dir)
    trained = _load_explorer(cfg, checkpoint_path)
    untrained = ExplorerNetwork.initialize(
        cfg_mod.explorer_arch(cfg), derive_seed(cfg.seed, "explorer-init")
    )
    curves = evaluate_exploration(
        {"random": None, "untrained": untrained, "trained": trained},
        cfg.seed,
        n_plans=cfg.eval_plans,
        n_steps=cfg.eval_steps,
        rollout_cfg=cfg_mod.rollout_config(cfg),
        grid=cfg.coverage_grid,
        log=log,
    )
    rows = []
    for policy in sorted(curves):
        mean, stderr = curves[policy]
        for step in range(mean.shape[0]):
            rows.append((policy, step, _fmt(mean[step]), _fmt(stderr[step])))
    path = out / "exploration_curve.csv"
    _write_csv(path, ["policy", "step", "mean_cells", "stderr"], rows)
    return path


def pipeline_render_fields(cfg: RunConfig, out_dir, checkpoint_path, rollout_steps: int = 300) -> tuple[Path, Path]:
    """Novelty-by-position field and a per-question saliency map after a
    short curious rollout on a fresh floorplan."""
    out = _prepare_out(cfg, out_dir)
    net = _load_explorer(cfg, checkpoint_path)
    plan = generate_floorplan(
        derive_seed(cfg.seed, "field-plan"),
        (cfg.rect_count_min, cfg.rect_count_max),
        (cfg.side_min, cfg.side_max),
    )
    rng = stream(cfg.seed, "field-rollout")
    memory = EpisodicMemory(net, capacity=cfg.warmup_steps + rollout_steps + 1)
    greedy_curious_rollout(
        net, plan, rollout_steps, rng, cfg_mod.rollout_config(cfg), memory=memory
    )
    field_rows = novelty_field(
        net,
        memory,
        plan,
        grid=cfg.field_grid,
        n_proposals=cfg.n_proposals,
        proposal_seed=derive_seed(cfg.seed, "field-proposals"),
    )
    field_path = out / "novelty_field.csv"
    _write_csv(
        field_path,
        ["x", "y", "novelty", "ax", "ay"],
        [(_fmt(x), _fmt(y), _fmt(n), _fmt(ax), _fmt(ay)) for x, y, n, ax, ay in field_rows],
    )
    qrng = stream(cfg.seed, "field-question")
    q_state = sample_start(plan, qrng).position
    q_action = random_direction(qrng)
    sal_rows = question_saliency_map(
        net,
        plan,
        (q_state, q_action),
        grid=cfg.field_grid,
        actions_per_point=cfg.saliency_actions_per_point,
        proposal_seed=derive_seed(cfg.seed, "saliency-probes"),
    )
    sal_path = out / "saliency_map.csv"
    _write_csv(
        sal_path,
        ["x", "y", "ax", "ay", "weight"],
        [(_fmt(x), _fmt(y), _fmt(ax), _fmt(ay), _fmt(w)) for x, y, ax, ay, w in sal_rows],
    )
    return field_path, sal_path


def pipeline_gen_games(cfg: RunConfig, out_dir) -> Path:
    out = _prepare_out(cfg, out_dir)
    rng = stream(cfg.seed, "games")
    games = [
        random_game(int(rng.integers(1, 257)), cfg.game_length, rng)
        for _ in range(cfg.guesser_games)
    ]
    path = out / "games.csv"
    save_games(games, path)
    return path


def pipeline_train_guesser(cfg: RunConfig, out_dir, corpus_path, log=None) -> Path:
    out = _prepare_out(cfg, out_dir)
    games = load_games(corpus_path)
    net = GuesserNetwork.initialize(cfg_mod.guesser_arch(cfg), derive_seed(cfg.seed, "guesser-init"))
    history = train_guesser(
        games, net, cfg_mod.guesser_train_config(cfg), cfg.seed, log_every=1 if log else 0
    )
    ckpt_path = out / "guesser.ckpt"
    ckpt.save_checkpoint(ckpt_path, net.store)
    rows = [("train", i + 1, _fmt(loss)) for i, loss in enumerate(history.batch_loss)]
    rows += [("epoch", i + 1, _fmt(loss)) for i, loss in enumerate(history.epoch_loss)]
    _write_csv(out / "guesser_loss.csv", ["split", "batch", "loss"], rows)
    return ckpt_path


def _load_guesser(cfg: RunConfig, checkpoint_path) -> GuesserNetwork:
    net = GuesserNetwork.initialize(cfg_mod.guesser_arch(cfg), derive_seed(cfg.seed, "guesser-init"))
    ckpt.load_into_store(checkpoint_path, net.store)
    return net


def pipeline_eval_guesser(cfg: RunConfig, out_dir, checkpoint_path, log=None) -> tuple[Path, Path]:
    out = _prepare_out(cfg, out_dir)
    net = _load_guesser(cfg, checkpoint_path)
    curves = evaluate_success_curve(
        POLICIES,
        net,
        n_games=cfg.guesser_eval_games,
        root_seed=cfg.seed,
        max_moves=cfg.max_moves,
        saliency_aggregate=cfg.saliency_aggregate,
    )
    rows = []
    for policy in sorted(curves):
        rate, stderr = curves[policy]
        for move in range(rate.shape[0]):
            rows.append((policy, move + 1, _fmt(rate[move]), _fmt(stderr[move])))
    curve_path = out / "success_curve.csv"
    _write_csv(curve_path, ["policy", "move", "success_rate", "stderr"], rows)

    profile_path = out / "saliency_profile.csv"
    _write_saliency_profile(cfg, net, profile_path)
    if log:
        log(f"wrote {curve_path} and {profile_path}")
    return curve_path, profile_path


def _write_saliency_profile(cfg: RunConfig, net: GuesserNetwork, path, n_moves: int = 6) -> None:
    """Attention patterns of the three lookups after each move of one
    saliency-policy demonstration game."""
    rng = stream(cfg.seed, "saliency-demo")
    target = int(rng.integers(1, 257))
    record = play_policy(
        "saliency", net, target, rng, max_moves=n_moves, saliency_aggregate=cfg.saliency_aggregate
    )
    rows = []
    for move in range(1, len(record.guesses) + 1):
        entries = list(zip(record.guesses[:move], record.outcomes[:move]))
        profile = saliency_over_candidates(net, entries)
        for lookup in range(len(profile.lookup_weights)):
            weights = profile.candidate_weights(lookup)
            for candidate in range(1, weights.shape[0] + 1):
                rows.append((move, lookup, candidate, _fmt(weights[candidate - 1])))
    _write_csv(path, ["move", "lookup_index", "candidate", "weight"], rows)


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="novattn",
        description="attention-derived novelty search experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_default: str):
        p.add_argument("--config", type=Path, default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="root seed override")
        p.add_argument("--out", type=Path, default=Path(out_default), help="output directory")
        p.add_argument("--desk-scale", action="store_true", help="use the reduced experiment presets")

    p = sub.add_parser("gen-floorplans", help="emit floorplan CSVs")
    common(p, "runs/floorplans")
    p.add_argument("--count", type=int, default=10)

    p = sub.add_parser("gen-trajectories", help="random-action training corpus")
    common(p, "runs/corpus")

    p = sub.add_parser("train-explorer", help="train the collision-prediction network")
    common(p, "runs/explorer")
    p.add_argument("--corpus", type=Path, required=True, help="trajectories.csv from gen-trajectories")

    p = sub.add_parser("eval-exploration", help="coverage curves for random/untrained/trained policies")
    common(p, "runs/exploration")
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("render-fields", help="novelty field and question-saliency map CSVs")
    common(p, "runs/fields")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--rollout-steps", type=int, default=300)

    p = sub.add_parser("gen-games", help="random guessing-game corpus")
    common(p, "runs/games")

    p = sub.add_parser("train-guesser", help="train the guessing-game network")
    common(p, "runs/guesser")
    p.add_argument("--corpus", type=Path, required=True, help="games.csv from gen-games")

    p = sub.add_parser("eval-guesser", help="success curves for all guessing policies")
    common(p, "runs/guesser-eval")
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("plot", help="render a CSV artifact as SVG")
    common(p, "runs/plots")
    p.add_argument("--csv", type=Path, required=True)
    p.add_argument(
        "--kind",
        required=True,
        choices=[
            "exploration-curve",
            "success-curve",
            "novelty-field",
            "saliency-map",
            "saliency-profile",
            "loss-history",
        ],
    )

    p = sub.add_parser("selftest", help="gradient checks and oracle suites")
    common(p, "runs/selftest")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = cfg_mod.load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.desk_scale:
        overrides["desk_scale"] = True
    cfg = cfg_mod.apply_overrides(cfg, **overrides)
    return cfg_mod.resolve(cfg)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        log = lambda msg: print(msg, flush=True)  # noqa: E731
        if args.command == "gen-floorplans":
            pipeline_gen_floorplans(cfg, args.out, args.count)
        elif args.command == "gen-trajectories":
            pipeline_gen_trajectories(cfg, args.out, log=log)
        elif args.command == "train-explorer":
            pipeline_train_explorer(cfg, args.out, args.corpus, log=log)
        elif args.command == "eval-exploration":
            pipeline_eval_exploration(cfg, args.out, args.checkpoint, log=log)
        elif args.command == "render-fields":
            pipeline_render_fields(cfg, args.out, args.checkpoint, args.rollout_steps)
        elif args.command == "gen-games":
            pipeline_gen_games(cfg, args.out)
        elif args.command == "train-guesser":
            pipeline_train_guesser(cfg, args.out, args.corpus, log=log)
        elif args.command == "eval-guesser":
            pipeline_eval_guesser(cfg, args.out, args.checkpoint, log=log)
        elif args.command == "plot":
            from .plotting import emit_plot

            out = _prepare_out(cfg, args.out)
            emit_plot(args.csv, args.kind, out / (Path(args.csv).stem + ".svg"))
        elif args.command == "selftest":
            _prepare_out(cfg, args.out)
            from .selftest import run_selftest

            return run_selftest()
    except Exception as exc:  # runtime failure -> exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
