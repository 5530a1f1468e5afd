"""Run configuration: every experiment hyperparameter as a named key.

Defaults are the full-scale experiment settings; ``desk_scale`` swaps in
the reduced presets (fewer trajectories/batches/games/epochs, shorter
rollouts) used by the acceptance suite. Config files are flat
``key=value`` lines with ``#`` comments; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .explorer import ExplorerArch, RolloutConfig, TrainConfig
from .guessing import GuesserArch, GuesserTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    desk_scale: bool = False

    # floorplan generation and agent motion
    rect_count_min: int = 3
    rect_count_max: int = 8
    side_min: float = 0.2
    side_max: float = 0.7
    step_length: float = 0.05
    coverage_grid: int = 16

    # explorer network
    explorer_hidden: int = 256
    explorer_layers: int = 4
    key_dim: int = 24
    value_dim: int = 128
    knn_alpha: float = 20.0

    # explorer training
    explorer_trajectories: int = 1000
    trajectory_steps: int = 1000
    memory_window: int = 300
    query_window: int = 100
    episodes_per_batch: int = 50
    explorer_batches: int = 15000
    explorer_lr: float = 4e-4
    lr_decay: float = 0.9
    lr_patience: int = 10
    lr_floor: float = 1e-6
    eval_every: int = 100
    holdout_fraction: float = 0.05
    holdout_episodes: int = 20

    # curious rollouts and exploration evaluation
    warmup_steps: int = 50
    n_proposals: int = 50
    eval_plans: int = 15
    eval_steps: int = 5000
    field_grid: int = 32
    saliency_actions_per_point: int = 8

    # guessing game
    guesser_hidden: int = 128
    guesser_embed_dim: int = 8
    guesser_games: int = 200000
    game_length: int = 30
    guesser_epochs: int = 150
    guesser_batch: int = 64
    guesser_lr: float = 1e-4
    guesser_eval_games: int = 2000
    max_moves: int = 20
    saliency_aggregate: str = "third"


DESK_PRESETS = {
    "explorer_trajectories": 100,
    "explorer_batches": 1500,
    "eval_steps": 2500,
    "guesser_games": 20000,
    "guesser_epochs": 30,
}


def resolve(cfg: RunConfig) -> RunConfig:
    """Apply the desk-scale presets, returning a fully resolved copy."""
    if not cfg.desk_scale:
        return dataclasses.replace(cfg)
    return dataclasses.replace(cfg, **DESK_PRESETS)


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean {key}={raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def load_config(path) -> RunConfig:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    clean = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        clean[key] = value
    return dataclasses.replace(cfg, **clean)


def echo_config(cfg: RunConfig, path) -> None:
    """Write the fully resolved configuration, defaults included."""
    with open(path, "w") as fh:
        for name in sorted(_FIELDS):
            value = getattr(cfg, name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{name}={value}\n")


# -- adapters into the module-level config dataclasses ----------------------


def explorer_arch(cfg: RunConfig) -> ExplorerArch:
    return ExplorerArch(
        hidden=cfg.explorer_hidden,
        n_hidden=cfg.explorer_layers,
        key_dim=cfg.key_dim,
        value_dim=cfg.value_dim,
        alpha=cfg.knn_alpha,
    )


def explorer_train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        n_batches=cfg.explorer_batches,
        episodes_per_batch=cfg.episodes_per_batch,
        memory_window=cfg.memory_window,
        query_window=cfg.query_window,
        learning_rate=cfg.explorer_lr,
        lr_decay=cfg.lr_decay,
        lr_patience=cfg.lr_patience,
        lr_floor=cfg.lr_floor,
        eval_every=cfg.eval_every,
        holdout_fraction=cfg.holdout_fraction,
        eval_episodes=cfg.holdout_episodes,
    )


def rollout_config(cfg: RunConfig) -> RolloutConfig:
    return RolloutConfig(
        step_length=cfg.step_length,
        warmup_steps=cfg.warmup_steps,
        n_proposals=cfg.n_proposals,
    )


def guesser_arch(cfg: RunConfig) -> GuesserArch:
    return GuesserArch(hidden=cfg.guesser_hidden, embed_dim=cfg.guesser_embed_dim)


def guesser_train_config(cfg: RunConfig) -> GuesserTrainConfig:
    return GuesserTrainConfig(
        epochs=cfg.guesser_epochs,
        batch_size=cfg.guesser_batch,
        learning_rate=cfg.guesser_lr,
        game_length=cfg.game_length,
    )
