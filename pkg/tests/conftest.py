"""Shared fixtures.

The desk-scale experiment fixtures train real networks and are expensive
(tens of minutes); they are session-scoped and only built when a test
that needs them runs, so `pytest -m "not slow"` stays fast.
"""

from __future__ import annotations

import dataclasses

import pytest

from novattn import cli
from novattn.config import RunConfig, resolve

ACCEPTANCE_SEED = 7


def desk_config(seed: int = ACCEPTANCE_SEED) -> RunConfig:
    return resolve(RunConfig(seed=seed, desk_scale=True))


@pytest.fixture(scope="session")
def exploration_run(tmp_path_factory):
    """Full desk-scale exploration pipeline: corpus, training, evaluation.

    Returns paths plus the parsed coverage curves.
    """
    cfg = desk_config()
    root = tmp_path_factory.mktemp("exploration-run")
    corpus = cli.pipeline_gen_trajectories(cfg, root / "corpus")
    ckpt = cli.pipeline_train_explorer(cfg, root / "train", corpus, log=print)
    curve = cli.pipeline_eval_exploration(cfg, root / "eval", ckpt, log=print)
    return {"cfg": cfg, "root": root, "corpus": corpus, "checkpoint": ckpt, "curve": curve}


@pytest.fixture(scope="session")
def guesser_run(tmp_path_factory):
    """Full desk-scale guessing pipeline: corpus, training, evaluation."""
    cfg = desk_config()
    root = tmp_path_factory.mktemp("guesser-run")
    corpus = cli.pipeline_gen_games(cfg, root / "corpus")
    ckpt = cli.pipeline_train_guesser(cfg, root / "train", corpus, log=print)
    curve, profile = cli.pipeline_eval_guesser(cfg, root / "eval", ckpt, log=print)
    return {
        "cfg": cfg,
        "root": root,
        "corpus": corpus,
        "checkpoint": ckpt,
        "curve": curve,
        "profile": profile,
    }


def read_curve(path, x_col: str, y_col: str, err_col: str | None = None):
    """Parse a grouped-curve CSV into {policy: (x, y[, err])} arrays."""
    import csv

    import numpy as np

    series: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            entry = series.setdefault(row["policy"], [])
            values = [float(row[x_col]), float(row[y_col])]
            if err_col:
                values.append(float(row[err_col]))
            entry.append(values)
    return {
        policy: tuple(np.asarray(cols) for cols in zip(*sorted(rows)))
        for policy, rows in series.items()
    }
