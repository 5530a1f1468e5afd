"""Figure emission from the experiment CSVs as standalone SVG files.

Output is deterministic: a fixed hash salt and no embedded timestamps, so
identical CSVs render byte-identical SVGs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "novattn"

import matplotlib.pyplot as plt
import numpy as np

PLOT_KINDS = (
    "exploration-curve",
    "success-curve",
    "novelty-field",
    "saliency-map",
    "saliency-profile",
    "loss-history",
)

_REQUIRED_COLUMNS = {
    "exploration-curve": ["policy", "step", "mean_cells", "stderr"],
    "success-curve": ["policy", "move", "success_rate", "stderr"],
    "novelty-field": ["x", "y", "novelty", "ax", "ay"],
    "saliency-map": ["x", "y", "ax", "ay", "weight"],
    "saliency-profile": ["move", "lookup_index", "candidate", "weight"],
    "loss-history": ["split", "batch", "loss"],
}


class PlotSchemaError(ValueError):
    pass


def _load_columns(csv_path, kind: str) -> dict[str, list[str]]:
    required = _REQUIRED_COLUMNS[kind]
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for column in required:
            if column not in header:
                raise PlotSchemaError(f"{csv_path}: missing required column {column!r} for {kind}")
        rows = list(reader)
    return {column: [row[column] for row in rows] for column in header}


def _save(fig, out_path) -> None:
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_plot(csv_path, kind: str, out_path) -> Path:
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    data = _load_columns(csv_path, kind)
    out_path = Path(out_path)
    if kind == "exploration-curve":
        _plot_grouped_curves(data, "step", "mean_cells", "stderr", "step", "grid cells visited", out_path)
    elif kind == "success-curve":
        _plot_grouped_curves(data, "move", "success_rate", "stderr", "move", "cumulative success rate", out_path)
    elif kind == "novelty-field":
        _plot_novelty_field(data, out_path)
    elif kind == "saliency-map":
        _plot_saliency_map(data, out_path)
    elif kind == "saliency-profile":
        _plot_saliency_profile(data, out_path)
    elif kind == "loss-history":
        _plot_grouped_curves(
            {"policy": data["split"], **data}, "batch", "loss", None, "batch", "loss", out_path, logy=True
        )
    return out_path


def _plot_grouped_curves(data, x_col, y_col, err_col, x_label, y_label, out_path, logy=False):
    fig, ax = plt.subplots(figsize=(6, 4))
    groups = sorted(set(data["policy"]))
    for group in groups:
        pick = [i for i, p in enumerate(data["policy"]) if p == group]
        x = np.array([float(data[x_col][i]) for i in pick])
        y = np.array([float(data[y_col][i]) for i in pick])
        order = np.argsort(x)
        ax.plot(x[order], y[order], label=group)
        if err_col is not None:
            err = np.array([float(data[err_col][i]) for i in pick])[order]
            ax.fill_between(x[order], y[order] - err, y[order] + err, alpha=0.25)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    ax.legend()
    fig.tight_layout()
    _save(fig, out_path)


def _plot_novelty_field(data, out_path):
    x = np.array([float(v) for v in data["x"]])
    y = np.array([float(v) for v in data["y"]])
    nov = np.array([float(v) for v in data["novelty"]])
    ax_ = np.array([float(v) for v in data["ax"]])
    ay_ = np.array([float(v) for v in data["ay"]])
    fig, ax = plt.subplots(figsize=(6, 6))
    sc = ax.scatter(x, y, c=nov, s=36, marker="s", cmap="viridis")
    ax.quiver(x, y, ax_, ay_, color="white", scale=40, width=2.5e-3)
    fig.colorbar(sc, ax=ax, label="max proposal novelty")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")
    fig.tight_layout()
    _save(fig, out_path)


def _plot_saliency_map(data, out_path):
    x = np.array([float(v) for v in data["x"]])
    y = np.array([float(v) for v in data["y"]])
    w = np.array([float(v) for v in data["weight"]])
    # aggregate probe actions per position
    agg: dict[tuple[float, float], float] = {}
    for xi, yi, wi in zip(x, y, w):
        agg[(xi, yi)] = agg.get((xi, yi), 0.0) + wi
    points = sorted(agg)
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    ws = np.array([agg[p] for p in points])
    fig, ax = plt.subplots(figsize=(6, 6))
    sc = ax.scatter(xs, ys, c=ws, s=36, marker="s", cmap="magma")
    fig.colorbar(sc, ax=ax, label="attention mass")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")
    fig.tight_layout()
    _save(fig, out_path)


def _plot_saliency_profile(data, out_path):
    moves = sorted({int(v) for v in data["move"]})
    fig, axes = plt.subplots(len(moves), 1, figsize=(6, 2.2 * len(moves)), squeeze=False)
    for row, move in enumerate(moves):
        ax = axes[row][0]
        for lookup in sorted({int(v) for v in data["lookup_index"]}):
            pick = [
                i
                for i in range(len(data["move"]))
                if int(data["move"][i]) == move and int(data["lookup_index"][i]) == lookup
            ]
            cand = np.array([int(data["candidate"][i]) for i in pick])
            weight = np.array([float(data["weight"][i]) for i in pick])
            order = np.argsort(cand)
            ax.plot(cand[order], weight[order], label=f"lookup {lookup + 1}")
        ax.set_ylabel(f"after move {move}")
        if row == 0:
            ax.legend(loc="upper right", fontsize=8)
    axes[-1][0].set_xlabel("candidate guess")
    fig.tight_layout()
    _save(fig, out_path)
