"""2-D floorplan worlds: connected unions of axis-aligned rectangles, a
point agent that travels a fixed distance per step and reverses on wall
contact, plus grid-coverage metrics.

Movement semantics: the agent travels along its direction until it hits
the boundary of the rectangle union, turns around 180 degrees (not a
specular bounce), and keeps going with whatever travel budget is left,
up to ``MAX_REVERSALS`` turnarounds in one step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_REVERSALS = 8
COVERAGE_GRID = 16
_MERGE_TOL = 1e-9

# Default generation parameters (configurable through RunConfig).
RECT_COUNT_RANGE = (3, 8)
SIDE_RANGE = (0.2, 0.7)
_GENERATION_RETRIES = 100


@dataclass(frozen=True)
class Floorplan:
    """Union of axis-aligned rectangles, each (x0, y0, x1, y1) in [0,1]^2."""

    rectangles: np.ndarray

    def __post_init__(self):
        rects = np.asarray(self.rectangles, dtype=np.float64).reshape(-1, 4)
        if rects.shape[0] < 1:
            raise ValueError("a floorplan needs at least one rectangle")
        if (rects[:, 0] >= rects[:, 2]).any() or (rects[:, 1] >= rects[:, 3]).any():
            raise ValueError("degenerate rectangle (min corner must be below max corner)")
        if (rects < -1e-12).any() or (rects > 1 + 1e-12).any():
            raise ValueError("rectangles must lie inside the unit square")
        object.__setattr__(self, "rectangles", rects)

    def contains(self, point) -> bool:
        x, y = point
        r = self.rectangles
        return bool(((r[:, 0] <= x) & (x <= r[:, 2]) & (r[:, 1] <= y) & (y <= r[:, 3])).any())


@dataclass(frozen=True)
class AgentState:
    position: tuple[float, float]


@dataclass(frozen=True)
class Transition:
    """One (state, action, outcome) memory record."""

    state: tuple[float, float]
    action: tuple[float, float]
    collided: bool

    def __post_init__(self):
        ax, ay = self.action
        if abs(np.hypot(ax, ay) - 1.0) > 1e-9:
            raise ValueError(f"action must be a unit vector, got {self.action}")


def _rects_overlap(a, b) -> bool:
    # Positive-area intersection; edge contact does not connect rooms.
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _connected(rects: np.ndarray) -> bool:
    n = rects.shape[0]
    seen = {0}
    frontier = [0]
    while frontier:
        i = frontier.pop()
        for j in range(n):
            if j not in seen and _rects_overlap(rects[i], rects[j]):
                seen.add(j)
                frontier.append(j)
    return len(seen) == n


def _sample_rect(rng: np.random.Generator, side_range) -> np.ndarray:
    w = rng.uniform(*side_range)
    h = rng.uniform(*side_range)
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return np.array([x0, y0, x0 + w, y0 + h])


def generate_floorplan(
    seed: int,
    rect_count_range: tuple[int, int] = RECT_COUNT_RANGE,
    side_range: tuple[float, float] = SIDE_RANGE,
) -> Floorplan:
    """Deterministic connected floorplan with 3..8 overlapping rectangles.

    Independent resampling with bounded retries; if no connected union
    shows up (practically never), rectangles are chained one against the
    previous so connectivity holds by construction.
    """
    rng = np.random.default_rng(seed)
    for _ in range(_GENERATION_RETRIES):
        n = int(rng.integers(rect_count_range[0], rect_count_range[1] + 1))
        rects = np.stack([_sample_rect(rng, side_range) for _ in range(n)])
        if _connected(rects):
            return Floorplan(rects)
    n = int(rng.integers(rect_count_range[0], rect_count_range[1] + 1))
    chained = [_sample_rect(rng, side_range)]
    for _ in range(n - 1):
        prev = chained[-1]
        w = rng.uniform(*side_range)
        h = rng.uniform(*side_range)
        margin = 0.05
        x0 = rng.uniform(max(0.0, prev[0] - w + margin), min(1.0 - w, prev[2] - margin))
        y0 = rng.uniform(max(0.0, prev[1] - h + margin), min(1.0 - h, prev[3] - margin))
        chained.append(np.array([x0, y0, x0 + w, y0 + h]))
    return Floorplan(np.stack(chained))


def sample_start(plan: Floorplan, rng: np.random.Generator) -> AgentState:
    """Uniform over the movable region, by rejection from the unit square."""
    while True:
        p = rng.uniform(0.0, 1.0, size=2)
        if plan.contains(p):
            return AgentState((float(p[0]), float(p[1])))


def _ray_rect_interval(px, py, dx, dy, rect) -> tuple[float, float] | None:
    """Parameter range [t0, t1] along p + t*d inside one rectangle."""
    t0, t1 = -np.inf, np.inf
    for p, d, lo, hi in ((px, dx, rect[0], rect[2]), (py, dy, rect[1], rect[3])):
        if abs(d) < 1e-300:
            if not (lo <= p <= hi):
                return None
        else:
            a = (lo - p) / d
            b = (hi - p) / d
            if a > b:
                a, b = b, a
            t0 = max(t0, a)
            t1 = min(t1, b)
    if t1 < t0:
        return None
    return t0, t1


def union_exit_distance(plan: Floorplan, position, direction) -> float:
    """Distance traveled along ``direction`` before leaving the union.

    Merges the per-rectangle inside-intervals along the ray, starting from
    the interval containing t=0; a small tolerance swallows the float
    round-off of standing exactly on a wall.
    """
    px, py = position
    dx, dy = direction
    intervals = []
    for rect in plan.rectangles:
        hit = _ray_rect_interval(px, py, dx, dy, rect)
        if hit is not None and hit[1] > -_MERGE_TOL:
            intervals.append(hit)
    if not intervals:
        return 0.0
    intervals.sort()
    reach = 0.0
    for t0, t1 in intervals:
        if t0 <= reach + _MERGE_TOL:
            reach = max(reach, t1)
        else:
            break
    return max(reach, 0.0)


def _check_unit(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.hypot(d[0], d[1]) - 1.0) > 1e-9:
        raise ValueError(f"direction must be a unit vector, got {direction}")
    return d


def step_agent_detailed(
    plan: Floorplan, state: AgentState, direction, step_length: float
) -> tuple[AgentState, bool, float, int]:
    """Move a fixed path length, reversing 180 degrees at every wall.

    Returns (state, collided, traversed path length, reversals). The
    traversed length equals ``step_length`` exactly unless the reversal
    cap triggers, in which case the agent stops at the wall it cannot
    reverse away from.
    """
    if step_length <= 0:
        raise ValueError("step_length must be positive")
    d = _check_unit(direction)
    pos = np.asarray(state.position, dtype=np.float64)
    if not plan.contains(pos):
        raise ValueError(f"start position {state.position} is outside the movable region")
    remaining = float(step_length)
    traversed = 0.0
    collided = False
    reversals = 0
    while remaining > 0.0:
        reach = union_exit_distance(plan, pos, d)
        if reach >= remaining:
            pos = pos + remaining * d
            traversed += remaining
            remaining = 0.0
        else:
            pos = pos + reach * d
            traversed += reach
            remaining -= reach
            collided = True
            if reversals >= MAX_REVERSALS:
                break
            reversals += 1
            d = -d
    return AgentState((float(pos[0]), float(pos[1]))), collided, traversed, reversals


def step_agent(
    plan: Floorplan, state: AgentState, direction, step_length: float
) -> tuple[AgentState, bool]:
    new_state, collided, _, _ = step_agent_detailed(plan, state, direction, step_length)
    return new_state, collided


def fine_timestep_step(
    plan: Floorplan, state: AgentState, direction, step_length: float, dt: float = 1e-5
) -> tuple[AgentState, bool]:
    """Independent reference stepper: micro-steps of ``dt`` with bisection
    refinement of each boundary crossing. Uses only the point-in-union
    test, no ray geometry."""
    d = _check_unit(direction)
    pos = np.asarray(state.position, dtype=np.float64)
    if not plan.contains(pos):
        raise ValueError(f"start position {state.position} is outside the movable region")
    remaining = float(step_length)
    collided = False
    reversals = 0
    while remaining > 0.0:
        h = min(dt, remaining)
        trial = pos + h * d
        if plan.contains(trial):
            pos = trial
            remaining -= h
            continue
        lo, hi = 0.0, h
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if plan.contains(pos + mid * d):
                lo = mid
            else:
                hi = mid
        pos = pos + lo * d
        remaining -= lo
        collided = True
        if reversals >= MAX_REVERSALS:
            break
        reversals += 1
        d = -d
    return AgentState((float(pos[0]), float(pos[1]))), collided


def random_direction(rng: np.random.Generator) -> tuple[float, float]:
    theta = rng.uniform(0.0, 2.0 * np.pi)
    return (float(np.cos(theta)), float(np.sin(theta)))


def rollout_random(
    plan: Floorplan,
    start: AgentState,
    n_steps: int,
    rng: np.random.Generator,
    step_length: float = 0.05,
) -> tuple[list[Transition], list[tuple[float, float]]]:
    """Uniform random walk; returns transitions and the n+1 visited positions."""
    state = start
    transitions = []
    positions = [start.position]
    for _ in range(n_steps):
        action = random_direction(rng)
        new_state, hit = step_agent(plan, state, action, step_length)
        transitions.append(Transition(state.position, action, hit))
        positions.append(new_state.position)
        state = new_state
    return transitions, positions


def random_trajectory(
    plan: Floorplan,
    start: AgentState,
    n_steps: int,
    seed: int,
    step_length: float = 0.05,
) -> list[Transition]:
    """Uniform random unit-direction walk; deterministic in ``seed``."""
    transitions, _ = rollout_random(plan, start, n_steps, np.random.default_rng(seed), step_length)
    return transitions


def grid_cell(position, grid: int = COVERAGE_GRID) -> tuple[int, int]:
    x, y = position
    return (min(int(x * grid), grid - 1), min(int(y * grid), grid - 1))


def grid_coverage(positions, grid: int = COVERAGE_GRID) -> int:
    """Number of distinct grid cells containing at least one position."""
    return len({grid_cell(p, grid) for p in positions})


def coverage_curve(positions, grid: int = COVERAGE_GRID) -> np.ndarray:
    """Distinct-cell count after each prefix of the position sequence."""
    seen: set[tuple[int, int]] = set()
    counts = np.empty(len(positions), dtype=np.int64)
    for i, p in enumerate(positions):
        seen.add(grid_cell(p, grid))
        counts[i] = len(seen)
    return counts


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------


def save_floorplan(plan: Floorplan, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x0", "y0", "x1", "y1"])
        for rect in plan.rectangles:
            writer.writerow([repr(float(v)) for v in rect])


def load_floorplan(path) -> Floorplan:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["x0", "y0", "x1", "y1"]:
            raise ValueError(f"unexpected floorplan header {header} in {path}")
        rects = [[float(v) for v in row] for row in reader if row]
    return Floorplan(np.asarray(rects))


def save_trajectories(trajectories: dict[int, list[Transition]], path) -> None:
    """One row per step: seed, step, x, y, ax, ay, collided."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "step", "x", "y", "ax", "ay", "collided"])
        for seed in sorted(trajectories):
            for step, t in enumerate(trajectories[seed]):
                writer.writerow(
                    [seed, step, repr(t.state[0]), repr(t.state[1]), repr(t.action[0]), repr(t.action[1]), int(t.collided)]
                )


def load_trajectories(path) -> dict[int, list[Transition]]:
    trajectories: dict[int, list[Transition]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["seed", "step", "x", "y", "ax", "ay", "collided"]:
            raise ValueError(f"unexpected trajectory header {header} in {path}")
        for row in reader:
            if not row:
                continue
            seed = int(row[0])
            t = Transition((float(row[2]), float(row[3])), (float(row[4]), float(row[5])), bool(int(row[6])))
            trajectories.setdefault(seed, []).append(t)
    return trajectories
