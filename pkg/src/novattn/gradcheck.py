"""Central finite-difference verification of analytic gradients.

The checker treats a model as a builder function: given a ParameterStore it
must construct a fresh graph ending in a scalar output. Analytic gradients
come from one backpropagation; each checked parameter entry is then
perturbed by +/-h and the graph rebuilt, so the finite-difference side
never reuses the code path under test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Graph, GraphError, ParameterStore, backpropagate, evaluate_graph

GraphBuilder = Callable[[ParameterStore], Graph]


class GradientCheckError(RuntimeError):
    pass


@dataclass
class GradientReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def summary(self) -> str:
        lines = [
            f"  {name}: max rel err {err:.3e} {'ok' if err < self.tolerance else 'FAIL'}"
            for name, err in sorted(self.max_rel_error.items())
        ]
        verdict = "PASS" if self.passed else "FAIL"
        return "\n".join(lines + [f"gradient check {verdict} (worst {self.worst:.3e} vs tol {self.tolerance:.1e})"])


def _validate_finite(graph: Graph) -> None:
    # Graphs compute eagerly at build time, so scan after the fact and
    # name the offending node in the diagnostic.
    for node in graph.nodes:
        if not np.isfinite(node.value).all():
            raise GradientCheckError(f"non-finite values encountered at {node!r}")


def _scalar_output(builder: GraphBuilder, store: ParameterStore) -> float:
    graph = builder(store)
    _validate_finite(graph)
    try:
        value = evaluate_graph(graph)
    except GraphError as exc:
        raise GradientCheckError(str(exc)) from exc
    if value.shape != (1, 1):
        raise GradientCheckError(f"gradient check requires a scalar (1x1) output, got {value.shape}")
    return float(value[0, 0])


def gradient_check(
    builder: GraphBuilder,
    store: ParameterStore,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradientReport:
    """Compare analytic parameter gradients against central differences.

    ``max_entries_per_param`` caps the number of perturbed entries per
    tensor (seeded subsample) to keep large checks affordable; None checks
    every entry.
    """
    graph = builder(store)
    _validate_finite(graph)
    value = evaluate_graph(graph)
    if value.shape != (1, 1):
        raise GradientCheckError(f"gradient check requires a scalar (1x1) output, got {value.shape}")
    analytic = backpropagate(graph, np.ones((1, 1)))

    if rng is None:
        rng = np.random.default_rng(0)
    report: dict[str, float] = {}
    for name in store.names():
        entry = store.entries[name]
        flat = entry.value.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            indices = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        worst = 0.0
        grad_flat = analytic[name].reshape(-1)
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + h
            f_plus = _scalar_output(builder, store)
            flat[idx] = original - h
            f_minus = _scalar_output(builder, store)
            flat[idx] = original
            fd = (f_plus - f_minus) / (2.0 * h)
            a = grad_flat[idx]
            rel = abs(fd - a) / max(abs(fd), abs(a), 1e-6)
            worst = max(worst, rel)
        report[name] = worst
    return GradientReport(report, tolerance)
