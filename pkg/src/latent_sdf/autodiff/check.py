"""Central-difference validation of reverse-mode gradients."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import UsageError
from .graph import Graph, Node, backward, evaluate


def finite_difference_check(
    graph: Graph,
    output: Node,
    input: Node,
    bindings: Mapping,
    epsilon: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max elementwise relative error between backward and central differences.

    ``output`` must be scalar. With ``max_entries`` only a random subset of
    the input's coordinates is perturbed. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 0 < epsilon <= 1e-2:
        raise UsageError("epsilon must lie in (0, 1e-2]")
    bindings = dict(bindings)
    key = next((k for k in bindings if k is input or k == input.name), None)
    if key is None:
        raise UsageError(f"{input.describe()} is not bound")
    base = np.array(bindings[key], dtype=np.float64)
    bindings[key] = base

    values = evaluate(graph, bindings)
    if np.size(values[output]) != 1:
        raise UsageError("finite_difference_check needs a scalar output")
    analytic = backward(graph, output)[input]

    flat_count = base.size
    if max_entries is not None and max_entries < flat_count:
        entries = np.random.default_rng(seed).choice(flat_count, size=max_entries, replace=False)
    else:
        entries = np.arange(flat_count)

    worst = 0.0
    for e in entries:
        idx = np.unravel_index(e, base.shape)
        orig = base[idx]
        base[idx] = orig + epsilon
        plus = float(evaluate(graph, bindings)[output])
        base[idx] = orig - epsilon
        minus = float(evaluate(graph, bindings)[output])
        base[idx] = orig
        numeric = (plus - minus) / (2 * epsilon)
        a = float(analytic[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    # leave the graph holding values for the unperturbed bindings
    evaluate(graph, bindings)
    return worst
