"""Small helpers for parameter dictionaries and MLP graph construction."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Graph, Node

Params = dict[str, np.ndarray]


def declare(g: Graph, params: Mapping[str, np.ndarray]) -> dict[str, Node]:
    """One differentiable graph input per parameter array, named by its key."""
    return {name: g.input(name) for name in params}


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_mlp(rng: np.random.Generator, prefix: str, sizes) -> Params:
    params: Params = {}
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.w{i}"] = he_normal(rng, (fi, fo), fi)
        params[f"{prefix}.b{i}"] = np.zeros(fo)
    return params


def mlp(g: Graph, x: Node, nodes: Mapping[str, Node], prefix: str, depth: int) -> Node:
    """Linear layers with relu between them (none after the last)."""
    h = x
    for i in range(depth):
        h = g.linear(h, nodes[f"{prefix}.w{i}"], nodes[f"{prefix}.b{i}"])
        if i < depth - 1:
            h = g.relu(h)
    return h


def subset(params: Mapping[str, np.ndarray], prefix: str) -> Params:
    return {k: v for k, v in params.items() if k.startswith(prefix + ".")}
