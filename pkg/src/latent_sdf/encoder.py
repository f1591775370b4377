"""Convolutional encoder turning normal maps into geometric feature maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node, evaluate
from .camera import FeatureMap
from .errors import UsageError
from .nn import Params, declare, he_normal

PREFIX = "encoder"


@dataclass
class EncoderConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32, 32])
    kernel: int = 3

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise UsageError("encoder kernel size must be odd")
        if not self.widths:
            raise UsageError("encoder needs at least one layer")

    @property
    def out_channels(self) -> int:
        return self.widths[-1]


def init_params(config: EncoderConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    c_in = 3
    for i, c_out in enumerate(config.widths):
        k = config.kernel
        params[f"{PREFIX}.w{i}"] = he_normal(rng, (c_out, c_in, k, k), c_in * k * k)
        params[f"{PREFIX}.b{i}"] = np.zeros(c_out)
        c_in = c_out
    return params


def build(g: Graph, images: Node, nodes, config: EncoderConfig) -> Node:
    """``images`` [K,3,H,W] -> features [K,d_enc,H,W]; relu between layers."""
    h = images
    n = len(config.widths)
    for i in range(n):
        h = g.conv2d(h, nodes[f"{PREFIX}.w{i}"], nodes[f"{PREFIX}.b{i}"])
        if i < n - 1:
            h = g.relu(h)
    return h


def encode(normal_map: FeatureMap, params: Params, config: EncoderConfig) -> FeatureMap:
    if normal_map.channels != 3:
        raise UsageError(f"encoder expects a 3-channel normal map, got {normal_map.channels}")
    g = Graph()
    images = g.input("images", requires_grad=False)
    nodes = declare(g, params)
    out = build(g, images, nodes, config)
    values = evaluate(g, {"images": normal_map.data[None], **params})
    return FeatureMap(values[out][0])
