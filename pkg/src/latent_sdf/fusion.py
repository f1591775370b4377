"""Per-vertex latent codes pooled across views and poses.

Every template vertex is projected into each observation, features are read
bilinearly at the projection, and the K per-view features are merged by a
learned softmax-weighted sum followed by an integration MLP. Statistics and
the weighted sum are symmetric in the view axis, so the result does not
depend on view order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Graph, Node, evaluate
from .autodiff.primitives import PRIMITIVES
from .camera import FeatureMap, WeakPerspectiveCamera, project
from .errors import UsageError
from .nn import Params, declare, init_mlp, mlp

PREFIX = "fusion"


@dataclass
class FusionConfig:
    hidden: int = 64
    code_dim: int = 64


def init_params(config: FusionConfig, feature_dim: int, rng: np.random.Generator) -> Params:
    d_in = 3 * feature_dim
    h = config.hidden
    params: Params = {}
    params.update(init_mlp(rng, f"{PREFIX}.weight", [d_in, h, 1]))
    params.update(init_mlp(rng, f"{PREFIX}.feature", [d_in, h, h]))
    params.update(init_mlp(rng, f"{PREFIX}.integrate", [h, h, config.code_dim]))
    return params


def project_views(posed_vertices: np.ndarray, cameras: Sequence[WeakPerspectiveCamera]) -> np.ndarray:
    """Posed vertices [K,N,3] -> normalized image coordinates [K,N,2]."""
    posed_vertices = np.asarray(posed_vertices, dtype=np.float64)
    if posed_vertices.ndim != 3 or posed_vertices.shape[0] != len(cameras):
        raise UsageError(
            f"got {len(cameras)} cameras for posed vertices of shape {posed_vertices.shape}"
        )
    return np.stack([project(v, cam) for v, cam in zip(posed_vertices, cameras)])


def extract_pixel_aligned(
    feature_maps: Sequence[FeatureMap],
    posed_vertices: np.ndarray,
    cameras: Sequence[WeakPerspectiveCamera],
) -> np.ndarray:
    """Features [K,N,C] sampled at each posed vertex's projection in its own view."""
    if len(feature_maps) != len(cameras):
        raise UsageError(f"{len(feature_maps)} feature maps but {len(cameras)} cameras")
    uv = project_views(posed_vertices, cameras)
    maps = np.stack([f.data for f in feature_maps])
    out, _ = PRIMITIVES["bilinear"].forward({}, maps, uv)
    return out


def build_fuse(g: Graph, features: Node, nodes) -> tuple[Node, Node]:
    """``features`` [K,N,C] -> (codes [N,d], view weights [K,N])."""
    mu = g.mean(features, axis=0, keepdims=True)
    var = g.var(features, axis=0, keepdims=True)
    like = g.mul(features, 0.0)  # broadcast template of shape [K,N,C]
    stats = g.concat([features, like + mu, like + var], axis=-1)
    logits = mlp(g, stats, nodes, f"{PREFIX}.weight", 2)
    weights = g.softmax(logits, axis=0)
    transformed = mlp(g, stats, nodes, f"{PREFIX}.feature", 2)
    pooled = g.sum(weights * transformed, axis=0)
    codes = mlp(g, pooled, nodes, f"{PREFIX}.integrate", 2)
    return codes, g.sum(weights, axis=-1)


def fuse(per_vertex: np.ndarray, params: Params) -> tuple[np.ndarray, np.ndarray]:
    """Integrate per-view features [K,N,C] into codes [N,d]; also returns weights [K,N]."""
    per_vertex = np.asarray(per_vertex, dtype=np.float64)
    if per_vertex.ndim != 3 or per_vertex.shape[0] == 0:
        raise UsageError(f"fuse needs features [K>=1, N, C], got {per_vertex.shape}")
    g = Graph()
    feats = g.input("features", requires_grad=False)
    nodes = declare(g, params)
    codes, weights = build_fuse(g, feats, nodes)
    values = evaluate(g, {"features": per_vertex, **params})
    return values[codes], values[weights]
