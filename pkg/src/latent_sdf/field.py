"""Implicit shape decoder: latent code plus coordinates -> signed distance.

The decoder sees ``concat(trilinear(V, x), x)``. Spatial gradients are
produced by pushing three tangent directions through the network alongside
the values, so the Eikonal term is an ordinary graph output and its
parameter gradient comes from a single reverse sweep.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Graph, Node, backward, evaluate
from .errors import FormatError, UsageError
from .nn import Params, declare, he_normal
from .volume import LatentVolume, build_query

PREFIX = "decoder"

CHECKPOINT_MAGIC = b"LSDFCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class DecoderConfig:
    hidden: list[int] = field(default_factory=lambda: [128, 128, 128, 128])
    beta: float = 100.0

    @property
    def depth(self) -> int:
        return len(self.hidden) + 1


def init_params(config: DecoderConfig, code_dim: int, rng: np.random.Generator) -> Params:
    sizes = [code_dim + 3] + list(config.hidden) + [1]
    params: Params = {}
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{PREFIX}.w{i}"] = he_normal(rng, (fi, fo), fi)
        params[f"{PREFIX}.b{i}"] = np.zeros(fo)
    return params


def fibonacci_directions(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * k / n)
    azimuth = np.pi * (1 + 5**0.5) * k
    return np.stack(
        [np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)], axis=-1
    )


def _hidden_features(params: Params, config: DecoderConfig, x: np.ndarray, code_dim: int) -> np.ndarray:
    h = np.concatenate([np.zeros((x.shape[0], code_dim)), x], axis=1)
    for i in range(len(config.hidden)):
        a = h @ params[f"{PREFIX}.w{i}"] + params[f"{PREFIX}.b{i}"]
        h = np.logaddexp(0.0, config.beta * a) / config.beta
    return h


def init_sphere(params: Params, config: DecoderConfig, radius: float = 1.0) -> Params:
    """Geometric initialization: decoder output ~ ``|x| - radius`` for zero codes.

    The first layer responds to ``u_i . x`` for directions ``u_i`` spread
    evenly over the sphere, so the summed ramp responses integrate to a
    multiple of ``|x|``; deeper layers start as identities and the output
    gain and offset are calibrated by least squares over ``[-2r, 2r]^3``.
    Code inputs start with zero weight.
    """
    if not radius > 0:
        raise UsageError(f"sphere radius must be positive, got {radius}")
    out = {k: v.copy() for k, v in params.items()}
    w0 = out[f"{PREFIX}.w0"]
    code_dim = w0.shape[0] - 3
    width0 = w0.shape[1]
    w0[:] = 0.0
    w0[code_dim:, :] = fibonacci_directions(width0).T
    out[f"{PREFIX}.b0"][:] = 0.0
    for i in range(1, len(config.hidden)):
        w = out[f"{PREFIX}.w{i}"]
        w[:] = np.eye(*w.shape)
        out[f"{PREFIX}.b{i}"][:] = 0.0

    axis = np.linspace(-2 * radius, 2 * radius, 21)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    feats = _hidden_features(out, config, pts, code_dim)
    design = np.stack([feats.sum(axis=1), np.ones(len(pts))], axis=1)
    target = np.linalg.norm(pts, axis=1) - radius
    (gain, offset), *_ = np.linalg.lstsq(design, target, rcond=None)
    last = len(config.hidden)
    out[f"{PREFIX}.w{last}"][:] = gain
    out[f"{PREFIX}.b{last}"][:] = offset
    return out


def _eye_tangents(g: Graph, points: Node) -> Node:
    zero = g.mul(points, 0.0)
    return g.stack([zero + np.eye(3)[j] for j in range(3)], axis=0)


def build_decoder(
    g: Graph,
    codes: Node,
    points: Node,
    nodes: Mapping[str, Node],
    config: DecoderConfig,
    code_tangents: list[Node] | None = None,
) -> tuple[Node, Node | None]:
    """Signed distance [P] and, when ``code_tangents`` is given, its x-gradient [P,3].

    ``code_tangents[j]`` is d(code)/d(x_j) at each point ([P,d]).
    """
    z = g.concat([codes, points], axis=-1)
    tangent = None
    if code_tangents is not None:
        tangent = g.concat([g.stack(code_tangents, axis=0), _eye_tangents(g, points)], axis=-1)
    n = len(config.hidden)
    for i in range(n):
        w, b = nodes[f"{PREFIX}.w{i}"], nodes[f"{PREFIX}.b{i}"]
        a = g.linear(z, w, b)
        z = g.softplus(a, config.beta)
        if tangent is not None:
            tangent = g.sigmoid(a, config.beta) * g.linear(tangent, w)
    w, b = nodes[f"{PREFIX}.w{n}"], nodes[f"{PREFIX}.b{n}"]
    sdf = g.sum(g.linear(z, w, b), axis=-1)
    grad = None
    if tangent is not None:
        grad = g.transpose(g.sum(g.linear(tangent, w), axis=-1), (1, 0))
    return sdf, grad


def build_field(
    g: Graph,
    grid: Node,
    points: Node,
    nodes: Mapping[str, Node],
    config: DecoderConfig,
    bounds,
    with_gradient: bool = True,
) -> tuple[Node, Node | None]:
    """Trilinear lookup followed by the decoder; optionally the spatial gradient."""
    codes = build_query(g, grid, points, bounds)
    tangents = None
    if with_gradient:
        tangents = [build_query(g, grid, points, bounds, deriv_axis=j) for j in range(3)]
    return build_decoder(g, codes, points, nodes, config, tangents)


class FieldEvaluator:
    """Reusable graphs for evaluating a fixed volume + decoder at many points."""

    def __init__(self, volume: LatentVolume, params: Params, config: DecoderConfig):
        self.volume = volume
        self.params = {k: v for k, v in params.items() if k.startswith(PREFIX + ".")}
        self.config = config
        self._graphs: dict[bool, tuple] = {}

    def _graph(self, with_gradient: bool):
        if with_gradient not in self._graphs:
            g = Graph()
            grid = g.input("grid", requires_grad=False)
            pts = g.input("points")
            nodes = declare(g, self.params)
            sdf, grad = build_field(g, grid, pts, nodes, self.config, self.volume.bounds, with_gradient)
            total = g.sum(sdf)
            self._graphs[with_gradient] = (g, pts, sdf, grad, total)
        return self._graphs[with_gradient]

    def _bind(self, pts):
        return {"grid": self.volume.grid, "points": pts, **self.params}

    def sdf(self, x, chunk: int = 65536) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, 3)
        g, _, sdf, _, _ = self._graph(False)
        out = np.empty(flat.shape[0])
        for s in range(0, flat.shape[0], chunk):
            out[s:s + chunk] = evaluate(g, self._bind(flat[s:s + chunk]))[sdf]
        return out.reshape(x.shape[:-1])

    def spatial_gradient(self, x) -> np.ndarray:
        """Reverse-mode gradient of the decoded distance with respect to x."""
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, 3)
        g, pts, _, _, total = self._graph(False)
        evaluate(g, self._bind(flat))
        return backward(g, total)[pts].reshape(x.shape)

    def forward_gradient(self, x) -> np.ndarray:
        """Gradient from the tangent-propagation path used during training."""
        x = np.asarray(x, dtype=np.float64)
        g, _, _, grad, _ = self._graph(True)
        return evaluate(g, self._bind(x.reshape(-1, 3)))[grad].reshape(x.shape)


def sdf(x, volume: LatentVolume, params: Params, config: DecoderConfig) -> np.ndarray:
    return FieldEvaluator(volume, params, config).sdf(x)


def sdf_spatial_gradient(x, volume: LatentVolume, params: Params, config: DecoderConfig) -> np.ndarray:
    return FieldEvaluator(volume, params, config).spatial_gradient(x)


# ------------------------------------------------------------- checkpoints
def save_checkpoint(params: Mapping[str, np.ndarray], path) -> None:
    """Versioned flat binary: header, then (name, shape, float64 data) per array."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Params:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos = 16
    params: Params = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(raw, "<f8", n, pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return params
