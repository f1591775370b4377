"""Latent feature volume anchored on the canonical template.

Codes are averaged into the grid node nearest to each canonical vertex, then
spread into neighbouring space by masked 3D convolutions whose active set
dilates by one voxel per layer. Queries interpolate trilinearly between grid
nodes; node ``i`` along an axis sits at ``lo + (hi - lo) * i / (H - 1)``.

Binary dump layout (little-endian): ``int64 H, int64 d, float64 lo[3],
float64 hi[3]`` followed by ``d * H**3`` float64 values of the grid
``[d, H, H, H]`` in C order (channel-major, then x, y, z).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from .autodiff import Graph, Node, evaluate
from .autodiff.primitives import PRIMITIVES
from .errors import FormatError, UsageError
from .nn import Params, declare

PREFIX = "diffuse"
_HEADER = struct.Struct("<qq6d")


@dataclass(frozen=True)
class VolumeBounds:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    resolution: int = 32

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3 or not all(a < b for a, b in zip(lo, hi)):
            raise UsageError(f"invalid bounds lo={self.lo} hi={self.hi}")
        if int(self.resolution) < 8:
            raise UsageError(f"volume resolution must be >= 8, got {self.resolution}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "resolution", int(self.resolution))

    @classmethod
    def around(cls, points, resolution: int = 32, margin: float = 0.1, cube: bool = True) -> "VolumeBounds":
        """Box around ``points`` padded by ``margin`` times the extent on each side."""
        points = np.asarray(points, dtype=np.float64)
        lo, hi = points.min(axis=0), points.max(axis=0)
        if cube:
            center = (lo + hi) / 2
            half = np.max(hi - lo) / 2
            lo, hi = center - half, center + half
        pad = margin * (hi - lo)
        return cls(tuple(lo - pad), tuple(hi + pad), resolution)

    @property
    def lo_array(self) -> np.ndarray:
        return np.array(self.lo)

    @property
    def hi_array(self) -> np.ndarray:
        return np.array(self.hi)

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi_array - self.lo_array) / (self.resolution - 1)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.resolution,) * 3

    def contains(self, points) -> np.ndarray:
        points = np.asarray(points)
        return np.all((points >= self.lo_array) & (points <= self.hi_array), axis=-1)

    def node_index(self, points) -> np.ndarray:
        """Integer grid index [N,3] of the node nearest to each point."""
        rel = (np.asarray(points) - self.lo_array) / self.spacing
        return np.clip(np.rint(rel), 0, self.resolution - 1).astype(np.int64)

    def flat_index(self, points) -> np.ndarray:
        ijk = self.node_index(points)
        h = self.resolution
        return (ijk[:, 0] * h + ijk[:, 1]) * h + ijk[:, 2]

    def node_positions(self) -> np.ndarray:
        axes = [np.linspace(a, b, self.resolution) for a, b in zip(self.lo, self.hi)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def margin_ok(self, points, margin: float = 0.05) -> bool:
        points = np.asarray(points)
        extent = points.max(axis=0) - points.min(axis=0)
        pad = margin * np.maximum(extent, 1e-12)
        return bool(
            np.all(points.min(axis=0) - pad >= self.lo_array)
            and np.all(points.max(axis=0) + pad <= self.hi_array)
        )

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "resolution": self.resolution}

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeBounds":
        return cls(tuple(d["lo"]), tuple(d["hi"]), d["resolution"])


@dataclass
class LatentVolume:
    bounds: VolumeBounds
    grid: np.ndarray  # [d, H, H, H]
    active: np.ndarray = field(default=None)  # [H, H, H] bool

    def __post_init__(self):
        if self.active is None:
            self.active = np.any(self.grid != 0, axis=0)

    @property
    def channels(self) -> int:
        return self.grid.shape[0]


def occupancy(canonical_vertices, bounds: VolumeBounds) -> np.ndarray:
    mask = np.zeros(bounds.shape, dtype=bool)
    mask.reshape(-1)[bounds.flat_index(canonical_vertices)] = True
    return mask


def dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    if steps <= 0:
        return mask.copy()
    return binary_dilation(mask, structure=np.ones((3, 3, 3), bool), iterations=steps)


def layer_masks(canonical_vertices, bounds: VolumeBounds, layers: int) -> list[np.ndarray]:
    """Active mask after each diffusion layer (index 0 is the scatter mask)."""
    base = occupancy(canonical_vertices, bounds)
    return [dilate(base, i) for i in range(layers + 1)]


def check_inside(canonical_vertices, bounds: VolumeBounds) -> None:
    inside = bounds.contains(canonical_vertices)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside)[0])
        raise UsageError(f"vertex {bad} at {np.asarray(canonical_vertices)[bad]} lies outside the volume bounds")


def init_params(channels: int, layers: int, rng: np.random.Generator) -> Params:
    params: Params = {}
    for i in range(layers):
        params[f"{PREFIX}.w{i}"] = rng.normal(0.0, np.sqrt(2.0 / (27 * channels)), size=(channels, channels, 3, 3, 3))
        params[f"{PREFIX}.b{i}"] = np.zeros(channels)
    return params


def build_scatter(g: Graph, codes: Node, canonical_vertices, bounds: VolumeBounds) -> Node:
    check_inside(canonical_vertices, bounds)
    return g.scatter_mean(codes, bounds.flat_index(canonical_vertices), bounds.shape)


def build_diffuse(g: Graph, volume: Node, nodes, masks: list[np.ndarray]) -> Node:
    """Masked conv stack; ``masks[i + 1]`` is the output support of layer ``i``."""
    h = volume
    layers = len(masks) - 1
    for i in range(layers):
        h = g.masked_conv3d(h, nodes[f"{PREFIX}.w{i}"], nodes[f"{PREFIX}.b{i}"], masks[i + 1])
        if i < layers - 1:
            h = g.relu(h)
    return h


def build_query(g: Graph, grid: Node, points: Node, bounds: VolumeBounds, deriv_axis=None) -> Node:
    return g.trilinear(grid, points, bounds.lo, bounds.hi, deriv_axis=deriv_axis)


def scatter(codes, canonical_vertices, bounds: VolumeBounds) -> LatentVolume:
    codes = np.asarray(codes, dtype=np.float64)
    check_inside(canonical_vertices, bounds)
    out, _ = PRIMITIVES["scatter_mean"].forward(
        {"voxel_index": bounds.flat_index(canonical_vertices), "grid_shape": bounds.shape}, codes
    )
    return LatentVolume(bounds, out, occupancy(canonical_vertices, bounds))


def diffuse(volume: LatentVolume, params: Params) -> LatentVolume:
    layers = sum(1 for k in params if k.startswith(f"{PREFIX}.w"))
    masks = [dilate(volume.active, i) for i in range(layers + 1)]
    g = Graph()
    grid = g.input("grid", requires_grad=False)
    nodes = declare(g, params)
    out = build_diffuse(g, grid, nodes, masks)
    values = evaluate(g, {"grid": volume.grid, **params})
    return LatentVolume(volume.bounds, values[out], masks[-1])


def query(volume: LatentVolume, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    out, _ = PRIMITIVES["trilinear"].forward(
        {"lo": volume.bounds.lo_array, "hi": volume.bounds.hi_array, "deriv_axis": None},
        volume.grid,
        x.reshape(-1, 3),
    )
    return out.reshape(lead + (volume.channels,))


def dump(volume: LatentVolume, path) -> None:
    grid = np.ascontiguousarray(volume.grid, dtype="<f8")
    d, h = grid.shape[0], grid.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(h, d, *volume.bounds.lo, *volume.bounds.hi))
        fh.write(grid.tobytes(order="C"))


def load(path) -> LatentVolume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated volume header")
    h, d, *box = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 8 * d * h**3
    if h < 8 or d < 1 or len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} does not match header (H={h}, d={d})")
    grid = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(d, h, h, h).astype(np.float64)
    return LatentVolume(VolumeBounds(tuple(box[:3]), tuple(box[3:]), h), grid)
