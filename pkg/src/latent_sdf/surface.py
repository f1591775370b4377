"""Zero-level-set extraction and the Chamfer metric."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import FormatError, UsageError


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # [M,3]
    faces: np.ndarray  # [F,3]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise UsageError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces.copy())

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def boundary_edge_count(self) -> int:
        """Edges not shared by exactly two faces (0 for a closed manifold)."""
        if self.is_empty:
            return 0
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int(np.sum(counts != 2))

    def fingerprint(self) -> tuple:
        """Order key used to split a seed deterministically between two meshes."""
        v = np.ascontiguousarray(self.vertices).tobytes()
        f = np.ascontiguousarray(self.faces).tobytes()
        return (len(self.faces), len(self.vertices), hashlib.sha256(f).hexdigest(), hashlib.sha256(v).hexdigest())


def grid_points(lo, hi, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample positions [R,R,R,3] and per-axis spacing for a box."""
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (3,))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (3,))
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return pts, (hi - lo) / (resolution - 1)


def _refine_on_edges(values: np.ndarray, verts: np.ndarray, spacing: np.ndarray, level: float) -> np.ndarray:
    """Redo the edge interpolation in float64 (skimage reports float32 positions)."""
    idx = verts.astype(np.float64) / spacing
    frac = np.abs(idx - np.round(idx))
    axis = np.argmax(frac, axis=1)
    rows = np.arange(len(idx))
    a = np.round(idx).astype(np.int64)
    a[rows, axis] = np.floor(idx[rows, axis]).astype(np.int64)
    a = np.minimum(a, np.array(values.shape) - 1)
    b = a.copy()
    b[rows, axis] = np.minimum(a[rows, axis] + 1, np.array(values.shape)[axis] - 1)
    va = values[a[:, 0], a[:, 1], a[:, 2]]
    vb = values[b[:, 0], b[:, 1], b[:, 2]]
    denom = vb - va
    t = np.where(denom != 0, (level - va) / np.where(denom != 0, denom, 1.0), 0.0)
    pos = a.astype(np.float64)
    pos[rows, axis] += np.clip(t, 0.0, 1.0)
    return pos * spacing


def marching_cubes_grid(values: np.ndarray, lo, spacing, level: float = 0.0) -> TriangleMesh:
    values = np.asarray(values, dtype=np.float64)
    if values.min() > level or values.max() < level or values.min() == values.max():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    verts, faces, _, _ = measure.marching_cubes(
        values, level=level, spacing=tuple(float(s) for s in spacing), method="lorensen",
        allow_degenerate=False,
    )
    verts = _refine_on_edges(values, verts, np.asarray(spacing, np.float64), level)
    verts = verts + np.asarray(lo, dtype=np.float64)
    faces = faces.astype(np.int64)
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return TriangleMesh(verts, faces[keep])


def marching_cubes(field: Callable[[np.ndarray], np.ndarray], lo, hi, resolution: int,
                   chunk: int = 1 << 18) -> TriangleMesh:
    """Zero set of ``field`` sampled on a ``resolution``^3 grid spanning [lo, hi].

    ``field`` maps points [P,3] to values [P]. Returns an empty mesh when
    the samples never change sign.
    """
    if resolution < 2:
        raise UsageError(f"marching cubes resolution must be >= 2, got {resolution}")
    pts, spacing = grid_points(lo, hi, resolution)
    flat = pts.reshape(-1, 3)
    values = np.empty(len(flat))
    for s in range(0, len(flat), chunk):
        values[s:s + chunk] = field(flat[s:s + chunk])
    return marching_cubes_grid(values.reshape((resolution,) * 3), np.broadcast_to(lo, (3,)), spacing)


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise UsageError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise UsageError("mesh has zero surface area")
    idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[idx]]
    return (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def chamfer(mesh_a: TriangleMesh, mesh_b: TriangleMesh, n_samples: int = 10000, seed: int = 0) -> float:
    """Symmetric Chamfer distance: half the sum of mean nearest distances.

    Uses unsquared point-to-point distances between area-weighted samples.
    The seed is split into two streams and handed to the meshes in a
    content-determined order, so chamfer(a, b) == chamfer(b, a) exactly.
    """
    if mesh_a.is_empty or mesh_b.is_empty:
        raise UsageError("chamfer needs two non-empty meshes")
    streams = np.random.SeedSequence(seed).spawn(2)
    first, second = sorted([mesh_a, mesh_b], key=TriangleMesh.fingerprint)
    pa = sample_surface(first, n_samples, np.random.default_rng(streams[0]))
    if first.fingerprint() == second.fingerprint():
        return 0.0  # identical meshes share one sample set
    pb = sample_surface(second, n_samples, np.random.default_rng(streams[1]))
    return chamfer_points(pa, pb)


def metric_report(mesh_a: TriangleMesh, mesh_b: TriangleMesh, n_samples: int, seed: int) -> dict:
    return {"chamfer": chamfer(mesh_a, mesh_b, n_samples, seed), "n_samples": int(n_samples), "seed": int(seed)}


def write_report(report: dict, path) -> str:
    text = json.dumps(report, sort_keys=True)
    Path(path).write_text(text + "\n")
    return text


# --------------------------------------------------------------------- obj
def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed record {line!r}") from None
    try:
        return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, np.int64).reshape(-1, 3))
    except UsageError as exc:
        raise FormatError(f"{path}: {exc}") from None
