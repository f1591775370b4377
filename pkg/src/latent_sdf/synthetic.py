"""Synthetic scenes with closed-form signed distance ground truth.

Shapes are unions of spheres, capsules and rounded boxes, each attached to a
bone of an articulated template. Observations are orthographic sphere-traced
normal maps of the posed shape, rotated about the vertical axis per view.

Image convention: pixel (i, j) has normalized centre
``u = 2 (j + 0.5) / W - 1`` and ``v = 2 (i + 0.5) / H - 1`` and a world
point x lands at ``s * (x1, x2) + t``. The camera looks down -z, so
front-facing normals have positive z.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .camera import FeatureMap, WeakPerspectiveCamera, project
from .errors import FormatError, NumericError, UsageError
from .surface import TriangleMesh, marching_cubes, read_obj, write_obj
from .template import (
    BodyParams,
    TemplateMesh,
    joint_transforms,
    load_params,
    load_template,
    pose,
    save_params,
    save_template,
)


class GenerationError(NumericError):
    """Rendering could not resolve the surface reliably."""


# -------------------------------------------------------------- primitives
def _segment_closest(x, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros(len(x)) if denom == 0 else np.clip((x - a) @ ab / denom, 0.0, 1.0)
    return a + t[:, None] * ab


@dataclass
class Primitive:
    """One convex piece. ``kind`` is sphere, capsule or box."""

    kind: str
    bone: int
    a: tuple  # sphere/box centre, capsule start
    b: tuple = (0.0, 0.0, 0.0)  # capsule end, box half extents
    radius: float = 0.0  # sphere/capsule radius, box rounding

    def __post_init__(self):
        if self.kind not in ("sphere", "capsule", "box"):
            raise UsageError(f"unknown primitive kind {self.kind!r}")
        self.a = tuple(float(v) for v in self.a)
        self.b = tuple(float(v) for v in self.b)
        self.radius = float(self.radius)
        if self.radius < 0 or (self.kind != "box" and self.radius == 0):
            raise UsageError(f"{self.kind} needs a positive radius")

    def distance(self, x: np.ndarray) -> np.ndarray:
        a, b = np.array(self.a), np.array(self.b)
        if self.kind == "sphere":
            return np.linalg.norm(x - a, axis=-1) - self.radius
        if self.kind == "capsule":
            return np.linalg.norm(x - _segment_closest(x, a, b), axis=-1) - self.radius
        q = np.abs(x - a) - b
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0) - self.radius

    def closest_point(self, x: np.ndarray) -> np.ndarray:
        a, b = np.array(self.a), np.array(self.b)
        if self.kind == "box":
            core = np.clip(x, a - b, a + b)
            off = x - core
            dist = np.linalg.norm(off, axis=-1)
            out = core + self.radius * off / np.where(dist > 0, dist, 1.0)[:, None]
            inner = dist == 0
            if np.any(inner):
                q = np.abs(x[inner] - a) - b
                axis = np.argmax(q, axis=1)
                y = x[inner].copy()
                rows = np.arange(len(y))
                side = np.sign(y[rows, axis] - a[axis])
                side[side == 0] = 1.0
                y[rows, axis] = a[axis] + side * (b[axis] + self.radius)
                out[inner] = y
            return out
        base = np.broadcast_to(a, x.shape) if self.kind == "sphere" else _segment_closest(x, a, b)
        off = x - base
        dist = np.linalg.norm(off, axis=-1)
        off = np.where((dist > 0)[:, None], off, np.array([0.0, 0.0, 1.0]))
        dist = np.where(dist > 0, dist, 1.0)
        return base + self.radius * off / dist[:, None]

    def area(self) -> float:
        r = self.radius
        if self.kind == "sphere":
            return 4 * np.pi * r * r
        if self.kind == "capsule":
            length = float(np.linalg.norm(np.array(self.b) - np.array(self.a)))
            return 2 * np.pi * r * length + 4 * np.pi * r * r
        w, h, d = (2 * v for v in self.b)
        edges = np.pi * r * (w + h + d)
        return 2 * (w * h + h * d + d * w) + 2 * edges + 4 * np.pi * r * r

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        a, b = np.array(self.a), np.array(self.b)
        if self.kind == "sphere":
            return a - self.radius, a + self.radius
        if self.kind == "capsule":
            return np.minimum(a, b) - self.radius, np.maximum(a, b) + self.radius
        return a - b - self.radius, a + b + self.radius

    def grown(self, amount: float) -> "Primitive":
        return Primitive(self.kind, self.bone, self.a, self.b, self.radius + amount)


@dataclass
class SdfOracle:
    """Union of bone-attached primitives in the canonical (rest) frame."""

    primitives: list[Primitive]
    rest_joints: np.ndarray  # [J,3] joint positions the primitives were authored against

    def __post_init__(self):
        self.rest_joints = np.asarray(self.rest_joints, dtype=np.float64).reshape(-1, 3)
        if not self.primitives:
            raise UsageError("an oracle needs at least one primitive")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, 3)
        d = np.min([p.distance(flat) for p in self.primitives], axis=0)
        return d.reshape(x.shape[:-1])

    def posed(self, rotations: np.ndarray, translations: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        """Distance function of the shape moved by per-bone rigid transforms."""
        def f(x):
            x = np.asarray(x, dtype=np.float64)
            flat = x.reshape(-1, 3)
            best = np.full(len(flat), np.inf)
            for p in self.primitives:
                r, t, j = rotations[p.bone], translations[p.bone], self.rest_joints[p.bone]
                local = (flat - t) @ r + j
                best = np.minimum(best, p.distance(local))
            return best.reshape(x.shape[:-1])
        return f

    def bounds(self, pad: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
        boxes = [p.aabb() for p in self.primitives]
        lo = np.min([b[0] for b in boxes], axis=0)
        hi = np.max([b[1] for b in boxes], axis=0)
        return lo - pad, hi + pad

    def surface_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Points on the union's outer surface, roughly uniform by area.

        Candidates are projected onto a primitive chosen by area; candidates
        that fall inside another primitive (the seams) are redrawn.
        """
        areas = np.array([p.area() for p in self.primitives])
        out = np.zeros((0, 3))
        while len(out) < n:
            need = n - len(out)
            m = max(16, int(need * 1.5) + 8)
            which = rng.choice(len(self.primitives), size=m, p=areas / areas.sum())
            pts = np.empty((m, 3))
            for k, p in enumerate(self.primitives):
                sel = which == k
                if not np.any(sel):
                    continue
                lo, hi = p.aabb()
                pts[sel] = p.closest_point(rng.uniform(lo, hi, size=(int(sel.sum()), 3)))
            keep = self(pts) > -1e-9
            out = np.concatenate([out, pts[keep][:need]])
        return out

    def to_dict(self) -> dict:
        return {"primitives": [asdict(p) for p in self.primitives], "rest_joints": self.rest_joints.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SdfOracle":
        return cls([Primitive(**p) for p in d["primitives"]], np.array(d["rest_joints"]))


def oracle_sdf(shape: SdfOracle, x) -> np.ndarray:
    return shape(x)


class MeshOracle:
    """Signed distance to a closed triangle mesh.

    Unsigned distance is the exact point-triangle distance over the nearest
    candidate faces; the sign comes from a majority vote of ray parity along
    three fixed directions.
    """

    RAYS = np.array([[0.5773, 0.5774, 0.5775], [-0.7071, 0.1, 0.7], [0.2, -0.9, 0.3873]])

    def __init__(self, mesh: TriangleMesh, candidates: int = 16):
        if mesh.is_empty:
            raise UsageError("mesh oracle needs a non-empty mesh")
        self.mesh = mesh
        self.tri = mesh.vertices[mesh.faces]
        self.tree = cKDTree(self.tri.mean(axis=1))
        self.k = min(candidates, len(self.tri))

    def unsigned(self, x: np.ndarray) -> np.ndarray:
        _, idx = self.tree.query(x, k=self.k)
        idx = np.asarray(idx).reshape(len(x), -1)
        tri = self.tri[idx]  # [P,k,3,3]
        d = point_triangle_distance(np.repeat(x[:, None], idx.shape[1], axis=1), tri)
        return d.min(axis=1)

    def inside(self, x: np.ndarray) -> np.ndarray:
        votes = sum(ray_parity(self.tri, x, r / np.linalg.norm(r)) for r in self.RAYS)
        return votes >= 2

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, 3)
        d = self.unsigned(flat)
        return np.where(self.inside(flat), -d, d).reshape(x.shape[:-1])


def point_triangle_distance(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Distance from points p [...,3] to triangles tri [...,3,3]."""
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    n = np.cross(b - a, c - a)
    nn = np.sum(n * n, -1)
    safe = np.where(nn > 0, nn, 1.0)
    # barycentric of the plane projection
    w = p - a
    proj = p - (np.sum(w * n, -1) / safe)[..., None] * n
    inside = np.ones(p.shape[:-1], bool)
    for u, v in ((a, b), (b, c), (c, a)):
        inside &= np.sum(np.cross(v - u, proj - u) * n, -1) >= 0
    inside &= nn > 0
    plane = np.abs(np.sum(w * n, -1)) / np.sqrt(safe)
    best = np.full(p.shape[:-1], np.inf)
    for u, v in ((a, b), (b, c), (c, a)):
        e = v - u
        ee = np.sum(e * e, -1)
        t = np.clip(np.sum((p - u) * e, -1) / np.where(ee > 0, ee, 1.0), 0, 1)
        best = np.minimum(best, np.linalg.norm(p - (u + t[..., None] * e), axis=-1))
    return np.where(inside, plane, best)


def ray_parity(tri: np.ndarray, points: np.ndarray, direction: np.ndarray, chunk: int = 256) -> np.ndarray:
    """True where a ray from each point crosses the triangles an odd number of times."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = b - a, c - a
    h = np.cross(direction, e2)
    det = np.sum(e1 * h, -1)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    q_e1 = None
    out = np.zeros(len(points), dtype=bool)
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        sv = p[:, None, :] - a[None]
        u = np.sum(sv * h[None], -1) * inv
        q_e1 = np.cross(sv, e1[None])
        v = np.sum(direction * q_e1, -1) * inv
        t = np.sum(e2[None] * q_e1, -1) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        out[s:s + chunk] = (hit.sum(axis=1) % 2) == 1
    return out


# --------------------------------------------------------------- templates
JOINT_NAMES = [
    "pelvis", "spine", "neck",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
]
PARENTS = [-1, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13]
REST_JOINTS = np.array([
    [0.0, 0.0, 0.0], [0.0, 0.35, 0.0], [0.0, 0.6, 0.0],
    [0.18, 0.45, 0.0], [0.45, 0.45, 0.0], [0.7, 0.45, 0.0],
    [-0.18, 0.45, 0.0], [-0.45, 0.45, 0.0], [-0.7, 0.45, 0.0],
    [0.1, -0.05, 0.0], [0.1, -0.45, 0.0], [0.1, -0.85, 0.0],
    [-0.1, -0.05, 0.0], [-0.1, -0.45, 0.0], [-0.1, -0.85, 0.0],
])


def _J(name):
    return tuple(REST_JOINTS[JOINT_NAMES.index(name)])


def humanoid_body() -> list[Primitive]:
    """Bare capsule body; the template mesh is built from exactly these pieces."""
    body = [
        Primitive("capsule", 0, (-0.1, -0.05, 0.0), (0.1, -0.05, 0.0), 0.12),
        Primitive("capsule", 0, (0.0, -0.05, 0.0), (0.0, 0.3, 0.0), 0.14),
        Primitive("capsule", 1, (-0.18, 0.45, 0.0), (0.18, 0.45, 0.0), 0.08),
        Primitive("capsule", 1, (0.0, 0.3, 0.0), (0.0, 0.6, 0.0), 0.05),
        Primitive("sphere", 2, (0.0, 0.72, 0.0), radius=0.12),
    ]
    for side in ("l", "r"):
        body += [
            Primitive("capsule", JOINT_NAMES.index(f"{side}_shoulder"), _J(f"{side}_shoulder"), _J(f"{side}_elbow"), 0.05),
            Primitive("capsule", JOINT_NAMES.index(f"{side}_elbow"), _J(f"{side}_elbow"), _J(f"{side}_wrist"), 0.045),
            Primitive("capsule", JOINT_NAMES.index(f"{side}_hip"), _J(f"{side}_hip"), _J(f"{side}_knee"), 0.065),
            Primitive("capsule", JOINT_NAMES.index(f"{side}_knee"), _J(f"{side}_knee"), _J(f"{side}_ankle"), 0.055),
        ]
    return body


def humanoid_oracle(clothing: float = 0.02, backpack: bool = True) -> SdfOracle:
    """Body grown by a clothing layer, plus a backpack strapped to the chest."""
    prims = [p.grown(clothing) for p in humanoid_body()]
    if backpack:
        prims.append(Primitive("box", 1, (0.0, 0.2, -0.2), (0.12, 0.15, 0.06), 0.03))
    return SdfOracle(prims, REST_JOINTS)


def _frame(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def capsule_mesh(a, b, radius, around: int = 8, spacing: float = 0.09, cap_rings: int = 3):
    """Closed capsule (or sphere when a == b) as latitude rings around the axis."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    axis = b - a
    length = float(np.linalg.norm(axis))
    axis = axis / length if length > 0 else np.array([0.0, 1.0, 0.0])
    u, w = _frame(axis)
    rings = []  # (centre, axial offset, ring radius)
    for k in range(1, cap_rings + 1):
        phi = -np.pi / 2 + k * (np.pi / 2) / cap_rings
        rings.append((a, radius * np.sin(phi), radius * np.cos(phi)))
    n_mid = max(int(np.ceil(length / spacing)) - 1, 0) if length > 0 else 0
    for k in range(1, n_mid + 1):
        rings.append((a + axis * length * k / (n_mid + 1), 0.0, radius))
    if length > 0:
        rings.append((b, 0.0, radius))
    for k in range(1, cap_rings):
        phi = k * (np.pi / 2) / cap_rings
        rings.append((b, radius * np.sin(phi), radius * np.cos(phi)))
    ang = 2 * np.pi * np.arange(around) / around
    circle = np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * w
    verts = [a - radius * axis]
    for centre, off, rr in rings:
        verts.extend(centre + off * axis + rr * circle)
    verts.append(b + radius * axis)
    verts = np.array(verts)
    faces = []
    n_r = len(rings)
    for j in range(around):
        faces.append([0, 1 + (j + 1) % around, 1 + j])
    for r in range(n_r - 1):
        base0, base1 = 1 + r * around, 1 + (r + 1) * around
        for j in range(around):
            j1 = (j + 1) % around
            faces.append([base0 + j, base0 + j1, base1 + j1])
            faces.append([base0 + j, base1 + j1, base1 + j])
    top = len(verts) - 1
    last = 1 + (n_r - 1) * around
    for j in range(around):
        faces.append([last + j, last + (j + 1) % around, top])
    return verts, np.array(faces, np.int64)


def _radial(prim: Primitive, verts: np.ndarray) -> np.ndarray:
    base = np.broadcast_to(np.array(prim.a), verts.shape) if prim.kind == "sphere" else _segment_closest(
        verts, np.array(prim.a), np.array(prim.b)
    )
    off = verts - base
    return off / np.linalg.norm(off, axis=1, keepdims=True)


def _assemble_template(pieces, joints, parents, names, thickness: float, stretch: float) -> TemplateMesh:
    verts, faces, weights, radial = [], [], [], []
    offset = 0
    for prim, (v, f) in pieces:
        verts.append(v)
        faces.append(f + offset)
        w = np.zeros((len(v), len(joints)))
        w[:, prim.bone] = 1.0
        weights.append(w)
        radial.append(_radial(prim, v))
        offset += len(v)
    v = np.concatenate(verts)
    dirs = np.stack([thickness * np.concatenate(radial), stretch * v * np.array([0.0, 1.0, 0.0])])
    jdirs = np.stack([np.zeros_like(joints), stretch * joints * np.array([0.0, 1.0, 0.0])])
    return TemplateMesh(v, np.concatenate(faces), joints, parents, np.concatenate(weights), dirs, jdirs, names)


def humanoid_template(around: int = 8, spacing: float = 0.09) -> TemplateMesh:
    """Capsule humanoid, 15 joints, 2 shape directions (girth, height)."""
    pieces = []
    for prim in humanoid_body():
        if prim.kind == "sphere":
            v, f = capsule_mesh(prim.a, prim.a, prim.radius, around, spacing, cap_rings=4)
        else:
            v, f = capsule_mesh(prim.a, prim.b, prim.radius, around, spacing)
        pieces.append((prim, (v, f)))
    return _assemble_template(pieces, REST_JOINTS.copy(), PARENTS, JOINT_NAMES, 0.05, 0.1)


def sphere_template(radius: float = 0.9, around: int = 16) -> TemplateMesh:
    prim = Primitive("sphere", 0, (0.0, 0.0, 0.0), radius=radius)
    v, f = capsule_mesh(prim.a, prim.a, radius, around, cap_rings=8)
    return _assemble_template([(prim, (v, f))], np.zeros((1, 3)), [-1], ["root"], 0.05, 0.1)


def sphere_oracle(radius: float = 1.0) -> SdfOracle:
    return SdfOracle([Primitive("sphere", 0, (0.0, 0.0, 0.0), radius=radius)], np.zeros((1, 3)))


POSE_PRESETS: dict[str, dict[str, list[float]]] = {
    "rest": {},
    "walk": {
        "l_hip": [-0.45, 0.0, 0.0], "l_knee": [0.5, 0.0, 0.0],
        "r_hip": [0.35, 0.0, 0.0], "r_knee": [0.2, 0.0, 0.0],
        "l_shoulder": [0.0, 0.0, -1.1], "r_shoulder": [0.0, 0.0, 1.1],
        "l_elbow": [0.0, -0.5, 0.0], "r_elbow": [0.0, 0.4, 0.0],
    },
    "reach": {
        "l_shoulder": [0.0, -0.9, 0.3], "l_elbow": [0.0, -0.6, 0.0],
        "r_shoulder": [0.0, 0.0, 0.6], "spine": [0.25, 0.2, 0.0],
        "neck": [0.2, 0.0, 0.0], "l_hip": [0.0, 0.0, 0.25], "r_hip": [0.0, 0.0, -0.25],
    },
    "crouch": {
        "l_hip": [-0.9, 0.0, 0.15], "l_knee": [1.2, 0.0, 0.0],
        "r_hip": [-0.9, 0.0, -0.15], "r_knee": [1.2, 0.0, 0.0],
        "spine": [-0.35, 0.0, 0.0],
        "l_shoulder": [0.0, -0.4, -0.6], "r_shoulder": [0.0, 0.4, 0.6],
        "l_elbow": [0.0, -1.0, 0.0], "r_elbow": [0.0, 1.0, 0.0],
    },
}


def axis_angle_y(degrees: float) -> np.ndarray:
    return np.array([0.0, np.deg2rad(degrees), 0.0])


# ------------------------------------------------------------------ scenes
@dataclass
class SceneSpec:
    shape: str = "sphere"  # sphere | humanoid
    radius: float = 1.0  # sphere scenes
    template_radius: float = 0.9  # sphere scenes
    clothing: float = 0.02  # humanoid scenes
    backpack: bool = True
    poses: list = field(default_factory=lambda: ["rest"])
    views: list = field(default_factory=lambda: [0, 45, 90, 135, 180, 225, 270, 315])
    resolution: int = 64
    scale: float = 0.9
    jitter: float = 0.03  # camera translation jitter (normalized units)
    gt_resolution: int = 128

    def __post_init__(self):
        if self.shape not in ("sphere", "humanoid"):
            raise UsageError(f"shape: expected 'sphere' or 'humanoid', got {self.shape!r}")
        if not self.poses or not self.views:
            raise UsageError("poses and views must be non-empty")
        if self.resolution < 2 or self.gt_resolution < 2:
            raise UsageError("resolution: must be >= 2")
        if not self.scale > 0 or not self.radius > 0:
            raise UsageError("scale and radius must be positive")
        for i, p in enumerate(self.poses):
            if isinstance(p, str):
                if p not in POSE_PRESETS:
                    raise UsageError(f"poses[{i}]: unknown preset {p!r} (known: {sorted(POSE_PRESETS)})")
            elif isinstance(p, dict):
                for name, vec in p.items():
                    if name not in JOINT_NAMES or len(vec) != 3:
                        raise UsageError(f"poses[{i}]: bad joint entry {name!r}")
            else:
                raise UsageError(f"poses[{i}]: expected a preset name or a joint map")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise UsageError(f"unknown spec field(s): {', '.join(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Observation:
    normal_map: FeatureMap
    mask: np.ndarray  # [H,W] bool
    camera: WeakPerspectiveCamera
    params: BodyParams
    keypoints: np.ndarray  # [J,2]
    pose_index: int = 0
    view: float = 0.0


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    template: TemplateMesh
    oracle: SdfOracle
    observations: list[Observation]
    canonical_gt: TriangleMesh

    def posed_vertices(self, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self.observations)) if indices is None else indices
        return np.stack([pose(self.template, self.observations[k].params)[0] for k in idx])


def pose_theta(template: TemplateMesh, entry, view: float) -> np.ndarray:
    from .template import compose_axis_angle

    theta = np.zeros((template.n_joints, 3))
    mapping = POSE_PRESETS[entry] if isinstance(entry, str) else entry
    for name, vec in mapping.items():
        if name in template.joint_names:
            theta[template.joint_names.index(name)] = vec
    theta[0] = compose_axis_angle(axis_angle_y(view), theta[0])
    return theta


def image_rays(camera: WeakPerspectiveCamera, size: int) -> np.ndarray:
    """World (x, y) of each pixel centre [H*W,2], row-major."""
    c = (np.arange(size) + 0.5) * 2 / size - 1
    vv, uu = np.meshgrid(c, c, indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], -1)
    return (uv - np.asarray(camera.translation)) / camera.scale


def sphere_trace(f, xy: np.ndarray, z_start: float, z_end: float, max_iter: int = 400,
                 eps: float = 1e-7) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """March rays along -z. Returns (hit mask, hit points, unresolved mask)."""
    n = len(xy)
    z = np.full(n, z_start)
    active = np.ones(n, bool)
    hit = np.zeros(n, bool)
    for _ in range(max_iter):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        pts = np.column_stack([xy[idx], z[idx]])
        d = f(pts)
        done = d < eps
        hit[idx[done]] = True
        z[idx[~done]] -= d[~done]
        escaped = z[idx] < z_end
        active[idx[done | escaped]] = False
    return hit, np.column_stack([xy, z]), active


def finite_difference_normals(f, pts: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(pts)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        grad[:, k] = (f(pts + e) - f(pts - e)) / (2 * h)
    return grad / np.linalg.norm(grad, axis=1, keepdims=True)


def render_observation(oracle: SdfOracle, template: TemplateMesh, params: BodyParams,
                       camera: WeakPerspectiveCamera, resolution: int) -> Observation:
    rg, tg, _ = joint_transforms(template, params)
    f = oracle.posed(rg, tg)
    xy = image_rays(camera, resolution)
    reach = float(np.max(np.abs(tg))) + 2.0
    hit, pts, unresolved = sphere_trace(f, xy, reach, -reach)
    n_hit = int(hit.sum())
    if unresolved.sum() > 0.01 * max(n_hit, 1):
        raise GenerationError(f"{int(unresolved.sum())} rays did not resolve ({n_hit} hits)")
    normals = np.zeros((len(xy), 3))
    if n_hit:
        normals[hit] = finite_difference_normals(f, pts[hit])
    img = normals.T.reshape(3, resolution, resolution)
    mask = np.any(img != 0, axis=0)
    keypoints = project(tg, camera)
    return Observation(FeatureMap(img), mask, camera, params, keypoints)


def make_scene(spec: SceneSpec, rng: np.random.Generator, seed: int = 0) -> SyntheticScene:
    if spec.shape == "sphere":
        template = sphere_template(spec.template_radius)
        oracle = sphere_oracle(spec.radius)
    else:
        template = humanoid_template()
        oracle = humanoid_oracle(spec.clothing, spec.backpack)
    observations = []
    for p_idx, entry in enumerate(spec.poses):
        for view in spec.views:
            theta = pose_theta(template, entry, float(view))
            params = BodyParams(theta, np.zeros(template.n_shape))
            t = rng.uniform(-spec.jitter, spec.jitter, size=2) if spec.jitter > 0 else np.zeros(2)
            camera = WeakPerspectiveCamera(spec.scale, (float(t[0]), float(t[1])))
            obs = render_observation(oracle, template, params, camera, spec.resolution)
            obs.pose_index, obs.view = p_idx, float(view)
            observations.append(obs)
    lo, hi = oracle.bounds(0.1)
    lo, hi = float(lo.min()), float(hi.max())
    gt = marching_cubes(oracle, lo, hi, spec.gt_resolution)
    return SyntheticScene(spec, seed, template, oracle, observations, gt)


# ---------------------------------------------------------------------- io
def write_pfm(path, image: np.ndarray) -> None:
    """[3,H,W] float map; rows stored bottom-up as the format requires."""
    c, h, w = image.shape
    data = np.ascontiguousarray(np.transpose(image, (1, 2, 0))[::-1], dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"PF":
        raise FormatError(f"{path}: not a colour PFM file")
    w, h = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3], dtype=dtype)
    if data.size != 3 * w * h:
        raise FormatError(f"{path}: expected {3 * w * h} floats, found {data.size}")
    return np.transpose(data.reshape(h, w, 3)[::-1], (2, 0, 1)).astype(np.float64)


def write_pgm(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.where(mask, 255, 0).astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8)
    if data.size != w * h:
        raise FormatError(f"{path}: expected {w * h} bytes, found {data.size}")
    return data.reshape(h, w) > 127


def _dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def save_scene(scene: SyntheticScene, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_template(scene.template, out / "template.obj")
    write_obj(scene.canonical_gt, out / "canonical_gt.obj")
    _dump(out / "scene.json", {
        "spec": scene.spec.to_dict(),
        "seed": scene.seed,
        "template": "template.obj",
        "oracle": scene.oracle.to_dict(),
        "n_observations": len(scene.observations),
        "observations": [{"pose": o.pose_index, "view": o.view} for o in scene.observations],
    })
    for k, obs in enumerate(scene.observations):
        write_pfm(out / f"normal_{k}.pfm", obs.normal_map.data)
        write_pgm(out / f"mask_{k}.pgm", obs.mask)
        _dump(out / f"camera_{k}.json", obs.camera.to_dict())
        save_params(obs.params, out / f"params_{k}.json")
        _dump(out / f"keypoints_{k}.json", obs.keypoints.tolist())
    return out


def load_scene(scene_dir) -> SyntheticScene:
    root = Path(scene_dir)
    meta_path = root / "scene.json"
    if not meta_path.is_file():
        raise UsageError(f"{root}: missing scene.json")
    try:
        meta = json.loads(meta_path.read_text())
        spec = SceneSpec.from_dict(meta["spec"])
        oracle = SdfOracle.from_dict(meta["oracle"])
        template = load_template(root / meta["template"])
        observations = []
        for k in range(int(meta["n_observations"])):
            missing = [n for n in (f"normal_{k}.pfm", f"mask_{k}.pgm", f"camera_{k}.json",
                                   f"params_{k}.json", f"keypoints_{k}.json") if not (root / n).is_file()]
            if missing:
                raise UsageError(f"{root}: incomplete scene, missing {', '.join(missing)}")
            info = meta["observations"][k]
            observations.append(Observation(
                FeatureMap(read_pfm(root / f"normal_{k}.pfm")),
                read_pgm(root / f"mask_{k}.pgm"),
                WeakPerspectiveCamera.from_dict(json.loads((root / f"camera_{k}.json").read_text())),
                load_params(root / f"params_{k}.json"),
                np.array(json.loads((root / f"keypoints_{k}.json").read_text())),
                int(info["pose"]), float(info["view"]),
            ))
        gt = read_obj(root / "canonical_gt.obj")
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise FormatError(f"{root}: malformed scene ({exc})") from None
    except FileNotFoundError as exc:
        raise UsageError(f"{root}: incomplete scene, {exc}") from None
    return SyntheticScene(spec, int(meta["seed"]), template, oracle, observations, gt)
