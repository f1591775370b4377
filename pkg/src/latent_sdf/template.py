"""Articulated template mesh, linear blend skinning and 2D refinement.

A template is a rest mesh with a joint tree, skinning weights and a small
linear shape basis. Posing never changes faces or vertex order, which is
what lets codes extracted from posed views land on canonical vertices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Graph, Node, backward, evaluate
from .autodiff.primitives import PRIMITIVES, hard_coverage
from .camera import WeakPerspectiveCamera
from .errors import NumericError, UsageError
from .surface import TriangleMesh, read_obj, write_obj


@dataclass
class TemplateMesh:
    vertices: np.ndarray  # [N,3] rest pose
    faces: np.ndarray  # [F,3]
    joints: np.ndarray  # [J,3] rest pose
    parents: list[int]  # parents[0] == -1; parents[j] < j
    weights: np.ndarray  # [N,J]
    shape_dirs: np.ndarray  # [B,N,3]
    joint_shape_dirs: np.ndarray  # [B,J,3]
    joint_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.shape_dirs = np.asarray(self.shape_dirs, dtype=np.float64)
        self.joint_shape_dirs = np.asarray(self.joint_shape_dirs, dtype=np.float64)
        self.parents = [int(p) for p in self.parents]
        n, j = len(self.vertices), len(self.joints)
        if not self.joint_names:
            self.joint_names = [f"joint{i}" for i in range(j)]
        if len(self.parents) != j or self.parents[0] != -1:
            raise UsageError("parents must list one entry per joint with -1 for the root")
        if any(not 0 <= p < i for i, p in enumerate(self.parents) if i > 0):
            raise UsageError("joints must be ordered so that each parent precedes its children")
        if self.weights.shape != (n, j):
            raise UsageError(f"skinning weights shape {self.weights.shape} != ({n}, {j})")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(axis=1) - 1) > 1e-9):
            raise UsageError("skinning weight rows must be convex combinations")
        b = self.shape_dirs.shape[0]
        if self.shape_dirs.shape != (b, n, 3) or self.joint_shape_dirs.shape != (b, j, 3):
            raise UsageError("shape basis dimensions do not match the template")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise UsageError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_shape(self) -> int:
        return self.shape_dirs.shape[0]

    def rest_mesh(self) -> TriangleMesh:
        return TriangleMesh(self.vertices.copy(), self.faces.copy())


@dataclass
class BodyParams:
    theta: np.ndarray  # [J,3] axis-angle
    beta: np.ndarray  # [B]

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.beta))):
            raise UsageError("body parameters must be finite")

    @classmethod
    def zeros(cls, template: TemplateMesh) -> "BodyParams":
        return cls(np.zeros((template.n_joints, 3)), np.zeros(template.n_shape))

    def copy(self) -> "BodyParams":
        return BodyParams(self.theta.copy(), self.beta.copy())

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BodyParams":
        return cls(np.array(d["theta"], dtype=np.float64), np.array(d["beta"], dtype=np.float64))


# ------------------------------------------------------------------ posing
def build_pose(g: Graph, template: TemplateMesh, theta: Node, beta: Node) -> tuple[Node, Node]:
    """Posed vertices [N,3] and posed joints [J,3] as graph nodes."""
    rest_v = g.einsum("b,bnk->nk", beta, g.constant(template.shape_dirs)) + template.vertices
    rest_j = g.einsum("b,bjk->jk", beta, g.constant(template.joint_shape_dirs)) + template.joints
    local = g.rodrigues(theta)
    rot, trans = [], []
    for j, p in enumerate(template.parents):
        r_j = g.take(local, j, axis=0)
        joint = g.take(rest_j, j, axis=0)
        if p < 0:
            rot.append(r_j)
            trans.append(joint)
        else:
            offset = joint - g.take(rest_j, p, axis=0)
            rot.append(g.einsum("ab,bc->ac", rot[p], r_j))
            trans.append(g.einsum("ab,b->a", rot[p], offset) + trans[p])
    rg = g.stack(rot, axis=0)
    tg = g.stack(trans, axis=0)
    weights = g.constant(template.weights)
    blended = g.einsum("nj,jab->nab", weights, rg)
    shift = tg - g.einsum("jab,jb->ja", rg, rest_j)
    verts = g.einsum("nab,nb->na", blended, rest_v) + g.einsum("nj,ja->na", weights, shift)
    return verts, tg


def joint_transforms(template: TemplateMesh, params: BodyParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Global rotations [J,3,3], posed joints [J,3] and shaped rest joints [J,3]."""
    rest_j = template.joints + np.einsum("b,bjk->jk", params.beta, template.joint_shape_dirs)
    local, _ = PRIMITIVES["rodrigues"].forward({}, params.theta)
    rg = np.zeros_like(local)
    tg = np.zeros_like(rest_j)
    for j, p in enumerate(template.parents):
        if p < 0:
            rg[j], tg[j] = local[j], rest_j[j]
        else:
            rg[j] = rg[p] @ local[j]
            tg[j] = rg[p] @ (rest_j[j] - rest_j[p]) + tg[p]
    return rg, tg, rest_j


def pose(template: TemplateMesh, params: BodyParams) -> tuple[np.ndarray, np.ndarray]:
    if params.theta.shape != (template.n_joints, 3) or params.beta.shape != (template.n_shape,):
        raise UsageError(
            f"params (theta {params.theta.shape}, beta {params.beta.shape}) do not match the template"
        )
    rg, tg, rest_j = joint_transforms(template, params)
    rest_v = template.vertices + np.einsum("b,bnk->nk", params.beta, template.shape_dirs)
    blended = np.einsum("nj,jab->nab", template.weights, rg)
    shift = tg - np.einsum("jab,jb->ja", rg, rest_j)
    verts = np.einsum("nab,nb->na", blended, rest_v) + template.weights @ shift
    return verts, tg


def posed_mesh(template: TemplateMesh, params: BodyParams) -> TriangleMesh:
    verts, _ = pose(template, params)
    return TriangleMesh(verts, template.faces.copy())


# ------------------------------------------------------------------ losses
def _project_node(g: Graph, points: Node, camera: WeakPerspectiveCamera) -> Node:
    xy = g.take(points, np.array([0, 1]), axis=-1)
    return xy * camera.scale + np.asarray(camera.translation)


def build_keypoint_loss(g: Graph, joints: Node, camera: WeakPerspectiveCamera, keypoints) -> Node:
    residual = _project_node(g, joints, camera) - np.asarray(keypoints, dtype=np.float64)
    return g.mean(g.l2norm(residual, axis=-1))


def build_silhouette_loss(
    g: Graph, verts: Node, faces: np.ndarray, camera: WeakPerspectiveCamera, mask, tau: float = 2.0
) -> Node:
    mask = np.asarray(mask, dtype=np.float64)
    coverage = g.soft_silhouette(_project_node(g, verts, camera), faces, mask.shape, tau)
    diff = coverage - mask
    return g.mean(diff * diff)


def keypoint_loss(posed_joints, camera: WeakPerspectiveCamera, keypoints) -> float:
    """Mean L2 distance between projected joints and 2D keypoints."""
    g = Graph()
    j = g.input("joints", requires_grad=False)
    out = build_keypoint_loss(g, j, camera, keypoints)
    return float(evaluate(g, {"joints": np.asarray(posed_joints, dtype=np.float64)})[out])


def silhouette_loss(vertices, faces, camera: WeakPerspectiveCamera, mask, tau: float = 2.0) -> float:
    """Mean squared difference between the soft coverage image and a binary mask."""
    g = Graph()
    v = g.input("verts", requires_grad=False)
    out = build_silhouette_loss(g, v, faces, camera, mask, tau)
    return float(evaluate(g, {"verts": np.asarray(vertices, dtype=np.float64).reshape(-1, 3)})[out])


def soft_coverage(vertices, faces, camera: WeakPerspectiveCamera, size, tau: float = 2.0) -> np.ndarray:
    uv = np.asarray(vertices, dtype=np.float64)[:, :2] * camera.scale + np.asarray(camera.translation)
    out, _ = PRIMITIVES["soft_silhouette"].forward(
        {"faces": np.asarray(faces, np.int64), "size": tuple(size), "tau": float(tau)}, uv
    )
    return out


def rasterize(vertices, faces, camera: WeakPerspectiveCamera, size) -> np.ndarray:
    """Hard coverage mask: pixel centres inside any projected triangle."""
    uv = np.asarray(vertices, dtype=np.float64)[:, :2] * camera.scale + np.asarray(camera.translation)
    return hard_coverage(uv, faces, size)


# -------------------------------------------------------------- refinement
@dataclass
class RefineConfig:
    steps: int = 200
    lr: float = 0.01
    silhouette_weight: float = 1.0  # lambda
    tau: float = 2.0
    optimize_shape: bool = True
    free_joints: tuple[int, ...] | None = None  # None frees every joint
    max_backtracks: int = 8


@dataclass
class RefineResult:
    params: BodyParams
    history: list[float]


class FitObjective:
    """Keypoint term plus lambda times the silhouette term, with gradients."""

    def __init__(self, template: TemplateMesh, camera: WeakPerspectiveCamera, keypoints, mask,
                 silhouette_weight: float = 1.0, tau: float = 2.0):
        self.template = template
        g = Graph()
        self.theta = g.input("theta")
        self.beta = g.input("beta")
        verts, joints = build_pose(g, template, self.theta, self.beta)
        total = build_keypoint_loss(g, joints, camera, keypoints)
        if silhouette_weight != 0:
            if mask is None:
                raise UsageError("a mask is required when the silhouette weight is nonzero")
            total = total + silhouette_weight * build_silhouette_loss(
                g, verts, template.faces, camera, mask, tau
            )
        self.graph, self.total = g, total

    def value(self, params: BodyParams) -> float:
        return float(evaluate(self.graph, {"theta": params.theta, "beta": params.beta})[self.total])

    def value_and_grad(self, params: BodyParams) -> tuple[float, np.ndarray, np.ndarray]:
        v = self.value(params)
        grads = backward(self.graph, self.total)
        return v, grads[self.theta], grads[self.beta]


def refine(
    template: TemplateMesh,
    init: BodyParams,
    camera: WeakPerspectiveCamera,
    keypoints,
    mask=None,
    config: RefineConfig | None = None,
) -> RefineResult:
    """Adam on (theta, beta) with a monotone fallback.

    A proposed step that raises the objective is halved up to
    ``max_backtracks`` times and otherwise rejected, so the recorded
    objective never increases.
    """
    config = config or RefineConfig()
    objective = FitObjective(template, camera, keypoints, mask, config.silhouette_weight, config.tau)
    x = np.concatenate([init.theta.ravel(), init.beta])
    n_theta = init.theta.size
    theta_mask = np.ones_like(init.theta)
    if config.free_joints is not None:
        theta_mask[:] = 0.0
        theta_mask[list(config.free_joints)] = 1.0

    def unpack(vec):
        return BodyParams(vec[:n_theta].reshape(-1, 3), vec[n_theta:])

    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    f, gt, gb = objective.value_and_grad(unpack(x))
    history = [f]
    for step in range(1, config.steps + 1):
        grad = np.concatenate([(gt * theta_mask).ravel(), gb if config.optimize_shape else np.zeros_like(gb)])
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        direction = (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
        scale = config.lr
        accepted = False
        for _ in range(config.max_backtracks + 1):
            trial = x - scale * direction
            f_trial = objective.value(unpack(trial))
            if not np.isfinite(f_trial):
                raise NumericError(f"refinement objective became non-finite at step {step}")
            if f_trial <= f:
                accepted = True
                break
            scale *= 0.5
        if accepted:
            x = trial
            f, gt, gb = objective.value_and_grad(unpack(x))
        history.append(f)
    return RefineResult(unpack(x), history)


def perturb_pose(params: BodyParams, angle: float, rng: np.random.Generator, joints=(0,)) -> BodyParams:
    """Rotate each listed joint by ``angle`` about its own random axis."""
    out = params.copy()
    for j in joints:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        out.theta[j] = compose_axis_angle(angle * axis, params.theta[j])
    return out


def rotation_angle_between(a, b) -> float:
    """Geodesic angle between two axis-angle rotations."""
    ra, _ = PRIMITIVES["rodrigues"].forward({}, np.asarray(a, dtype=np.float64).reshape(1, 3))
    rb, _ = PRIMITIVES["rodrigues"].forward({}, np.asarray(b, dtype=np.float64).reshape(1, 3))
    c = (np.trace(ra[0].T @ rb[0]) - 1) / 2
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def compose_axis_angle(outer, inner) -> np.ndarray:
    """Axis-angle of R(outer) @ R(inner)."""
    from scipy.spatial.transform import Rotation

    r = Rotation.from_rotvec(np.asarray(outer, float)) * Rotation.from_rotvec(np.asarray(inner, float))
    return r.as_rotvec()


# ---------------------------------------------------------------------- io
def save_template(template: TemplateMesh, obj_path) -> None:
    """Geometry as OBJ plus a ``.json`` sidecar with the rig and shape basis."""
    obj_path = Path(obj_path)
    write_obj(template.rest_mesh(), obj_path)
    side = {
        "joints": template.joints.tolist(),
        "parents": template.parents,
        "joint_names": template.joint_names,
        "weights": template.weights.tolist(),
        "shape_dirs": template.shape_dirs.tolist(),
        "joint_shape_dirs": template.joint_shape_dirs.tolist(),
    }
    obj_path.with_suffix(".json").write_text(json.dumps(side))


def load_template(obj_path) -> TemplateMesh:
    obj_path = Path(obj_path)
    mesh = read_obj(obj_path)
    side = json.loads(obj_path.with_suffix(".json").read_text())
    return TemplateMesh(
        mesh.vertices,
        mesh.faces,
        np.array(side["joints"]),
        side["parents"],
        np.array(side["weights"]),
        np.array(side["shape_dirs"]).reshape(-1, len(mesh.vertices), 3),
        np.array(side["joint_shape_dirs"]).reshape(-1, len(side["joints"]), 3),
        side.get("joint_names", []),
    )


def save_params(params: BodyParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict()))


def load_params(path) -> BodyParams:
    return BodyParams.from_dict(json.loads(Path(path).read_text()))
