"""Point sampling, truncated SDF and Eikonal losses, Adam, and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import field as fld
from .autodiff import Graph, Node, backward, evaluate
from .errors import FormatError, LatentSdfError, NumericError, TrainingError, UsageError
from .model import ModelConfig, Pipeline, init_model, view_inputs
from .nn import Params
from .template import BodyParams, TemplateMesh, pose
from .volume import VolumeBounds

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 500
    views_per_step: int = 4  # K
    n_points: int = 4096  # N_S
    delta: float = 0.1
    lambda_sdf: float = 1.0
    lambda_normal: float = 0.1
    sigma_near: float = 0.05
    uniform_fraction: float = 0.2
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.delta > 0:
            raise UsageError(f"delta must be positive, got {self.delta}")
        if not 0.0 <= self.uniform_fraction <= 1.0:
            raise UsageError(f"uniform_fraction must lie in [0, 1], got {self.uniform_fraction}")
        if not self.lr > 0:
            raise UsageError(f"lr must be positive, got {self.lr}")
        if self.steps < 0 or self.views_per_step < 1 or self.n_points < 1:
            raise UsageError("steps >= 0, views_per_step >= 1 and n_points >= 1 are required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleBatch:
    points: np.ndarray  # [N,3]
    sdf: np.ndarray  # [N]
    n_uniform: int = 0


def sample_points(oracle: Callable, bounds: VolumeBounds, n: int, uniform_fraction: float,
                  sigma_near: float, rng: np.random.Generator) -> SampleBatch:
    """floor(fraction * n) uniform points in the box, the rest jittered surface points."""
    if n < 1:
        raise UsageError("sample_points needs n >= 1")
    n_uniform = int(np.floor(uniform_fraction * n))
    uniform = rng.uniform(bounds.lo_array, bounds.hi_array, size=(n_uniform, 3))
    surface = oracle.surface_points(n - n_uniform, rng)
    if sigma_near > 0:
        surface = surface + rng.normal(0.0, sigma_near, size=surface.shape)
    pts = np.concatenate([uniform, surface])
    labels = np.asarray(oracle(pts), dtype=np.float64)
    if not np.all(np.isfinite(labels)):
        raise NumericError("oracle returned non-finite labels")
    return SampleBatch(pts, labels, n_uniform)


# ------------------------------------------------------------------ losses
def build_loss_sdf(g: Graph, pred: Node, gt, delta: float) -> Node:
    if not delta > 0:
        raise UsageError(f"delta must be positive, got {delta}")
    diff = g.clamp(pred, delta=delta) - g.clamp(gt, delta=delta)
    return g.mean(g.l2norm(g.reshape(diff, (-1, 1)), axis=-1))


def build_loss_eikonal(g: Graph, gradients: Node) -> Node:
    dev = g.l2norm(gradients, axis=-1) - 1.0
    return g.mean(g.l2norm(g.reshape(dev, (-1, 1)), axis=-1))


def loss_sdf(pred, gt, delta: float) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise UsageError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    g = Graph()
    p, t = g.input("pred"), g.input("gt", requires_grad=False)
    out = build_loss_sdf(g, p, t, delta)
    return float(evaluate(g, {"pred": pred, "gt": gt})[out])


def loss_eikonal(gradients) -> float:
    g = Graph()
    x = g.input("grad")
    out = build_loss_eikonal(g, x)
    return float(evaluate(g, {"grad": np.asarray(gradients, dtype=np.float64).reshape(-1, 3)})[out])


def total_loss(l_sdf: float, l_eik: float, lambda_sdf: float, lambda_normal: float) -> float:
    return lambda_sdf * l_sdf + lambda_normal * l_eik


# ------------------------------------------------------------------- adam
@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[Params, AdamState]:
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p):
            raise UsageError(f"gradient shape {g.shape} != parameter shape {np.shape(p)} for {k}")
        m = beta1 * state.m.get(k, np.zeros_like(g)) + (1 - beta1) * g
        v = beta2 * state.v.get(k, np.zeros_like(g)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, t)


# --------------------------------------------------------------- training
@dataclass
class TrainingData:
    """What the loop needs from a scene: views, their posed vertices, an oracle."""

    template: TemplateMesh
    oracle: Callable
    normal_maps: list  # [3,H,W] arrays
    cameras: list
    posed_vertices: np.ndarray  # [n_obs, N, 3]

    @classmethod
    def from_scene(cls, scene, params: Sequence[BodyParams] | None = None) -> "TrainingData":
        params = params or [o.params for o in scene.observations]
        posed = np.stack([pose(scene.template, p)[0] for p in params])
        return cls(scene.template, scene.oracle, [o.normal_map.data for o in scene.observations],
                   [o.camera for o in scene.observations], posed)

    @property
    def n_observations(self) -> int:
        return len(self.normal_maps)

    def inputs(self, indices) -> tuple[np.ndarray, np.ndarray]:
        return view_inputs([self.normal_maps[k] for k in indices], self.posed_vertices[list(indices)],
                           [self.cameras[k] for k in indices])


@dataclass
class HistoryRow:
    step: int
    l_sdf: float
    l_eik: float
    total: float


@dataclass
class TrainState:
    params: Params
    adam: AdamState
    rng: np.random.Generator
    history: list[HistoryRow] = field(default_factory=list)

    @property
    def step(self) -> int:
        return len(self.history)


class Trainer:
    def __init__(self, data: TrainingData, model_config: ModelConfig, config: TrainConfig,
                 param_names: Sequence[str]):
        if data.n_observations < config.views_per_step:
            raise UsageError(
                f"scene has {data.n_observations} observations, fewer than K={config.views_per_step}"
            )
        self.data, self.model_config, self.config = data, model_config, config
        self.pipe = Pipeline(data.template, model_config, param_names, with_gradient=True)
        g = self.pipe.graph
        self.gt = g.input("gt", requires_grad=False)
        self.l_sdf = build_loss_sdf(g, self.pipe.sdf, self.gt, config.delta)
        self.l_eik = build_loss_eikonal(g, self.pipe.gradient)
        self.total = self.l_sdf * config.lambda_sdf + self.l_eik * config.lambda_normal

    def step(self, state: TrainState) -> TrainState:
        cfg = self.config
        step_index = state.step
        views = state.rng.choice(self.data.n_observations, size=cfg.views_per_step, replace=False)
        images, uv = self.data.inputs(views)
        batch = sample_points(self.data.oracle, self.pipe.bounds, cfg.n_points, cfg.uniform_fraction,
                              cfg.sigma_near, state.rng)
        binds = self.pipe.bindings(images, uv, batch.points, state.params)
        binds["gt"] = batch.sdf
        try:
            values = evaluate(self.pipe.graph, binds)
        except NumericError as exc:
            raise TrainingError(str(exc), step_index) from None
        row = HistoryRow(step_index, float(values[self.l_sdf]), float(values[self.l_eik]),
                         float(values[self.total]))
        if not np.isfinite(row.total):
            raise TrainingError("non-finite loss", step_index)
        grads = backward(self.pipe.graph, self.total)
        grad_map = {k: grads[self.pipe.nodes[k]] for k in state.params}
        if not all(np.all(np.isfinite(gv)) for gv in grad_map.values()):
            raise TrainingError("non-finite gradient", step_index)
        params, adam = adam_step(state.params, grad_map, state.adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        return TrainState(params, adam, state.rng, state.history + [row])

    def run(self, state: TrainState, steps: int, on_step: Callable[[TrainState], None] | None = None) -> TrainState:
        t0 = time.perf_counter()
        for _ in range(steps):
            state = self.step(state)
            if on_step is not None:
                on_step(state)
            row = state.history[-1]
            if row.step % 50 == 0:
                log.info("step %d l_sdf=%.5f l_eik=%.5f (%.1fs)", row.step, row.l_sdf, row.l_eik,
                         time.perf_counter() - t0)
        return state


def initial_state(model_config: ModelConfig, seed: int) -> TrainState:
    rng = np.random.default_rng(seed)
    params = init_model(model_config, rng)
    return TrainState(params, AdamState(), rng)


def train(data: TrainingData, config: TrainConfig, model_config: ModelConfig | None = None, seed: int = 0,
          state: TrainState | None = None, on_step=None) -> TrainState:
    """Train all parameter groups; returns parameters, optimizer state and loss history."""
    model_config = model_config or ModelConfig()
    state = state or initial_state(model_config, seed)
    trainer = Trainer(data, model_config, config, list(state.params))
    return trainer.run(state, max(config.steps - state.step, 0), on_step)


# -------------------------------------------------------------- artifacts
GROUPS = ("encoder", "fusion", "diffuse", "decoder")


def write_history(rows: Sequence[HistoryRow], path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "l_sdf", "l_eik", "total"])
        for r in rows:
            w.writerow([r.step, repr(r.l_sdf), repr(r.l_eik), repr(r.total)])


def read_history(path) -> list[HistoryRow]:
    with open(path, newline="") as fh:
        return [HistoryRow(int(r["step"]), float(r["l_sdf"]), float(r["l_eik"]), float(r["total"]))
                for r in csv.DictReader(fh)]


def save_checkpoint(state: TrainState, out_dir, model_config: ModelConfig, config: TrainConfig,
                    extra: dict | None = None) -> Path:
    """``decoder.ckpt`` plus one companion file per other group, optimizer and RNG state."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for group in GROUPS:
        part = {k: v for k, v in state.params.items() if k.startswith(group + ".")}
        fld.save_checkpoint(part, out / f"{group}.ckpt")
    opt = {f"m/{k}": v for k, v in state.adam.m.items()}
    opt.update({f"v/{k}": v for k, v in state.adam.v.items()})
    opt["t"] = np.array([float(state.adam.t)])
    fld.save_checkpoint(opt, out / "optimizer.ckpt")
    meta = {
        "format": fld.CHECKPOINT_VERSION,
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "model": model_config.to_dict(),
        "train": config.to_dict(),
    }
    if extra:
        meta.update(extra)
    (out / "state.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out


def load_model(ckpt_dir) -> tuple[Params, ModelConfig, dict]:
    root = Path(ckpt_dir)
    meta_path = root / "state.json"
    if not meta_path.is_file():
        raise FormatError(f"{root}: missing state.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: {exc}") from None
    if meta.get("format") != fld.CHECKPOINT_VERSION:
        raise FormatError(f"{root}: checkpoint format {meta.get('format')}, expected {fld.CHECKPOINT_VERSION}")
    params: Params = {}
    for group in GROUPS:
        path = root / f"{group}.ckpt"
        if not path.is_file():
            raise FormatError(f"{root}: missing {path.name}")
        params.update(fld.load_checkpoint(path))
    return params, ModelConfig.from_dict(meta["model"]), meta


def load_state(ckpt_dir, history: Sequence[HistoryRow]) -> tuple[TrainState, ModelConfig, dict]:
    params, model_config, meta = load_model(ckpt_dir)
    opt = fld.load_checkpoint(Path(ckpt_dir) / "optimizer.ckpt")
    adam = AdamState(
        {k[2:]: v for k, v in opt.items() if k.startswith("m/")},
        {k[2:]: v for k, v in opt.items() if k.startswith("v/")},
        int(opt["t"][0]),
    )
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    if len(history) != meta["step"]:
        raise FormatError(f"loss history has {len(history)} rows but checkpoint is at step {meta['step']}")
    return TrainState(params, adam, rng, list(history)), model_config, meta

