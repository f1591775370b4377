"""Full differentiable pipeline: normal maps -> per-vertex codes -> volume -> SDF."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import encoder as enc
from . import field as fld
from . import fusion as fus
from . import volume as vol
from .autodiff import Graph, Node, evaluate
from .camera import WeakPerspectiveCamera
from .errors import UsageError
from .fusion import project_views
from .nn import Params, declare
from .surface import TriangleMesh, marching_cubes
from .template import TemplateMesh


@dataclass
class ModelConfig:
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    fusion: fus.FusionConfig = field(default_factory=fus.FusionConfig)
    decoder: fld.DecoderConfig = field(default_factory=fld.DecoderConfig)
    resolution: int = 32  # volume H
    diffusion_layers: int = 3
    bounds_margin: float = 0.1
    init_radius: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        sub = {
            "encoder": enc.EncoderConfig(**d.pop("encoder", {})),
            "fusion": fus.FusionConfig(**d.pop("fusion", {})),
            "decoder": fld.DecoderConfig(**d.pop("decoder", {})),
        }
        return cls(**sub, **d)

    @property
    def code_dim(self) -> int:
        return self.fusion.code_dim


def volume_bounds(template: TemplateMesh, config: ModelConfig) -> vol.VolumeBounds:
    return vol.VolumeBounds.around(template.vertices, config.resolution, config.bounds_margin)


def init_model(config: ModelConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    params.update(enc.init_params(config.encoder, rng))
    params.update(fus.init_params(config.fusion, config.encoder.out_channels, rng))
    params.update(vol.init_params(config.code_dim, config.diffusion_layers, rng))
    dec = fld.init_params(config.decoder, config.code_dim, rng)
    params.update(fld.init_sphere(dec, config.decoder, config.init_radius))
    return params


class Pipeline:
    """Graph from K views to the decoded field at query points.

    The graph is built once per (template, config); each call rebinds the
    images, projected vertex coordinates and query points.
    """

    def __init__(self, template: TemplateMesh, config: ModelConfig, param_names: Sequence[str],
                 with_gradient: bool = True):
        self.template = template
        self.config = config
        self.bounds = volume_bounds(template, config)
        vol.check_inside(template.vertices, self.bounds)
        self.masks = vol.layer_masks(template.vertices, self.bounds, config.diffusion_layers)
        g = Graph()
        self.images = g.input("images", requires_grad=False)
        self.uv = g.input("uv", requires_grad=False)
        self.points = g.input("points", requires_grad=False)
        self.nodes = declare(g, {k: None for k in param_names})
        feats = enc.build(g, self.images, self.nodes, config.encoder)
        per_vertex = g.bilinear(feats, self.uv)
        self.codes, self.view_weights = fus.build_fuse(g, per_vertex, self.nodes)
        grid = vol.build_scatter(g, self.codes, template.vertices, self.bounds)
        self.volume = vol.build_diffuse(g, grid, self.nodes, self.masks)
        self.sdf, self.gradient = fld.build_field(
            g, self.volume, self.points, self.nodes, config.decoder, self.bounds, with_gradient
        )
        self.graph = g

    def bindings(self, images: np.ndarray, uv: np.ndarray, points: np.ndarray, params: Params) -> dict:
        return {"images": images, "uv": uv, "points": points, **params}


def view_inputs(normal_maps: Sequence[np.ndarray], posed_vertices: np.ndarray,
                cameras: Sequence[WeakPerspectiveCamera]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([np.asarray(m, dtype=np.float64) for m in normal_maps])
    if images.ndim != 4 or images.shape[1] != 3:
        raise UsageError(f"normal maps must stack to [K,3,H,W], got {images.shape}")
    return images, project_views(posed_vertices, cameras)


def infer_volume(template: TemplateMesh, config: ModelConfig, params: Params, images: np.ndarray,
                 uv: np.ndarray) -> vol.LatentVolume:
    """Run encoder, fusion, scatter and diffusion for one set of views."""
    pipe = Pipeline(template, config, list(params), with_gradient=False)
    values = evaluate(pipe.graph, pipe.bindings(images, uv, np.zeros((1, 3)), params))
    return vol.LatentVolume(pipe.bounds, values[pipe.volume], pipe.masks[-1])


def reconstruct_mesh(volume: vol.LatentVolume, params: Params, config: ModelConfig,
                     resolution: int) -> TriangleMesh:
    evaluator = fld.FieldEvaluator(volume, params, config.decoder)
    b = volume.bounds
    return marching_cubes(evaluator.sdf, b.lo_array, b.hi_array, resolution)
