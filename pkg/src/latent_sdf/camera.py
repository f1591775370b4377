"""Weak-perspective cameras and pixel-aligned feature lookup.

Image coordinates are normalized to ``[-1, 1]^2``: ``u`` runs along the
width and ``v`` along the height, and the centre of pixel ``(row i, col j)``
sits at ``u = 2 (j + 0.5) / W - 1``, ``v = 2 (i + 0.5) / H - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.primitives import PRIMITIVES
from .errors import NumericError, UsageError


@dataclass(frozen=True)
class WeakPerspectiveCamera:
    """Orthographic projection along z, then uniform scale and 2D shift."""

    scale: float
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise UsageError(f"camera scale must be positive and finite, got {self.scale}")
        t = tuple(float(v) for v in self.translation)
        if len(t) != 2 or not all(np.isfinite(t)):
            raise UsageError(f"camera translation must be a finite 2-vector, got {self.translation}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "translation", t)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict) -> "WeakPerspectiveCamera":
        return cls(d["scale"], tuple(d["translation"]))


def project(x, camera: WeakPerspectiveCamera) -> np.ndarray:
    """Project points ``[..., 3]`` to normalized image coordinates ``[..., 2]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 3:
        raise UsageError(f"expected points with 3 coordinates, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite point passed to project")
    return camera.scale * x[..., :2] + np.asarray(camera.translation)


@dataclass
class FeatureMap:
    """Channel-first image ``[channels, height, width]``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise UsageError(f"feature map must be [C, H, W], got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def sample_bilinear(fmap: FeatureMap, uv) -> np.ndarray:
    """Bilinearly interpolate ``fmap`` at ``uv`` (``[..., 2]``) -> ``[..., C]``.

    Queries outside the pixel-centre lattice are clamped to the border.
    """
    if fmap.data.size == 0:
        raise UsageError("cannot sample an empty feature map")
    uv = np.asarray(uv, dtype=np.float64)
    lead = uv.shape[:-1]
    out, _ = PRIMITIVES["bilinear"].forward({}, fmap.data[None], uv.reshape(1, -1, 2))
    return out[0].reshape(lead + (fmap.channels,))
