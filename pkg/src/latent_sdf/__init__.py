"""Signed-distance reconstruction from multi-view, multi-pose observations.

Per-vertex latent codes are pooled from pixel-aligned image features,
anchored on a canonical template mesh, diffused into a voxel volume and
decoded to signed distances.
"""

__version__ = "0.1.0"
