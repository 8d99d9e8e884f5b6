"""Orthoplanes: stacks of axis-aligned feature planes as a 3D scene representation.

Also provides tri-plane and dense-voxel baselines, an MLP decoder, volume
rendering with hand-written reverse passes, skeleton-driven warps and a
single-scene fitting loop.
"""
from .codebook import (PlaneGroupSet, TriPlane, VoxelGrid, as_orthoplanes, backprop_query,
                       make_representation, param_count, query, query_orthoplanes, query_triplane,
                       query_voxel)
from .decoder import MlpDecoder, sdf_to_density
from .estimator import OrthoplanesRegressor
from .field import NeuralField
from .renderer import Camera, SamplingConfig, composite, render_image, render_rays
from ._validation import DatasetError, DegenerateBlendError, InvalidInputError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "Camera", "DatasetError", "DegenerateBlendError", "InvalidInputError", "MlpDecoder", "NeuralField",
    "NumericalError", "OrthoplanesRegressor", "PlaneGroupSet", "SamplingConfig", "TriPlane", "VoxelGrid",
    "as_orthoplanes", "backprop_query", "composite", "make_representation", "param_count", "query",
    "query_orthoplanes", "query_triplane", "query_voxel", "render_image", "render_rays", "sdf_to_density",
]
