"""Geometric and image domain types, serialization, and mesh utilities."""

from .types import (
    REGION_LABELS,
    REGION_BACKGROUND,
    REGION_SKIN,
    REGION_NOSE,
    REGION_UPPER_LIP,
    REGION_LOWER_LIP,
    REGION_LEFT_BROW,
    REGION_RIGHT_BROW,
    REGION_EYES,
    Camera,
    Image,
    LandmarkAnchor,
    SHLighting,
    TextureMap,
    TriMesh,
    SceneError,
)
from .meshops import (
    bounding_box_diagonal,
    compute_vertex_normals,
    edge_list,
    evaluate_anchors,
    one_ring_neighbors,
    vertex_tangent_frames,
)
from . import io

__all__ = [
    "REGION_LABELS",
    "REGION_BACKGROUND",
    "REGION_SKIN",
    "REGION_NOSE",
    "REGION_UPPER_LIP",
    "REGION_LOWER_LIP",
    "REGION_LEFT_BROW",
    "REGION_RIGHT_BROW",
    "REGION_EYES",
    "Camera",
    "Image",
    "LandmarkAnchor",
    "SHLighting",
    "TextureMap",
    "TriMesh",
    "SceneError",
    "bounding_box_diagonal",
    "compute_vertex_normals",
    "edge_list",
    "evaluate_anchors",
    "one_ring_neighbors",
    "vertex_tangent_frames",
    "io",
]
