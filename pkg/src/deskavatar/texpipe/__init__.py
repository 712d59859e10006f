"""Texture pipeline: stitching, alignment, blending, de-lighting, PCA cleanup."""

from .stitching import (
    StitchResult,
    angular_adjacency,
    align_textures,
    blend_textures,
    orthogonality_map,
    stitch,
    texture_space_segmentation,
    landmark_texel_positions,
)
from .moles import MoleSet, Mole, correspond_moles, detect_moles
from .delight import DelightConfig, DelightResult, delight_inverse_render
from .frequency import frequency_split, gaussian_kernel_1d
from .basis import (
    AlbedoBasis,
    build_albedo_basis,
    ignore_mask_from_labels,
    load_albedo_basis,
    pca_project,
    save_albedo_basis,
)

__all__ = [
    "StitchResult",
    "angular_adjacency",
    "align_textures",
    "blend_textures",
    "orthogonality_map",
    "stitch",
    "texture_space_segmentation",
    "landmark_texel_positions",
    "MoleSet",
    "Mole",
    "correspond_moles",
    "detect_moles",
    "DelightConfig",
    "DelightResult",
    "delight_inverse_render",
    "frequency_split",
    "gaussian_kernel_1d",
    "AlbedoBasis",
    "build_albedo_basis",
    "ignore_mask_from_labels",
    "load_albedo_basis",
    "pca_project",
    "save_albedo_basis",
]
