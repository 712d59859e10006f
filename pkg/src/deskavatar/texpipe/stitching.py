"""Multi-view texture stitching, texture-space alignment, and blending."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..annotate import NUM_REGIONS, SegMap
from ..flowwarp import FlowField, FlowSolveConfig, solve_flow
from ..scene.meshops import compute_vertex_normals
from ..scene.types import Camera, REGION_BACKGROUND, SceneError, TextureMap, TriMesh
from ..texproject import TexelChart, texel_chart

logger = logging.getLogger(__name__)


def orthogonality_map(mesh: TriMesh, camera: Camera, size: int,
                      chart: TexelChart | None = None) -> np.ndarray:
    """Per-texel -n.r for one view; -inf where no UV chart covers the texel.

    Negative values mean the surface faces away from the camera there and
    the view is unusable for that texel.
    """
    if chart is None:
        chart = texel_chart(mesh, size)
    out = np.full((size, size), -np.inf)
    rows, cols = np.nonzero(chart.covered)
    tri = chart.triangle[rows, cols]
    bary = chart.bary[rows, cols]
    corners = mesh.triangles[tri]
    pos = np.einsum("pk,pkd->pd", bary, mesh.vertices[corners])
    vnormals = compute_vertex_normals(mesh)
    nrm = np.einsum("pk,pkd->pd", bary, vnormals[corners])
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-30)
    ray = pos - camera.world_center()
    ray /= np.maximum(np.linalg.norm(ray, axis=1, keepdims=True), 1e-30)
    out[rows, cols] = -(nrm * ray).sum(axis=1)
    return out


def texture_space_segmentation(mesh: TriMesh, size: int,
                               chart: TexelChart | None = None) -> SegMap:
    """Region labels in texture space (majority corner label per covered texel)."""
    if chart is None:
        chart = texel_chart(mesh, size)
    labels = np.full((size, size), REGION_BACKGROUND, dtype=np.int64)
    rows, cols = np.nonzero(chart.covered)
    tri = chart.triangle[rows, cols]
    corner_labels = mesh.region_labels[mesh.triangles[tri]]
    counts = np.zeros((tri.shape[0], NUM_REGIONS), dtype=np.int64)
    r = np.arange(tri.shape[0])
    for k in range(3):
        counts[r, corner_labels[:, k]] += 1
    labels[rows, cols] = counts.argmax(axis=1)
    return SegMap(labels)


def landmark_texel_positions(mesh: TriMesh, size: int) -> dict[str, np.ndarray]:
    """Texture-space (texel-coordinate) positions of the mesh landmark anchors."""
    out = {}
    for a in mesh.landmark_anchors:
        uv = a.bary @ mesh.uvs[mesh.triangles[a.triangle]]
        out[a.landmark_id] = uv * size
    return out


@dataclass
class StitchResult:
    texture: TextureMap
    source_view: np.ndarray  # (S, S) int64, -1 where no view usable


def stitch(textures: list[TextureMap], orthogonality: list[np.ndarray],
           fill_color=(0.5, 0.5, 0.5)) -> StitchResult:
    """Per texel, copy from the view with the most orthogonal geometry.

    Usable means positive orthogonality and nonzero coverage; ties break
    toward the lower view index (strict greater-than sweep in order).
    """
    if not textures:
        raise SceneError("stitch requires at least one view texture")
    s = textures[0].size
    best = np.full((s, s), -np.inf)
    source = np.full((s, s), -1, dtype=np.int64)
    for i, (tex, orth) in enumerate(zip(textures, orthogonality)):
        usable = (orth > 0) & (tex.coverage > 0)
        better = usable & (orth > best)
        best[better] = orth[better]
        source[better] = i

    texels = np.tile(np.asarray(fill_color, dtype=np.float64), (s, s, 1))
    coverage = np.zeros((s, s))
    for i, tex in enumerate(textures):
        sel = source == i
        texels[sel] = tex.texels[sel]
        coverage[sel] = tex.coverage[sel]
    return StitchResult(TextureMap(texels, coverage, tuple(fill_color)), source)


def align_textures(moving: TextureMap, seg_moving: SegMap, seg_reference: SegMap,
                   moving_landmarks: dict[str, np.ndarray],
                   reference_landmarks: dict[str, np.ndarray],
                   mole_pairs: list[tuple[np.ndarray, np.ndarray]] | None = None,
                   flow_config: FlowSolveConfig | None = None) -> FlowField:
    """Texture-space flow aligning `moving` with a reference texture.

    Landmark terms pin the flow at each moving-texture landmark to the
    displacement (moving - reference), evaluated at the pre-warp location;
    mole pairs (reference_center, moving_center) in texel coordinates add
    extra terms the same way. Landmarks missing from either side (e.g.
    outside a partial texture's coverage) are skipped.
    """
    positions = []
    displacements = []
    for lid, pos in moving_landmarks.items():
        ref = reference_landmarks.get(lid)
        if ref is None:
            continue
        positions.append(np.asarray(pos, dtype=np.float64))
        displacements.append(np.asarray(pos, dtype=np.float64) - np.asarray(ref))
    for ref_center, cand_center in mole_pairs or []:
        positions.append(np.asarray(cand_center, dtype=np.float64))
        displacements.append(np.asarray(cand_center) - np.asarray(ref_center))

    cfg = flow_config or FlowSolveConfig()
    return solve_flow(seg_moving, seg_reference, cfg,
                      point_positions=np.array(positions) if positions else None,
                      point_displacements=np.array(displacements) if displacements else None)


def angular_adjacency(angles_deg: list[float]) -> list[list[int]]:
    """Neighbors in the angular ordering (front / three-quarters / profile layout)."""
    order = np.argsort(angles_deg)
    adjacency: list[list[int]] = [[] for _ in angles_deg]
    for k, idx in enumerate(order):
        if k > 0:
            adjacency[idx].append(int(order[k - 1]))
        if k + 1 < len(order):
            adjacency[idx].append(int(order[k + 1]))
    return adjacency


def blend_textures(textures: list[TextureMap], orthogonality: list[np.ndarray],
                   adjacency: list[list[int]], falloff_p: float = 4.0,
                   fill_color=(0.5, 0.5, 0.5)) -> TextureMap:
    """Specular-falloff-weighted average with the adjacent-view ratio rule.

    weight_v = max(0, orth_v)^p, multiplied by min over adjacent views of
    orth_v / orth_adj whenever that ratio is below one (the smaller ratio
    wins when both neighbors apply). Views with no data at a texel
    (coverage 0) or unusable orthogonality contribute nothing.
    """
    s = textures[0].size
    weights = []
    for v, (tex, orth) in enumerate(zip(textures, orthogonality)):
        w = np.where(orth > 0, np.maximum(orth, 0.0) ** falloff_p, 0.0)
        ratio = np.ones((s, s))
        for adj in adjacency[v]:
            adj_orth = orthogonality[adj]
            valid = (adj_orth > 0) & (orth > 0)
            r = np.ones((s, s))
            r[valid] = orth[valid] / adj_orth[valid]
            ratio = np.minimum(ratio, np.clip(r, 0.0, 1.0))
        w = w * ratio * (tex.coverage > 0)
        weights.append(w)

    wsum = np.sum(weights, axis=0)
    texels = np.zeros((s, s, 3))
    for tex, w in zip(textures, weights):
        texels += tex.texels * w[:, :, None]
    covered = wsum > 0
    out = np.tile(np.asarray(fill_color, dtype=np.float64), (s, s, 1))
    out[covered] = texels[covered] / wsum[covered, None]
    return TextureMap(np.clip(out, 0.0, 1.0), wsum, tuple(fill_color))
