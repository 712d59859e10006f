"""Photon-map projection of images into texture space and the weighted gather.

Every non-background pixel that hits the mesh deposits a photon at the
hit point's UV coordinates carrying the pixel color and a specular
falloff weight max(0, -n.r)^p; texels then average their k nearest
photons with inverse-distance decay on top of the falloff weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .render.raster import FragmentBuffer, RenderConfig, rasterize_fragments
from .scene.meshops import compute_vertex_normals
from .scene.types import Camera, Image, SceneError, TextureMap, TriMesh

logger = logging.getLogger(__name__)

DEFAULT_K = 8
DEFAULT_FALLOFF_P = 4.0
DISTANCE_EPSILON = 1e-6  # UV units


@dataclass(frozen=True)
class PhotonSet:
    uv: np.ndarray  # (P, 2) in [0, 1]^2
    color: np.ndarray  # (P, 3)
    weight: np.ndarray  # (P,) >= 0

    def __post_init__(self):
        if (self.weight < 0).any():
            raise SceneError("photon weights must be nonnegative")
        if self.uv.size and (self.uv.min() < -1e-9 or self.uv.max() > 1 + 1e-9):
            raise SceneError("photon UVs outside [0, 1]^2")

    def __len__(self) -> int:
        return self.uv.shape[0]


def falloff_weight(normal: np.ndarray, ray: np.ndarray, p: float) -> np.ndarray:
    """Specular falloff (max(0, -n.r))^p for unit normals and unit ray directions."""
    return np.maximum(0.0, -(normal * ray).sum(axis=-1)) ** p


def project_photons(image: Image, mesh: TriMesh, camera: Camera,
                    p: float = DEFAULT_FALLOFF_P,
                    fragments: FragmentBuffer | None = None,
                    extra_weights: np.ndarray | None = None) -> PhotonSet:
    """Project pixel colors onto the mesh; pixels missing the mesh drop out.

    extra_weights, when given per pixel (H, W), scale the falloff weights
    (used by callers that fold in additional confidence terms).
    """
    if fragments is None:
        fragments = rasterize_fragments(mesh, camera, RenderConfig(soft_sigma_px=0.0))
    covered = fragments.covered & ~image.background_mask
    rows, cols = np.nonzero(covered)
    if rows.size == 0:
        return PhotonSet(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0))

    tri = fragments.triangle[rows, cols]
    bary = fragments.bary[rows, cols]
    corners = mesh.triangles[tri]

    uv = np.einsum("pk,pkd->pd", bary, mesh.uvs[corners])
    pos = np.einsum("pk,pkd->pd", bary, mesh.vertices[corners])
    vnormals = compute_vertex_normals(mesh)
    nrm = np.einsum("pk,pkd->pd", bary, vnormals[corners])
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-30)

    center = camera.world_center()
    ray = pos - center
    ray /= np.maximum(np.linalg.norm(ray, axis=1, keepdims=True), 1e-30)

    weight = falloff_weight(nrm, ray, p)
    if extra_weights is not None:
        weight = weight * extra_weights[rows, cols]
    color = image.pixels[rows, cols]
    return PhotonSet(np.clip(uv, 0.0, 1.0), color, weight)


def gather_texture(photons: PhotonSet, k: int = DEFAULT_K, texture_size: int = 1024,
                   fill_color=(0.5, 0.5, 0.5),
                   distance_epsilon: float = DISTANCE_EPSILON) -> TextureMap:
    """Per texel, inverse-distance-weighted mean of the k nearest photons.

    Effective weight of a photon at distance d is weight / (d + epsilon);
    coverage is the per-texel sum of effective weights, so texels no
    photon can reach keep the fill color at coverage 0.
    """
    if k < 1:
        raise SceneError("gather requires k >= 1")
    s = texture_size
    fill = np.asarray(fill_color, dtype=np.float64)
    if len(photons) == 0:
        logger.warning("gather_texture called with an empty photon set")
        return TextureMap.filled(s, tuple(fill))

    centers_1d = (np.arange(s) + 0.5) / s
    cu, cv = np.meshgrid(centers_1d, centers_1d)
    texel_uv = np.stack([cu.ravel(), cv.ravel()], axis=1)

    tree = cKDTree(photons.uv)
    kq = min(k, len(photons))
    dist, idx = tree.query(texel_uv, k=kq, workers=-1)
    if kq == 1:
        dist = dist[:, None]
        idx = idx[:, None]

    w = photons.weight[idx] / (dist + distance_epsilon)
    wsum = w.sum(axis=1)
    colors = (w[:, :, None] * photons.color[idx]).sum(axis=1)
    covered = wsum > 0
    texels = np.tile(fill, (s * s, 1))
    texels[covered] = colors[covered] / wsum[covered, None]
    return TextureMap(np.clip(texels.reshape(s, s, 3), 0.0, 1.0),
                      wsum.reshape(s, s), tuple(fill))


@dataclass
class TexelChart:
    """UV-space rasterization of the mesh: per-texel triangle and barycentrics."""

    triangle: np.ndarray  # (S, S) int64, -1 where no chart covers the texel
    bary: np.ndarray  # (S, S, 3)

    @property
    def covered(self) -> np.ndarray:
        return self.triangle >= 0


def texel_chart(mesh: TriMesh, size: int) -> TexelChart:
    """Rasterize triangles in UV space at texel centers (lower index wins overlaps)."""
    tri_buf = np.full((size, size), -1, dtype=np.int64)
    bary_buf = np.zeros((size, size, 3))
    uv = mesh.uvs * size  # texel (i, j) center at (j + 0.5, i + 0.5)

    sv = uv[mesh.triangles]  # (m, 3, 2)
    area2 = ((sv[:, 1, 0] - sv[:, 0, 0]) * (sv[:, 2, 1] - sv[:, 0, 1])
             - (sv[:, 1, 1] - sv[:, 0, 1]) * (sv[:, 2, 0] - sv[:, 0, 0]))
    lo = np.clip(np.floor(sv.min(axis=1)).astype(np.int64), 0, size)
    hi = np.clip(np.ceil(sv.max(axis=1)).astype(np.int64), 0, size)

    for ti in range(mesh.num_triangles):
        if abs(area2[ti]) < 1e-14:
            continue
        x0, y0 = lo[ti]
        x1, y1 = hi[ti]
        if x1 <= x0 or y1 <= y0:
            continue
        px = np.arange(x0, x1) + 0.5
        py = np.arange(y0, y1) + 0.5
        pxg, pyg = np.meshgrid(px, py)
        a, b, c = sv[ti]
        w0 = (c[0] - b[0]) * (pyg - b[1]) - (c[1] - b[1]) * (pxg - b[0])
        w1 = (a[0] - c[0]) * (pyg - c[1]) - (a[1] - c[1]) * (pxg - c[0])
        w2 = (b[0] - a[0]) * (pyg - a[1]) - (b[1] - a[1]) * (pxg - a[0])
        bs = np.stack([w0, w1, w2], axis=-1) / area2[ti]
        inside = (bs >= 0.0).all(axis=-1) & (tri_buf[y0:y1, x0:x1] < 0)
        if not inside.any():
            continue
        tri_buf[y0:y1, x0:x1][inside] = ti
        bary_buf[y0:y1, x0:x1][inside] = bs[inside]

    return TexelChart(tri_buf, bary_buf)
