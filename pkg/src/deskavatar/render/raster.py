"""Hard rasterization pass: per-pixel front-most fragments.

Visibility is resolved here with a z-buffer; the differentiable shading
pass (diff.py) recomputes attribute values as functions of the scene
parameters given the frozen per-pixel triangle assignment produced here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scene.types import Camera, SceneError, TriMesh


@dataclass(frozen=True)
class RenderConfig:
    """Rasterizer knobs.

    soft_sigma_px: half-width scale of the smoothstep silhouette band;
    0 disables edge softening. znear: minimum camera-space depth.
    """

    soft_sigma_px: float = 1.0
    znear: float = 1e-6
    cull_backfaces: bool = True
    #: Triangles with screen area below this (px^2) are skipped: they are
    #: grazing slivers whose barycentric derivatives are ill-conditioned.
    min_screen_area2: float = 0.02


@dataclass
class FragmentBuffer:
    """Front-most surface sample per pixel.

    triangle is -1 for background pixels. Barycentric weights are
    perspective-correct (they interpolate object-space attributes exactly
    as a pixel-center ray intersection would).
    """

    triangle: np.ndarray  # (H, W) int64
    bary: np.ndarray  # (H, W, 3) float64
    depth: np.ndarray  # (H, W) float64, +inf where background

    @property
    def covered(self) -> np.ndarray:
        return self.triangle >= 0


def camera_space(vertices: np.ndarray, camera: Camera) -> np.ndarray:
    return vertices @ camera.rotation.T + camera.translation


def project_pixels(cam_pts: np.ndarray, camera: Camera) -> np.ndarray:
    z = cam_pts[:, 2]
    u = camera.fx * cam_pts[:, 0] / z + camera.cx
    v = camera.fy * cam_pts[:, 1] / z + camera.cy
    return np.stack([u, v], axis=1)


def rasterize_fragments(mesh: TriMesh, camera: Camera,
                        config: RenderConfig = RenderConfig()) -> FragmentBuffer:
    """Z-buffered scanline rasterization at pixel centers.

    Depth ties are broken by the lower triangle index (strict less-than
    test over an in-order triangle sweep), which keeps output deterministic.
    """
    if mesh.num_triangles == 0:
        raise SceneError("cannot rasterize an empty mesh")
    if not np.isfinite(mesh.vertices).all():
        raise SceneError("mesh vertices contain NaN/inf")

    h, w = camera.height, camera.width
    tri_buf = np.full((h, w), -1, dtype=np.int64)
    bary_buf = np.zeros((h, w, 3))
    depth_buf = np.full((h, w), np.inf)

    cam = camera_space(mesh.vertices, camera)
    z = cam[:, 2]
    screen = project_pixels(np.where(z[:, None] > config.znear, cam,
                                     np.array([0.0, 0.0, 1.0])), camera)

    tris = mesh.triangles
    front = (z[tris] > config.znear).all(axis=1)

    sv = screen[tris]  # (m, 3, 2)
    area2 = ((sv[:, 1, 0] - sv[:, 0, 0]) * (sv[:, 2, 1] - sv[:, 0, 1])
             - (sv[:, 1, 1] - sv[:, 0, 1]) * (sv[:, 2, 0] - sv[:, 0, 0]))
    min_area2 = max(config.min_screen_area2, 1e-12)
    if config.cull_backfaces:
        # Front faces of outward-oriented meshes wind negatively in
        # y-down screen coordinates.
        visible = front & (area2 < -min_area2)
    else:
        visible = front & (np.abs(area2) > min_area2)

    lo = np.floor(sv.min(axis=1)).astype(np.int64)
    hi = np.ceil(sv.max(axis=1)).astype(np.int64)
    lo[:, 0] = np.clip(lo[:, 0], 0, w)
    hi[:, 0] = np.clip(hi[:, 0], 0, w)
    lo[:, 1] = np.clip(lo[:, 1], 0, h)
    hi[:, 1] = np.clip(hi[:, 1], 0, h)
    nonempty = (hi[:, 0] > lo[:, 0]) & (hi[:, 1] > lo[:, 1])

    for ti in np.nonzero(visible & nonempty)[0]:
        x0, y0 = lo[ti]
        x1, y1 = hi[ti]
        px = np.arange(x0, x1) + 0.5
        py = np.arange(y0, y1) + 0.5
        pxg, pyg = np.meshgrid(px, py)

        a, b, c = sv[ti]
        w0 = (c[0] - b[0]) * (pyg - b[1]) - (c[1] - b[1]) * (pxg - b[0])
        w1 = (a[0] - c[0]) * (pyg - c[1]) - (a[1] - c[1]) * (pxg - c[0])
        w2 = (b[0] - a[0]) * (pyg - a[1]) - (b[1] - a[1]) * (pxg - a[0])
        # Signed normalization (w0 + w1 + w2 == area2) yields barycentric
        # weights regardless of winding; inside means all weights >= 0.
        bs = np.stack([w0, w1, w2], axis=-1) / area2[ti]
        inside = (bs >= 0.0).all(axis=-1)
        if not inside.any():
            continue

        zv = z[tris[ti]]
        pw = bs / zv  # screen bary over vertex depth
        pw_sum = pw.sum(axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            b3 = pw / pw_sum[..., None]
            depth = 1.0 / pw_sum  # perspective-correct interpolated z
        closer = inside & (depth < depth_buf[y0:y1, x0:x1])
        if not closer.any():
            continue
        tri_buf[y0:y1, x0:x1][closer] = ti
        bary_buf[y0:y1, x0:x1][closer] = b3[closer]
        depth_buf[y0:y1, x0:x1][closer] = depth[closer]

    return FragmentBuffer(tri_buf, bary_buf, depth_buf)


@dataclass
class SilhouetteBand:
    """Pixels near the coverage boundary and their silhouette triangles.

    in_pix/out_pix are flat pixel indices of covered/uncovered band
    pixels; *_tri holds the triangle whose projected edges approximate
    the silhouette near that pixel. half_width is the smoothstep support
    in pixels.
    """

    in_pix: np.ndarray
    in_tri: np.ndarray
    out_pix: np.ndarray
    out_tri: np.ndarray
    half_width: float


def silhouette_band(frag: FragmentBuffer, config: RenderConfig) -> SilhouetteBand | None:
    """Locate the soft-silhouette band around the hard coverage mask.

    scipy's EDT gives, for every nonzero input pixel, the nearest zero
    pixel; running it on both the mask and its complement yields the
    nearest covered pixel of uncovered ones and vice versa.
    """
    if config.soft_sigma_px <= 0:
        return None
    from scipy import ndimage

    covered = frag.covered
    if covered.all() or not covered.any():
        return None

    half_width = 2.0 * config.soft_sigma_px
    reach = half_width + 1.5
    h, w = covered.shape

    dist_out, idx_out = ndimage.distance_transform_edt(~covered, return_indices=True)
    dist_in, idx_in = ndimage.distance_transform_edt(covered, return_indices=True)

    out_rc = np.nonzero((~covered) & (dist_out <= reach) & (dist_out > 0))
    out_pix = out_rc[0] * w + out_rc[1]
    out_tri = frag.triangle[idx_out[0][out_rc], idx_out[1][out_rc]]

    # Covered band pixel -> its nearest uncovered pixel -> that pixel's
    # nearest covered pixel, whose triangle lies on the silhouette.
    in_rc = np.nonzero(covered & (dist_in <= reach))
    in_pix = in_rc[0] * w + in_rc[1]
    bg_r = idx_in[0][in_rc]
    bg_c = idx_in[1][in_rc]
    in_tri = frag.triangle[idx_out[0][bg_r, bg_c], idx_out[1][bg_r, bg_c]]

    return SilhouetteBand(in_pix, in_tri, out_pix, out_tri, half_width)
