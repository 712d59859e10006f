"""Core value types shared by every stage of the engine.

All types are immutable after construction (arrays are set non-writeable);
derived state is produced by building new values, never by mutation, so
instances are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

# Fixed semantic region catalog. Hair and body are merged into background
# at the type level; every segmentation in the system uses these ids.
REGION_BACKGROUND = 0
REGION_SKIN = 1
REGION_NOSE = 2
REGION_UPPER_LIP = 3
REGION_LOWER_LIP = 4
REGION_LEFT_BROW = 5
REGION_RIGHT_BROW = 6
REGION_EYES = 7

REGION_LABELS: Mapping[int, str] = {
    REGION_BACKGROUND: "background",
    REGION_SKIN: "skin",
    REGION_NOSE: "nose",
    REGION_UPPER_LIP: "upper-lip",
    REGION_LOWER_LIP: "lower-lip",
    REGION_LEFT_BROW: "left-brow",
    REGION_RIGHT_BROW: "right-brow",
    REGION_EYES: "eyes",
}

NUM_REGIONS = len(REGION_LABELS)

_BARY_TOL = 1e-9
_ORTHO_TOL = 1e-9


class SceneError(ValueError):
    """Raised when a value violates a domain-type invariant."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LandmarkAnchor:
    """A named surface point: triangle index plus barycentric weights."""

    triangle: int
    bary: np.ndarray  # (3,), nonnegative, sums to 1
    landmark_id: str


@dataclass(frozen=True)
class TriMesh:
    """Indexed triangle surface with UVs, region labels, and landmark anchors."""

    vertices: np.ndarray  # (n, 3) float64, scene units
    triangles: np.ndarray  # (m, 3) int64
    uvs: np.ndarray  # (n, 2) float64 in [0, 1]^2
    region_labels: np.ndarray  # (n,) int64, ids from REGION_LABELS
    landmark_anchors: tuple[LandmarkAnchor, ...] = ()

    def __post_init__(self):
        v = _freeze(np.asarray(self.vertices, dtype=np.float64))
        t = _freeze(np.asarray(self.triangles, dtype=np.int64))
        uv = _freeze(np.asarray(self.uvs, dtype=np.float64))
        labels = _freeze(np.asarray(self.region_labels, dtype=np.int64))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "uvs", uv)
        object.__setattr__(self, "region_labels", labels)
        object.__setattr__(self, "landmark_anchors", tuple(self.landmark_anchors))

        if v.ndim != 2 or v.shape[1] != 3:
            raise SceneError(f"vertices must be (n, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise SceneError(f"triangles must be (m, 3), got {t.shape}")
        if uv.shape != (v.shape[0], 2):
            raise SceneError(f"uvs must be (n, 2) matching vertices, got {uv.shape}")
        if labels.shape != (v.shape[0],):
            raise SceneError("region_labels must be per-vertex")
        if not np.isfinite(v).all():
            raise SceneError("vertices contain non-finite values")
        if t.size and (t.min() < 0 or t.max() >= v.shape[0]):
            raise SceneError("triangle indices out of range")
        if uv.size and (uv.min() < -1e-12 or uv.max() > 1 + 1e-12):
            raise SceneError("UVs must lie in [0, 1]^2")
        if labels.size and not np.isin(labels, list(REGION_LABELS)).all():
            raise SceneError("region label ids outside the fixed catalog")

        seen: set[str] = set()
        for a in self.landmark_anchors:
            b = np.asarray(a.bary, dtype=np.float64)
            if a.triangle < 0 or a.triangle >= t.shape[0]:
                raise SceneError(f"anchor {a.landmark_id!r}: triangle index out of range")
            if b.shape != (3,) or (b < -_BARY_TOL).any() or abs(b.sum() - 1.0) > _BARY_TOL:
                raise SceneError(f"anchor {a.landmark_id!r}: invalid barycentric weights")
            if a.landmark_id in seen:
                raise SceneError(f"duplicate landmark id {a.landmark_id!r}")
            seen.add(a.landmark_id)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """New mesh with replaced vertex positions (topology/attributes shared)."""
        return TriMesh(vertices, self.triangles, self.uvs, self.region_labels,
                       self.landmark_anchors)

    def anchor_map(self) -> dict[str, LandmarkAnchor]:
        return {a.landmark_id: a for a in self.landmark_anchors}


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels, extrinsics mapping world to camera.

    Camera space looks down +z; a world point x maps to rotation @ x + translation,
    then projects to (fx * X/Z + cx, fy * Y/Z + cy).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) orthonormal
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        r = _freeze(np.asarray(self.rotation, dtype=np.float64))
        t = _freeze(np.asarray(self.translation, dtype=np.float64))
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if r.shape != (3, 3) or t.shape != (3,):
            raise SceneError("extrinsics must be a 3x3 rotation and 3-vector translation")
        if np.abs(r @ r.T - np.eye(3)).max() > _ORTHO_TOL:
            raise SceneError("camera rotation is not orthonormal (R R^T != I within 1e-9)")
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise SceneError("image size must be positive")

    def with_extrinsics(self, rotation: np.ndarray, translation: np.ndarray) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, rotation, translation,
                      self.width, self.height)

    def world_center(self) -> np.ndarray:
        """Camera center in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.translation

    @staticmethod
    def look_at(eye, target, up, fx: float, fy: float, width: int, height: int,
                cx: float | None = None, cy: float | None = None) -> "Camera":
        """Camera at eye looking toward target; +y in camera space points down."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        upv = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, upv)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rotation = np.stack([right, down, fwd, ])
        # Re-orthonormalize to meet the 1e-9 invariant.
        u_mat, _, vt = np.linalg.svd(rotation)
        rotation = u_mat @ vt
        translation = -rotation @ eye
        return Camera(fx, fy, width / 2 if cx is None else cx,
                      height / 2 if cy is None else cy,
                      rotation, translation, width, height)


@dataclass(frozen=True)
class Image:
    """RGB image in [0,1] with a background mask (True = background pixel)."""

    pixels: np.ndarray  # (H, W, 3) float64
    background_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        p = _freeze(np.asarray(self.pixels, dtype=np.float64))
        m = _freeze(np.asarray(self.background_mask, dtype=bool))
        object.__setattr__(self, "pixels", p)
        object.__setattr__(self, "background_mask", m)
        if p.ndim != 3 or p.shape[2] != 3:
            raise SceneError(f"pixels must be (H, W, 3), got {p.shape}")
        if m.shape != p.shape[:2]:
            raise SceneError("background mask dimensions disagree with pixels")
        if p.size and (p.min() < -1e-12 or p.max() > 1 + 1e-12):
            raise SceneError("pixel values must be clamped to [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class TextureMap:
    """Square texture with per-texel coverage weights (0 = never written)."""

    texels: np.ndarray  # (S, S, 3) float64 in [0,1]
    coverage: np.ndarray  # (S, S) float64 >= 0
    fill_color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        t = _freeze(np.asarray(self.texels, dtype=np.float64))
        c = _freeze(np.asarray(self.coverage, dtype=np.float64))
        object.__setattr__(self, "texels", t)
        object.__setattr__(self, "coverage", c)
        object.__setattr__(self, "fill_color", tuple(float(x) for x in self.fill_color))
        s = t.shape[0]
        if t.ndim != 3 or t.shape != (s, s, 3):
            raise SceneError(f"texels must be square (S, S, 3), got {t.shape}")
        if s & (s - 1) != 0 or s == 0:
            raise SceneError(f"texture size must be a power of two, got {s}")
        if c.shape != (s, s):
            raise SceneError("coverage dimensions disagree with texels")
        if c.size and c.min() < 0:
            raise SceneError("coverage weights must be nonnegative")
        uncovered = c == 0
        if uncovered.any():
            fill = np.array(self.fill_color)
            if np.abs(t[uncovered] - fill).max() > 1e-12:
                raise SceneError("texels with zero coverage must equal the fill color")

    @property
    def size(self) -> int:
        return self.texels.shape[0]

    @staticmethod
    def filled(size: int, fill_color=(0.5, 0.5, 0.5)) -> "TextureMap":
        texels = np.broadcast_to(np.asarray(fill_color, dtype=np.float64),
                                 (size, size, 3)).copy()
        return TextureMap(texels, np.zeros((size, size)), fill_color)

    @staticmethod
    def constant(size: int, color) -> "TextureMap":
        """Fully covered constant-color texture."""
        texels = np.broadcast_to(np.asarray(color, dtype=np.float64),
                                 (size, size, 3)).copy()
        return TextureMap(texels, np.ones((size, size)), tuple(np.asarray(color, dtype=float)))


#: Real spherical-harmonic basis constants for order 2 (9 terms), in the order
#: Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22.
SH_C = (
    0.28209479177387814,  # Y00
    0.4886025119029199,   # Y1-1 * y
    0.4886025119029199,   # Y10  * z
    0.4886025119029199,   # Y11  * x
    1.0925484305920792,   # Y2-2 * xy
    1.0925484305920792,   # Y2-1 * yz
    0.31539156525252005,  # Y20  * (3z^2 - 1)
    1.0925484305920792,   # Y21  * xz
    0.5462742152960396,   # Y22  * (x^2 - y^2)
)


@dataclass(frozen=True)
class SHLighting:
    """Order-2 spherical-harmonic lighting: 9 coefficients per RGB channel."""

    coeffs: np.ndarray  # (9, 3) float64
    ambient_only: bool = False

    def __post_init__(self):
        c = _freeze(np.asarray(self.coeffs, dtype=np.float64))
        object.__setattr__(self, "coeffs", c)
        if c.shape != (9, 3):
            raise SceneError(f"SH coefficients must be (9, 3), got {c.shape}")
        if self.ambient_only and np.abs(c[1:]).max() > 0:
            raise SceneError("ambient_only lighting must have zero non-ambient coefficients")

    @staticmethod
    def ambient(intensity: float | Sequence[float] = 1.0) -> "SHLighting":
        """Lighting whose irradiance is a constant, independent of the normal."""
        rgb = np.broadcast_to(np.asarray(intensity, dtype=np.float64), (3,))
        coeffs = np.zeros((9, 3))
        coeffs[0] = rgb / SH_C[0]
        return SHLighting(coeffs, ambient_only=True)
