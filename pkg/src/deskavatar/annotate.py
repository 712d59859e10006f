"""Pluggable landmark tracking and semantic segmentation.

Both capabilities are injected: callers hand the provider an image plus,
when the image was rendered in-process, a RenderContext describing the
scene it came from. The bundled oracle providers consume only the
context, which makes every downstream stage testable without neural
networks while keeping the call sites provider-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .render.project import project_points
from .render.raster import FragmentBuffer, RenderConfig, rasterize_fragments
from .scene.io import FORMAT_VERSION, ParseError, _LineReader, check_magic, _fmt
from .scene.types import Camera, Image, NUM_REGIONS, REGION_BACKGROUND, SceneError, TriMesh

CATALOG_MAGIC = "DALMC"

#: Depth slack when testing anchor visibility against the fragment buffer.
OCCLUSION_DEPTH_TOL = 1e-4


@dataclass(frozen=True)
class LandmarkObservation:
    position: np.ndarray  # (2,) pixels, sub-pixel
    confidence: float  # in [0, 1]
    on_image: bool = True


@dataclass(frozen=True)
class LandmarkSet:
    entries: dict[str, LandmarkObservation]

    def usable(self) -> dict[str, LandmarkObservation]:
        return {k: v for k, v in self.entries.items() if v.confidence > 0}

    def positions(self, ids) -> np.ndarray:
        return np.array([self.entries[i].position for i in ids])


@dataclass(frozen=True)
class SegMap:
    labels: np.ndarray  # (H, W) int64

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        lab.flags.writeable = False
        object.__setattr__(self, "labels", lab)
        if lab.min(initial=0) < 0 or lab.max(initial=0) >= NUM_REGIONS:
            raise SceneError("segmentation labels outside the region catalog")

    def one_hot(self) -> np.ndarray:
        """(H, W, C) indicator encoding; per-pixel rows sum to exactly 1."""
        h, w = self.labels.shape
        out = np.zeros((h, w, NUM_REGIONS))
        rows, cols = np.indices((h, w))
        out[rows, cols, self.labels] = 1.0
        return out


@dataclass(frozen=True)
class RenderContext:
    """Provenance of a synthetically rendered image, consumed by oracles."""

    mesh: TriMesh
    camera: Camera
    fragments: FragmentBuffer | None = None


@runtime_checkable
class LandmarkProvider(Protocol):
    #: Providers that work purely geometrically (the oracles) skip pixels.
    needs_pixels: bool
    #: Exclusive providers are serialized by the pipeline.
    concurrent_safe: bool

    def landmarks(self, image: Image | None, context: RenderContext | None) -> LandmarkSet:
        ...


@runtime_checkable
class SegmentationProvider(Protocol):
    needs_pixels: bool
    concurrent_safe: bool

    def segmentation(self, image: Image | None, context: RenderContext | None) -> SegMap:
        ...


def oracle_landmarks(mesh: TriMesh, camera: Camera, noise_sigma: float = 0.0,
                     rng: np.random.Generator | None = None,
                     fragments: FragmentBuffer | None = None) -> LandmarkSet:
    """Project every landmark anchor; confidence 0 for occluded/off-image ones.

    Occlusion is a depth test against the fragment buffer with tolerance
    OCCLUSION_DEPTH_TOL. With noise_sigma = 0 the positions agree exactly
    with project_points, which grounds the alignment tests.
    """
    if not mesh.landmark_anchors:
        raise SceneError("mesh carries no landmark anchors")
    if fragments is None:
        fragments = rasterize_fragments(mesh, camera, RenderConfig(soft_sigma_px=0.0))

    tri_idx = np.array([a.triangle for a in mesh.landmark_anchors], dtype=np.int64)
    bary = np.array([a.bary for a in mesh.landmark_anchors])
    pix, valid = project_points(tri_idx, mesh, camera, bary=bary)

    pts3 = np.einsum("pk,pkd->pd", bary, mesh.vertices[mesh.triangles[tri_idx]])
    cam_pts = pts3 @ camera.rotation.T + camera.translation
    depth = cam_pts[:, 2]
    cam_corners = (mesh.vertices[mesh.triangles] @ camera.rotation.T
                   + camera.translation)  # (m, 3, 3)

    h, w = camera.height, camera.width
    entries: dict[str, LandmarkObservation] = {}
    if rng is None:
        rng = np.random.default_rng(0)
    for i, anchor in enumerate(mesh.landmark_anchors):
        pos = pix[i].copy()
        on_image = bool(valid[i] and 0 <= pos[0] < w and 0 <= pos[1] < h)
        confidence = 1.0 if on_image else 0.0
        if on_image:
            col = int(np.clip(np.floor(pos[0]), 0, w - 1))
            row = int(np.clip(np.floor(pos[1]), 0, h - 1))
            frag_tri = int(fragments.triangle[row, col])
            if frag_tri >= 0 and frag_tri != anchor.triangle:
                # Depth of the fragment's triangle plane along this anchor's
                # exact ray; comparing along one ray removes surface-slope
                # bias so the 1e-4 tolerance is meaningful.
                ray = np.array([(pos[0] - camera.cx) / camera.fx,
                                (pos[1] - camera.cy) / camera.fy, 1.0])
                c0, c1, c2 = cam_corners[frag_tri]
                n = np.cross(c1 - c0, c2 - c0)
                denom = n @ ray
                if abs(denom) > 1e-14:
                    z_along = (n @ c0) / denom  # ray parameter equals z here
                    if depth[i] > z_along + OCCLUSION_DEPTH_TOL:
                        confidence = 0.0
        if noise_sigma > 0 and confidence > 0:
            pos = pos + rng.normal(0.0, noise_sigma, 2)
        entries[anchor.landmark_id] = LandmarkObservation(pos, confidence, on_image)
    return LandmarkSet(entries)


def oracle_segmentation(mesh: TriMesh, camera: Camera,
                        fragments: FragmentBuffer | None = None) -> SegMap:
    """Rasterized region labels: majority label of the fragment triangle's corners."""
    if fragments is None:
        fragments = rasterize_fragments(mesh, camera, RenderConfig(soft_sigma_px=0.0))
    labels = np.full(fragments.triangle.shape, REGION_BACKGROUND, dtype=np.int64)
    covered = fragments.covered
    tri = fragments.triangle[covered]
    corner_labels = mesh.region_labels[mesh.triangles[tri]]  # (K, 3)
    # Majority of the three corners; ties resolved toward the lowest label id.
    counts = np.zeros((tri.shape[0], NUM_REGIONS), dtype=np.int64)
    rows = np.arange(tri.shape[0])
    for k in range(3):
        counts[rows, corner_labels[:, k]] += 1
    labels[covered] = counts.argmax(axis=1)
    return SegMap(labels)


class OracleLandmarkTracker:
    """Context-driven tracker; optional Gaussian pixel noise emulates tracker error."""

    needs_pixels = False
    concurrent_safe = True

    def __init__(self, noise_sigma: float = 0.0, seed: int = 0):
        self.noise_sigma = noise_sigma
        self._rng = np.random.default_rng(seed)

    def landmarks(self, image: Image | None, context: RenderContext | None) -> LandmarkSet:
        if context is None:
            raise SceneError("oracle landmark tracker requires a render context")
        return oracle_landmarks(context.mesh, context.camera, self.noise_sigma,
                                self._rng, context.fragments)


class OracleSegmenter:
    needs_pixels = False
    concurrent_safe = True

    def segmentation(self, image: Image | None, context: RenderContext | None) -> SegMap:
        if context is None:
            raise SceneError("oracle segmenter requires a render context")
        return oracle_segmentation(context.mesh, context.camera, context.fragments)


@dataclass(frozen=True)
class CatalogEntry:
    landmark_id: str
    name: str
    triangle: int
    bary: np.ndarray
    non_sliding: bool


@dataclass(frozen=True)
class LandmarkCatalog:
    """Template anchors for the fixed landmark id set, mirroring hand-labeling."""

    entries: tuple[CatalogEntry, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.entries)

    def non_sliding_ids(self) -> list[str]:
        return [e.landmark_id for e in self.entries if e.non_sliding]

    def save(self, path: str | Path) -> None:
        lines = [f"{CATALOG_MAGIC} {FORMAT_VERSION}", str(len(self.entries))]
        for e in self.entries:
            lines.append(" ".join([
                e.landmark_id, e.name, str(e.triangle),
                _fmt(e.bary[0]), _fmt(e.bary[1]), _fmt(e.bary[2]),
                "1" if e.non_sliding else "0",
            ]))
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path: str | Path) -> "LandmarkCatalog":
        reader = _LineReader(Path(path).read_bytes())
        check_magic(reader, CATALOG_MAGIC)
        (count,) = reader.ints(1, "catalog count")
        entries = []
        for _ in range(count):
            parts = reader.fields(7, "catalog entry")
            try:
                entries.append(CatalogEntry(
                    parts[0], parts[1], int(parts[2]),
                    np.array([float(parts[3]), float(parts[4]), float(parts[5])]),
                    parts[6] == "1"))
            except ValueError:
                raise ParseError("invalid catalog entry", reader.offset) from None
        return LandmarkCatalog(tuple(entries))
