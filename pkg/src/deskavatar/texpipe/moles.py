"""Mole detection and correspondence for texture-space landmark terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..scene.types import TextureMap

DEFAULT_WINDOW = 31
DEFAULT_DARK_MARGIN = 0.08  # luminance below the window mean, in [0,1]
DEFAULT_AREA_THRESHOLD = 6  # texels
DEFAULT_AREA_RATIO = 2.0
DEFAULT_DISTANCE_CAP = 0.08  # UV units

# 4-connectivity for connected components.
_CONN4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class Mole:
    center_uv: np.ndarray  # (2,) in [0,1]^2
    area: int  # texels

    def center_texels(self, size: int) -> np.ndarray:
        return self.center_uv * size


@dataclass(frozen=True)
class MoleSet:
    moles: tuple[Mole, ...]

    def __len__(self) -> int:
        return len(self.moles)


def detect_moles(texture: TextureMap, window: int = DEFAULT_WINDOW,
                 dark_margin: float = DEFAULT_DARK_MARGIN,
                 area_threshold: int = DEFAULT_AREA_THRESHOLD) -> MoleSet:
    """Dark connected components against the local window mean.

    A texel is dark when its luminance falls more than dark_margin below
    the mean luminance of the square window centered on it; 4-connected
    components larger than area_threshold become moles (centers are
    component centroids). Uncovered texels never participate.
    """
    lum = texture.texels.mean(axis=2)
    covered = texture.coverage > 0
    local_mean = ndimage.uniform_filter(lum, size=window, mode="nearest")
    dark = covered & (lum < local_mean - dark_margin)

    labels, count = ndimage.label(dark, structure=_CONN4)
    if count == 0:
        return MoleSet(())
    areas = ndimage.sum_labels(np.ones_like(lum), labels, index=np.arange(1, count + 1))
    centroids = ndimage.center_of_mass(np.ones_like(lum), labels,
                                       index=np.arange(1, count + 1))
    s = texture.size
    moles = []
    for area, (cy, cx) in zip(areas, centroids):
        if area > area_threshold:
            # centroid in texel coords -> UV (texel (i, j) center at +0.5)
            moles.append(Mole(np.array([(cx + 0.5) / s, (cy + 0.5) / s]), int(area)))
    moles.sort(key=lambda m: (m.center_uv[1], m.center_uv[0]))
    return MoleSet(tuple(moles))


def correspond_moles(reference: MoleSet, candidate: MoleSet, nose_tip_uv,
                     area_ratio: float = DEFAULT_AREA_RATIO,
                     distance_cap: float = DEFAULT_DISTANCE_CAP
                     ) -> list[tuple[Mole, Mole]]:
    """Greedy matching outwards from the nose tip.

    Reference moles are visited in order of distance from the nose tip;
    each takes the closest unmatched candidate whose area ratio lies in
    [1/area_ratio, area_ratio] and whose distance is below the cap.
    Unmatched moles drop out.
    """
    nose = np.asarray(nose_tip_uv, dtype=np.float64)
    ref_order = sorted(reference.moles,
                       key=lambda m: float(np.linalg.norm(m.center_uv - nose)))
    unmatched = list(candidate.moles)
    pairs: list[tuple[Mole, Mole]] = []
    for ref in ref_order:
        best = None
        best_dist = distance_cap
        for cand in unmatched:
            ratio = cand.area / max(ref.area, 1)
            if not (1.0 / area_ratio <= ratio <= area_ratio):
                continue
            dist = float(np.linalg.norm(cand.center_uv - ref.center_uv))
            if dist < best_dist:
                best, best_dist = cand, dist
        if best is not None:
            pairs.append((ref, best))
            unmatched.remove(best)
    return pairs
