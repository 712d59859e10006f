"""Gaussian frequency separation with coverage-aware filtering."""

from __future__ import annotations

import numpy as np

from ..scene.types import SceneError, TextureMap


def gaussian_kernel_1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Sampled Gaussian on integer offsets, normalized to sum 1."""
    radius = int(np.ceil(truncate * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    from scipy.ndimage import convolve1d

    out = convolve1d(arr, kernel, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, kernel, axis=1, mode="constant", cval=0.0)


def frequency_split(texture: TextureMap, sigma: float
                    ) -> tuple[TextureMap, np.ndarray]:
    """(low, high) with texture = low + high exactly.

    The low band is a coverage-weighted Gaussian blur (uncovered texels
    carry no weight, so fill color never bleeds in); the high band is the
    signed residual. Texels the blur cannot reach keep their own value in
    the low band, making the high band zero there.
    """
    if sigma <= 0:
        raise SceneError("frequency split requires sigma > 0")
    kernel = gaussian_kernel_1d(sigma)
    cov = (texture.coverage > 0).astype(np.float64)
    wsum = _blur(cov, kernel)
    blurred = _blur(texture.texels * cov[:, :, None], kernel)

    low = texture.texels.copy()
    reach = wsum > 1e-12
    low[reach] = blurred[reach] / wsum[reach, None]
    high = texture.texels - low
    low_map = TextureMap(np.clip(low, 0.0, 1.0), texture.coverage.copy(),
                         texture.fill_color)
    # Clipping low must not break complementarity; recompute high against
    # the stored low band.
    high = texture.texels - low_map.texels
    return low_map, high
