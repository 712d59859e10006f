"""Order-2 spherical-harmonics irradiance.

Irradiance is the 9-term quadratic polynomial of the (unit) normal with
one coefficient set per color channel, clamped at zero to match the
forward render semantics.
"""

from __future__ import annotations

import numpy as np
import torch

from ..scene.types import SceneError, SHLighting, SH_C

_UNIT_TOL = 1e-6


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Evaluate the 9 real SH basis functions at unit directions, shape (..., 9)."""
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack(
        [
            np.full_like(x, SH_C[0]),
            SH_C[1] * y,
            SH_C[2] * z,
            SH_C[3] * x,
            SH_C[4] * x * y,
            SH_C[5] * y * z,
            SH_C[6] * (3.0 * z * z - 1.0),
            SH_C[7] * x * z,
            SH_C[8] * (x * x - y * y),
        ],
        axis=-1,
    )


def sh_basis_torch(normals: torch.Tensor) -> torch.Tensor:
    x, y, z = normals[..., 0], normals[..., 1], normals[..., 2]
    return torch.stack(
        [
            torch.full_like(x, SH_C[0]),
            SH_C[1] * y,
            SH_C[2] * z,
            SH_C[3] * x,
            SH_C[4] * x * y,
            SH_C[5] * y * z,
            SH_C[6] * (3.0 * z * z - 1.0),
            SH_C[7] * x * z,
            SH_C[8] * (x * x - y * y),
        ],
        dim=-1,
    )


def sh_irradiance(normal: np.ndarray, lighting: SHLighting) -> np.ndarray:
    """RGB irradiance at unit normals; rejects non-unit inputs."""
    n = np.asarray(normal, dtype=np.float64)
    lengths = np.linalg.norm(n, axis=-1)
    if np.abs(lengths - 1.0).max() > _UNIT_TOL:
        raise SceneError("sh_irradiance requires unit normals (|n| = 1 within 1e-6)")
    return np.maximum(sh_basis(n) @ lighting.coeffs, 0.0)
