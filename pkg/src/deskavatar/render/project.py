"""Pinhole projection of barycentric surface points."""

from __future__ import annotations

import numpy as np
import torch

from ..scene.types import Camera, SceneError, TriMesh

DTYPE = torch.float64


def project_points_torch(verts: torch.Tensor, tris: torch.Tensor,
                         point_tri: torch.Tensor, point_bary: torch.Tensor,
                         rotation: torch.Tensor, translation: torch.Tensor,
                         fx: float, fy: float, cx: float, cy: float,
                         znear: float = 1e-6) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable projection; returns (pixels (P,2), valid (P,) bool)."""
    corners = verts[tris[point_tri]]  # (P, 3, 3)
    p3 = (point_bary.unsqueeze(2) * corners).sum(dim=1)
    cam = p3 @ rotation.T + translation
    z = cam[:, 2]
    valid = z > znear
    zs = z.clamp_min(znear)
    u = fx * cam[:, 0] / zs + cx
    v = fy * cam[:, 1] / zs + cy
    return torch.stack([u, v], dim=1), valid


def project_points(points: list[tuple[int, np.ndarray]] | np.ndarray,
                   mesh: TriMesh, camera: Camera,
                   bary: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Project surface points given as (triangle index, barycentric weights).

    Accepts either a list of (tri, bary) pairs or separate index/bary
    arrays. Points behind the camera are flagged invalid and must be
    excluded from any loss. Returns (pixels (P,2), valid (P,)).
    """
    if bary is None:
        tri_idx = np.array([p[0] for p in points], dtype=np.int64)
        bary_arr = np.array([np.asarray(p[1], dtype=np.float64) for p in points])
    else:
        tri_idx = np.asarray(points, dtype=np.int64)
        bary_arr = np.asarray(bary, dtype=np.float64)
    if tri_idx.size and (tri_idx.min() < 0 or tri_idx.max() >= mesh.num_triangles):
        raise SceneError("point references a triangle outside the mesh")

    with torch.no_grad():
        pix, valid = project_points_torch(
            torch.as_tensor(mesh.vertices, dtype=DTYPE),
            torch.as_tensor(mesh.triangles, dtype=torch.long),
            torch.as_tensor(tri_idx, dtype=torch.long),
            torch.as_tensor(bary_arr.reshape(-1, 3), dtype=DTYPE),
            torch.as_tensor(camera.rotation, dtype=DTYPE),
            torch.as_tensor(camera.translation, dtype=DTYPE),
            camera.fx, camera.fy, camera.cx, camera.cy,
        )
    return pix.numpy(), valid.numpy()
