"""Inverse-render de-lighting: texel deltas fit against multi-view evidence."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from ..geomopt import ViewSet
from ..render.diff import DTYPE, ShadeContext, build_context, fragment_geometry, shade
from ..render.raster import RenderConfig, rasterize_fragments
from ..scene.types import SceneError, SHLighting, TextureMap, TriMesh
from ..texproject import falloff_weight

logger = logging.getLogger(__name__)


@dataclass
class DelightConfig:
    falloff_p: float = 4.0
    #: Laplacian smoothness weight on the texel deltas (5x5 support).
    w_delta_laplacian: float = 1e-3
    steps: int = 400
    learning_rate: float = 2e-2
    optimize_lighting: bool = False
    rel_decrease_tol: float = 1e-7
    check_every: int = 25


@dataclass
class DelightResult:
    texture: TextureMap
    residuals: list[float] = field(default_factory=list)
    refined_lighting: list[SHLighting] | None = None


def _pixel_falloff(mesh: TriMesh, ctx: ShadeContext, camera) -> np.ndarray:
    """Specular falloff weights for every covered pixel of a view."""
    from ..scene.meshops import compute_vertex_normals

    rows = ctx.cov_pix.numpy() // camera.width
    cols = ctx.cov_pix.numpy() % camera.width
    frag = ctx.fragments
    tri = frag.triangle[rows, cols]
    bary = frag.bary[rows, cols]
    corners = mesh.triangles[tri]
    pos = np.einsum("pk,pkd->pd", bary, mesh.vertices[corners])
    vn = compute_vertex_normals(mesh)
    nrm = np.einsum("pk,pkd->pd", bary, vn[corners])
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-30)
    ray = pos - camera.world_center()
    ray /= np.maximum(np.linalg.norm(ray, axis=1, keepdims=True), 1e-30)
    return falloff_weight(nrm, ray, 1.0), rows, cols


def delight_inverse_render(texture: TextureMap, views: ViewSet, mesh: TriMesh,
                           config: DelightConfig = DelightConfig()) -> DelightResult:
    """Optimize texel deltas so renders under each view's lighting match its image.

    The per-pixel color differences are weighted by the specular falloff
    (grazing pixels contribute little), and a Laplacian term keeps the
    deltas smooth. Lighting coefficients can be jointly refined behind a
    flag. The returned texture is texture + delta.
    """
    rcfg = RenderConfig(soft_sigma_px=0.0)
    view_data = []
    for view in views.views:
        frag = rasterize_fragments(mesh, view.camera, rcfg)
        if not frag.covered.any():
            continue
        ctx = build_context(mesh, view.camera, rcfg, frag)
        fall, rows, cols = _pixel_falloff(mesh, ctx, view.camera)
        fall = fall ** config.falloff_p
        usable = ~view.real_image.background_mask[rows, cols]
        weights = np.where(usable, fall, 0.0)
        view_data.append({
            "ctx": ctx,
            "rot": torch.tensor(view.camera.rotation, dtype=DTYPE),
            "trans": torch.tensor(view.camera.translation, dtype=DTYPE),
            "sh": torch.tensor(view.lighting.coeffs, dtype=DTYPE,
                               requires_grad=config.optimize_lighting),
            "real": torch.tensor(
                view.real_image.pixels[rows, cols], dtype=DTYPE),
            "weight": torch.tensor(weights, dtype=DTYPE).unsqueeze(1),
            "pix": torch.tensor(rows * view.camera.width + cols, dtype=torch.long),
        })
    if not view_data:
        raise SceneError("no view sees the mesh; cannot de-light")

    base = torch.tensor(texture.texels, dtype=DTYPE)
    delta = torch.zeros_like(base, requires_grad=True)
    leaves = [delta] + ([d["sh"] for d in view_data] if config.optimize_lighting else [])
    optimizer = torch.optim.Adam(leaves, lr=config.learning_rate)

    from ..flowwarp import _laplacian5_torch

    def total_loss() -> torch.Tensor:
        tex = base + delta
        loss = torch.zeros((), dtype=DTYPE)
        for d in view_data:
            img = shade(d["ctx"], verts_t, tex, d["sh"], d["rot"], d["trans"])
            flat = img.reshape(-1, 3)[d["pix"]]
            loss = loss + ((flat - d["real"]) ** 2 * d["weight"]).sum() \
                / d["weight"].sum().clamp_min(1e-30) / 3.0
        lap = _laplacian5_torch(delta.permute(2, 0, 1).unsqueeze(0))
        return loss + config.w_delta_laplacian * (lap ** 2).mean()

    verts_t = torch.tensor(mesh.vertices, dtype=DTYPE)
    result = DelightResult(texture)
    best = None
    checkpoint = None
    for step in range(config.steps):
        optimizer.zero_grad()
        loss = total_loss()
        loss.backward()
        optimizer.step()
        val = float(loss)
        result.residuals.append(val)
        if best is None or val < best[0]:
            best = (val, delta.detach().clone(),
                    [d["sh"].detach().clone() for d in view_data])
        if step % config.check_every == 0:
            if checkpoint is not None and \
                    abs(checkpoint - val) < config.rel_decrease_tol * max(checkpoint, 1e-30):
                break
            checkpoint = val

    if best is not None and result.residuals and best[0] < result.residuals[-1]:
        logger.warning("de-lighting diverged late; returning best-so-far")
        delta_final = best[1]
        sh_final = best[2]
    else:
        delta_final = delta.detach()
        sh_final = [d["sh"].detach() for d in view_data]

    out = TextureMap(np.clip((base + delta_final).numpy(), 0.0, 1.0),
                     texture.coverage.copy(), texture.fill_color)
    result.texture = out
    if config.optimize_lighting:
        result.refined_lighting = [SHLighting(s.numpy().copy()) for s in sh_final]
    return result
