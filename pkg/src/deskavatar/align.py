"""Rigid alignment to an image and SH lighting estimation.

Alignment happens in two phases: a correspondence-based least-squares
initialization (alternating rigid fit and depth refinement, no scale
solve), then a landmark-reprojection refinement of the extrinsics by
backtracking first-order descent. Lighting is estimated afterwards with
the pose held fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch

from .annotate import LandmarkProvider, LandmarkSet, RenderContext
from .render.diff import DTYPE, TorchRenderer, build_context, fragment_geometry, rodrigues
from .render.project import project_points_torch
from .render.raster import RenderConfig, rasterize_fragments
from .render.sh import sh_basis
from .scene.types import Camera, Image, SceneError, SHLighting, TextureMap, TriMesh

logger = logging.getLogger(__name__)


class AlignmentError(SceneError):
    pass


def _kabsch(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t) minimizing ||R x + t - y||^2, proper rotation enforced."""
    cx = x.mean(axis=0)
    cy = y.mean(axis=0)
    h = (x - cx).T @ (y - cy)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cy - r @ cx


def procrustes_init(anchors_3d: Mapping[str, np.ndarray], observed: LandmarkSet,
                    camera: Camera, iterations: int = 200,
                    polish_tol: float = 1e-12) -> Camera:
    """Extrinsics from 2D-3D correspondences; rigid only, no scale solve.

    Alternates a Kabsch fit against points placed along the observation
    rays with a depth update, then polishes with damped Gauss-Newton on
    the reprojection error. The template camera supplies intrinsics and
    image size; its extrinsics are ignored.
    """
    ids = [i for i, obs in observed.entries.items()
           if obs.confidence > 0 and i in anchors_3d]
    if len(ids) < 4:
        raise AlignmentError(f"need >= 4 usable correspondences, have {len(ids)}")
    x = np.array([anchors_3d[i] for i in ids])
    pix = observed.positions(ids)

    centered = x - x.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[2] < 1e-9 * max(svals[0], 1e-30):
        raise AlignmentError(
            f"degenerate (coplanar) correspondence set: singular values {svals}")

    # Unit rays through the observations.
    rays = np.stack([(pix[:, 0] - camera.cx) / camera.fx,
                     (pix[:, 1] - camera.cy) / camera.fy,
                     np.ones(len(ids))], axis=1)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)

    f_mean = 0.5 * (camera.fx + camera.fy)
    spread_px = np.linalg.norm(pix - pix.mean(axis=0), axis=1).mean()
    spread_3d = np.linalg.norm(centered, axis=1).mean()
    depth0 = f_mean * spread_3d / max(spread_px, 1e-12)
    lam = np.full(len(ids), depth0)

    rot, trans = np.eye(3), np.zeros(3)
    for _ in range(iterations):
        y = lam[:, None] * rays
        rot, trans = _kabsch(x, y)
        cam_pts = x @ rot.T + trans
        lam_new = np.maximum((cam_pts * rays).sum(axis=1), 1e-6)
        if np.abs(lam_new - lam).max() < 1e-14 * depth0:
            lam = lam_new
            break
        lam = lam_new

    # Gauss-Newton polish on the pixel reprojection error.
    rot_t = torch.tensor(rot, dtype=DTYPE)
    trans_t = torch.tensor(trans, dtype=DTYPE)
    x_t = torch.tensor(x, dtype=DTYPE)
    pix_t = torch.tensor(pix, dtype=DTYPE)
    damping = 1e-8
    for _ in range(100):
        params = torch.zeros(6, dtype=DTYPE, requires_grad=True)

        def residuals(p):
            r = rot_t @ rodrigues(p[:3])
            t = trans_t + p[3:]
            cam_pts = x_t @ r.T + t
            z = cam_pts[:, 2].clamp_min(1e-9)
            u = camera.fx * cam_pts[:, 0] / z + camera.cx
            v = camera.fy * cam_pts[:, 1] / z + camera.cy
            return (torch.stack([u, v], dim=1) - pix_t).reshape(-1)

        jac = torch.autograd.functional.jacobian(residuals, params)
        res = residuals(params).detach()
        jtj = jac.T @ jac + damping * torch.eye(6, dtype=DTYPE)
        step = torch.linalg.solve(jtj, -(jac.T @ res))
        with torch.no_grad():
            rot_t = rot_t @ rodrigues(step[:3])
            trans_t = trans_t + step[3:]
        if step.norm().item() < polish_tol:
            break

    rot = rot_t.numpy()
    u_m, _, vt_m = np.linalg.svd(rot)
    return camera.with_extrinsics(u_m @ vt_m, trans_t.numpy())


@dataclass
class RigidRefineConfig:
    max_iterations: int = 200
    step_tol: float = 1e-7
    initial_rate: float = 1.0
    max_backtracks: int = 30
    diverge_patience: int = 5
    #: Accepted steps between fresh tracker measurements; in between, the
    #: line search scores candidates on anchor projections plus the frozen
    #: tracker offsets (exact for the oracle tracker, whose offsets are 0).
    remeasure_interval: int = 5


@dataclass
class RigidAlignment:
    camera: Camera
    losses: list[float] = field(default_factory=list)
    converged: bool = False
    warning: str | None = None


def _tracker_call(tracker: LandmarkProvider, mesh: TriMesh, camera: Camera,
                  texture: TextureMap, needs_render: bool) -> LandmarkSet:
    frag = rasterize_fragments(mesh, camera, RenderConfig(soft_sigma_px=0.0))
    image = None
    if needs_render:
        from .render.diff import rasterize

        image = rasterize(mesh, texture, SHLighting.ambient(1.0), camera).image
    return tracker.landmarks(image, RenderContext(mesh, camera, frag))


def refine_rigid(mesh: TriMesh, texture: TextureMap, real_image: Image,
                 camera: Camera, tracker: LandmarkProvider,
                 real_context: RenderContext | None = None,
                 target: LandmarkSet | None = None,
                 config: RigidRefineConfig = RigidRefineConfig()) -> RigidAlignment:
    """Minimize the tracked-landmark mismatch between renders and the real image.

    Renders shown to the tracker use ambient lighting. Gradients flow
    through the anchor projections; for non-oracle trackers the residual
    between tracked and projected positions is carried as a frozen offset
    re-measured at every accepted step, so any consistent tracker works.
    """
    if target is None:
        target = tracker.landmarks(real_image, real_context)

    anchors = mesh.anchor_map()
    tris_t = torch.tensor(mesh.triangles, dtype=torch.long)
    verts_t = torch.tensor(mesh.vertices, dtype=DTYPE)

    def measured(cam: Camera) -> dict[str, np.ndarray]:
        rendered = _tracker_call(tracker, mesh, cam, texture, tracker.needs_pixels)
        out = {}
        for lid, obs in rendered.entries.items():
            if obs.confidence > 0 and lid in target.entries \
                    and target.entries[lid].confidence > 0 and lid in anchors:
                out[lid] = obs.position
        return out

    current = camera
    meas = measured(current)
    if not meas:
        raise AlignmentError("no usable landmarks")

    def loss_of(meas_positions: dict[str, np.ndarray]) -> float:
        diffs = [meas_positions[k] - target.entries[k].position for k in meas_positions]
        return float(np.mean(np.sum(np.square(diffs), axis=1)))

    def perturbed(cam: Camera, step: np.ndarray) -> Camera:
        with torch.no_grad():
            rot_new = (torch.tensor(cam.rotation, dtype=DTYPE)
                       @ rodrigues(torch.tensor(step[:3], dtype=DTYPE))).numpy()
        u_m, _, vt_m = np.linalg.svd(rot_new)
        return cam.with_extrinsics(u_m @ vt_m, cam.translation + step[3:])

    ids: list[str] = []
    goal_np = np.zeros((0, 2))
    tri_idx = bary = None

    def refresh_goals(measurement: dict[str, np.ndarray], cam: Camera) -> None:
        nonlocal ids, goal_np, tri_idx, bary
        ids = sorted(measurement)
        tri_idx = torch.tensor([anchors[i].triangle for i in ids], dtype=torch.long)
        bary = torch.tensor(np.array([anchors[i].bary for i in ids]), dtype=DTYPE)
        with torch.no_grad():
            proj0, _ = project_points_torch(
                verts_t, tris_t, tri_idx, bary,
                torch.tensor(cam.rotation, dtype=DTYPE),
                torch.tensor(cam.translation, dtype=DTYPE),
                camera.fx, camera.fy, camera.cx, camera.cy)
        offsets = np.array([measurement[i] for i in ids]) - proj0.numpy()
        goal_np = np.array([target.entries[i].position for i in ids]) - offsets

    def surrogate_loss(cam: Camera, want_grad: bool) -> tuple[float, np.ndarray | None]:
        params = torch.zeros(6, dtype=DTYPE, requires_grad=want_grad)
        rot = torch.tensor(cam.rotation, dtype=DTYPE) @ rodrigues(params[:3])
        trans = torch.tensor(cam.translation, dtype=DTYPE) + params[3:]
        proj, valid = project_points_torch(verts_t, tris_t, tri_idx, bary, rot, trans,
                                           camera.fx, camera.fy, camera.cx, camera.cy)
        goal = torch.tensor(goal_np, dtype=DTYPE)
        loss = ((proj - goal) ** 2).sum(dim=1)[valid].mean()
        if not want_grad:
            return float(loss.detach()), None
        loss.backward()
        return float(loss.detach()), params.grad.detach().numpy()

    result = RigidAlignment(current)
    best_loss = loss_of(meas)
    result.losses.append(best_loss)
    best_camera = current
    refresh_goals(meas, current)
    rate = config.initial_rate
    rejects = 0
    accepted_since_measure = 0

    for _ in range(config.max_iterations):
        current_s, grad = surrogate_loss(current, want_grad=True)
        accepted = False
        step = np.zeros(6)
        for _ in range(config.max_backtracks):
            step = -rate * grad
            if np.linalg.norm(step) < config.step_tol:
                break
            candidate = perturbed(current, step)
            cand_s, _ = surrogate_loss(candidate, want_grad=False)
            if cand_s <= current_s:
                current = candidate
                accepted = True
                rate = min(rate * 1.5, 1e3)
                break
            rate *= 0.5

        small_step = np.linalg.norm(step) < config.step_tol
        if accepted:
            rejects = 0
            accepted_since_measure += 1
        else:
            rejects += 1

        if accepted_since_measure >= config.remeasure_interval or small_step \
                or rejects >= config.diverge_patience:
            fresh = measured(current)
            if fresh:
                true_loss = loss_of(fresh)
                result.losses.append(true_loss)
                if true_loss <= best_loss:
                    best_loss, best_camera = true_loss, current
                else:
                    current = best_camera
                    rate *= 0.5
                refresh_goals(fresh, current)
            accepted_since_measure = 0
        if small_step:
            result.converged = True
            break
        if rejects >= config.diverge_patience:
            result.warning = "rigid refinement stalled; returning best-so-far"
            logger.warning(result.warning)
            break

    result.camera = best_camera
    return result


@dataclass
class LightingEstimate:
    lighting: SHLighting
    residual: float
    ambient_residual: float


def estimate_lighting(mesh: TriMesh, texture: TextureMap, real_image: Image,
                      camera: Camera, max_rounds: int = 50,
                      grad_tol: float = 1e-8,
                      edge_margin_px: int = 4) -> LightingEstimate:
    """Least-squares SH coefficients against non-background pixels, pose fixed.

    The forward model clamps irradiance at zero, so the fit runs as
    projected iterative least squares: solve on the active set, then
    line-search the step against the true clamped objective. Initialized
    from the ambient-only fit, which keeps the final residual no worse.
    Pixels within edge_margin_px of the coverage boundary are excluded:
    their colors carry soft-silhouette attenuation that would bias the
    (hemisphere-ill-conditioned) fit.
    """
    from scipy.ndimage import binary_erosion

    config = RenderConfig(soft_sigma_px=0.0)
    frag = rasterize_fragments(mesh, camera, config)
    ctx = build_context(mesh, camera, config, frag)
    with torch.no_grad():
        uv, nrm = fragment_geometry(ctx, torch.tensor(mesh.vertices, dtype=DTYPE),
                                    torch.tensor(camera.rotation, dtype=DTYPE),
                                    torch.tensor(camera.translation, dtype=DTYPE))
        from .render.diff import sample_bilinear

        albedo = sample_bilinear(torch.tensor(texture.texels, dtype=DTYPE), uv).numpy()
    normals = nrm.numpy()

    interior = frag.covered & ~real_image.background_mask
    if edge_margin_px > 0:
        interior = binary_erosion(interior, iterations=edge_margin_px)
    cov_rows = ctx.cov_pix.numpy() // camera.width
    cov_cols = ctx.cov_pix.numpy() % camera.width
    keep = interior[cov_rows, cov_cols]
    if not keep.any():
        keep = ~real_image.background_mask[cov_rows, cov_cols]
    if not keep.any():
        raise AlignmentError("no non-background pixels available for lighting estimation")

    # SH shading happens in the camera frame.
    basis = sh_basis(normals[keep] @ camera.rotation.T)  # (N, 9)
    alb = albedo[keep]  # (N, 3)
    y = real_image.pixels[cov_rows[keep], cov_cols[keep]]  # (N, 3)

    def objective(coeffs: np.ndarray) -> float:
        pred = alb * np.maximum(basis @ coeffs, 0.0)
        return float(np.mean((pred - y) ** 2))

    def gradient(coeffs: np.ndarray) -> np.ndarray:
        irr = basis @ coeffs
        active = irr > 0
        pred = alb * np.maximum(irr, 0.0)
        diff = 2.0 * (pred - y) * alb * active
        return basis.T @ diff / (y.shape[0] * y.shape[1])

    coeffs = np.zeros((9, 3))
    denom = (alb * alb).sum(axis=0) * sh_basis(np.array([0.0, 0.0, 1.0]))[0]
    coeffs[0] = (alb * y).sum(axis=0) / np.maximum(denom, 1e-30)
    ambient_residual = objective(coeffs)

    current = objective(coeffs)
    for _ in range(max_rounds):
        irr = basis @ coeffs  # (N, 3)
        proposal = coeffs.copy()
        for ch in range(3):
            active = irr[:, ch] > 0
            if active.sum() < 9:
                continue
            a_mat = basis[active] * alb[active, ch][:, None]
            rhs = y[active, ch]
            proposal[:, ch] = np.linalg.lstsq(a_mat, rhs, rcond=None)[0]
        # Line-search toward the active-set solution on the clamped objective.
        step = proposal - coeffs
        alpha = 1.0
        improved = False
        for _ in range(40):
            candidate = coeffs + alpha * step
            val = objective(candidate)
            if val <= current:
                coeffs, current = candidate, val
                improved = True
                break
            alpha *= 0.5
        gnorm = float(np.abs(gradient(coeffs)).max())
        if gnorm < grad_tol or not improved:
            break

    return LightingEstimate(SHLighting(coeffs), current, ambient_residual)
