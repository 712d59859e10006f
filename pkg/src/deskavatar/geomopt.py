"""Multi-view geometry refinement driven by surrogate textures.

Per outer iteration and view: re-align extrinsics, render the current
geometry with the view's previous surrogate texture, solve the
segmentation flow, warp the real image into alignment, and project it
into a fresh per-view texture with baked-in lighting. The inner loop
then descends on vertex positions against the unwarped real images
(photometric term), the flow targets (semantic term), and edge/Laplacian
regularizers anchored to the pre-optimization mesh. The first outer
iteration uses only the front view.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .align import refine_rigid
from .annotate import LandmarkProvider, RenderContext, SegmentationProvider, SegMap
from .flowwarp import FlowField, FlowSolveConfig, laplace_postprocess, solve_flow, warp_image
from .render.diff import DTYPE, ShadeContext, build_context, shade_components
from .render.project import project_points_torch
from .render.raster import FragmentBuffer, RenderConfig, rasterize_fragments
from .render.diff import rasterize
from .scene.meshops import bounding_box_diagonal, edge_list, one_ring_neighbors
from .scene.types import Camera, Image, SceneError, SHLighting, TextureMap, TriMesh
from .texproject import gather_texture, project_photons

logger = logging.getLogger(__name__)


@dataclass
class View:
    """One observation: camera, real image, its segmentation, lighting, texture."""

    camera: Camera
    real_image: Image
    seg_real: SegMap
    lighting: SHLighting
    surrogate: TextureMap | None = None
    real_context: RenderContext | None = None
    weight: float = 1.0
    name: str = ""


@dataclass
class ViewSet:
    views: list[View]
    front_index: int = 0

    def __post_init__(self):
        if not self.views:
            raise SceneError("a ViewSet needs at least one view")
        if not (0 <= self.front_index < len(self.views)):
            raise SceneError("front_index outside the view list")

    @property
    def front(self) -> View:
        return self.views[self.front_index]


@dataclass
class ProviderBundle:
    tracker: LandmarkProvider
    segmenter: SegmentationProvider


@dataclass
class RefinementConfig:
    w_photo: float = 1.0
    w_sem: float = 0.5
    w_edge: float = 10.0
    w_lap: float = 10.0
    outer_iterations: int = 3
    inner_steps: int = 200
    learning_rate: float = 2e-3
    realign: bool = True
    texture_size: int = 256
    photon_k: int = 4
    falloff_p: float = 4.0
    render_sigma_px: float = 1.0
    rel_decrease_tol: float = 1e-5
    #: Pixel scale for the semantic term: displacements are measured in
    #: hundredths of the image extent so default weights are commensurate.
    sem_pixel_unit_fraction: float = 0.01
    #: Inner steps between monotone checkpoints; the photometric term's
    #: fragments are also re-rasterized at each accepted checkpoint since
    #: frozen assignments go stale once vertices move beyond the
    #: screen-space triangle size.
    guard_every: int = 15
    #: Learning-rate decay applied at each accepted checkpoint; drives the
    #: step size toward zero for sub-pixel convergence.
    lr_decay: float = 0.8
    flow: FlowSolveConfig = field(default_factory=FlowSolveConfig)
    laplace_flow_postprocess: bool = True

    def __post_init__(self):
        if min(self.w_photo, self.w_sem, self.w_edge, self.w_lap) < 0:
            raise SceneError("loss weights must be nonnegative")
        if self.w_edge <= 0 or self.w_lap <= 0:
            raise SceneError("geometric regularization is essential: w_edge, w_lap > 0")


@dataclass
class SurrogateResult:
    texture: TextureMap
    flow: FlowField
    seg_synth: SegMap
    fragments: FragmentBuffer
    warped: Image


def build_surrogate(view: View, mesh: TriMesh, current_texture: TextureMap,
                    providers: ProviderBundle,
                    config: RefinementConfig = RefinementConfig()) -> SurrogateResult:
    """Fresh per-view texture: render, flow-align the real image, project.

    The returned flow maps synthetic-domain pixel centers to their
    real-image locations (p + f(p)), which is exactly what the semantic
    loss consumes, so one solve serves both warping and L_sem.
    """
    rcfg = RenderConfig(soft_sigma_px=config.render_sigma_px)
    out = rasterize(mesh, current_texture, view.lighting, view.camera, rcfg)
    synth_ctx = RenderContext(mesh, view.camera, out.fragments)
    seg_synth = providers.segmenter.segmentation(out.image, synth_ctx)

    if not out.fragments.covered.any():
        logger.warning("view %s: mesh not visible; surrogate is the fill texture",
                       view.name or "?")
        empty = TextureMap.filled(config.texture_size)
        zero = FlowField.zero(view.camera.height, view.camera.width)
        return SurrogateResult(empty, zero, seg_synth, out.fragments, view.real_image)

    flow = solve_flow(view.seg_real, seg_synth, config.flow)
    if config.laplace_flow_postprocess:
        flow = laplace_postprocess(flow, view.seg_real)
    warped = warp_image(view.real_image, flow)

    photons = project_photons(warped, mesh, view.camera, config.falloff_p,
                              fragments=out.fragments)
    texture = gather_texture(photons, config.photon_k, config.texture_size)
    return SurrogateResult(texture, flow, seg_synth, out.fragments, warped)


@dataclass
class _ViewOptData:
    """Frozen per-view tensors consumed by the inner descent loop."""

    ctx: ShadeContext
    texels: torch.Tensor
    sh: torch.Tensor
    rot: torch.Tensor
    trans: torch.Tensor
    real: torch.Tensor  # (H*W, 3)
    nonbg: torch.Tensor  # (H*W,) bool
    sem_tri: torch.Tensor  # (J,) long
    sem_bary: torch.Tensor  # (J, 3)
    sem_target: torch.Tensor  # (J, 2)
    sem_unit: float
    weight: float
    camera: Camera
    # Derived per-context gathers (rebuilt whenever ctx is refreshed).
    cov_real: torch.Tensor = None
    cov_keep: torch.Tensor = None
    out_real: torch.Tensor = None
    out_keep: torch.Tensor = None
    photo_const: float = 0.0
    photo_norm: float = 1.0


def _bind_photo(data: _ViewOptData) -> None:
    """Gather real-image targets for the current context's pixel sets.

    Pixels that are real-non-background but rendered black (outside both
    the covered set and the soft band) contribute a constant; it is
    tracked so reported photo losses stay comparable within one context.
    """
    ctx = data.ctx
    cov_keep = data.nonbg[ctx.cov_pix]
    out_keep = data.nonbg[ctx.band_out_pix]
    data.cov_real = data.real[ctx.cov_pix]
    data.cov_keep = cov_keep.unsqueeze(1).to(data.real.dtype)
    data.out_real = data.real[ctx.band_out_pix]
    data.out_keep = out_keep.unsqueeze(1).to(data.real.dtype)
    data.photo_norm = max(float(data.nonbg.sum()), 1.0) * 3.0

    accounted = torch.zeros(data.nonbg.shape[0], dtype=torch.bool)
    accounted[ctx.cov_pix] = True
    accounted[ctx.band_out_pix] = True
    rest = data.nonbg & ~accounted
    data.photo_const = float((data.real[rest] ** 2).sum()) / data.photo_norm


def _prepare_view(view: View, mesh: TriMesh, surrogate: SurrogateResult,
                  config: RefinementConfig) -> _ViewOptData:
    cam = view.camera
    frag = surrogate.fragments
    ctx = build_context(mesh, cam, RenderConfig(soft_sigma_px=config.render_sigma_px),
                        frag)
    ambient = SHLighting.ambient(1.0)

    rows, cols = np.nonzero(frag.covered)
    centers = np.stack([cols + 0.5, rows + 0.5], axis=1)
    flow_at = surrogate.flow.vectors[rows, cols]
    targets = centers + flow_at
    tri = frag.triangle[rows, cols]
    bary = frag.bary[rows, cols]

    sem_unit = config.sem_pixel_unit_fraction * max(cam.width, cam.height)

    data = _ViewOptData(
        ctx=ctx,
        texels=torch.tensor(surrogate.texture.texels, dtype=DTYPE),
        sh=torch.tensor(ambient.coeffs, dtype=DTYPE),
        rot=torch.tensor(cam.rotation, dtype=DTYPE),
        trans=torch.tensor(cam.translation, dtype=DTYPE),
        real=torch.tensor(view.real_image.pixels.reshape(-1, 3), dtype=DTYPE),
        nonbg=torch.tensor(~view.real_image.background_mask.reshape(-1),
                           dtype=torch.bool),
        sem_tri=torch.tensor(tri, dtype=torch.long),
        sem_bary=torch.tensor(bary, dtype=DTYPE),
        sem_target=torch.tensor(targets, dtype=DTYPE),
        sem_unit=sem_unit,
        weight=view.weight,
        camera=cam,
    )
    _bind_photo(data)
    return data


def refresh_photo_context(data: _ViewOptData, mesh: TriMesh, verts_np: np.ndarray,
                          config: RefinementConfig) -> None:
    """Re-rasterize one view's fragments at the given vertex positions.

    Only the photometric shading context changes; the semantic samples
    stay anchored to the material points chosen at outer-iteration start.
    """
    moved = mesh.with_vertices(verts_np)
    rcfg = RenderConfig(soft_sigma_px=config.render_sigma_px)
    frag = rasterize_fragments(moved, data.camera, rcfg)
    data.ctx = build_context(moved, data.camera, rcfg, frag)
    _bind_photo(data)


def _view_losses(data: _ViewOptData, verts: torch.Tensor,
                 tris: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    cov, out = shade_components(data.ctx, verts, data.texels, data.sh,
                                data.rot, data.trans)
    photo = ((cov - data.cov_real) ** 2 * data.cov_keep).sum()
    if out.shape[0]:
        photo = photo + ((out - data.out_real) ** 2 * data.out_keep).sum()
    photo = photo / data.photo_norm + data.photo_const

    proj, valid = project_points_torch(verts, tris, data.sem_tri, data.sem_bary,
                                       data.rot, data.trans, data.camera.fx,
                                       data.camera.fy, data.camera.cx, data.camera.cy)
    diff = (proj - data.sem_target) / data.sem_unit
    sem = (diff ** 2).sum(dim=1)[valid].mean()
    return photo, sem


class RegularizerState:
    """Edge-length and one-ring displacement-Laplacian terms against a reference."""

    def __init__(self, reference: TriMesh):
        edges = edge_list(reference)
        self.edges = torch.tensor(edges, dtype=torch.long)
        ref = torch.tensor(reference.vertices, dtype=DTYPE)
        self.ref = ref
        self.rest_len = (ref[self.edges[:, 0]] - ref[self.edges[:, 1]]).norm(dim=1)
        self.mean_len = float(self.rest_len.mean())

        rings = one_ring_neighbors(reference)
        idx_i, idx_j, inv_deg = [], [], []
        for i, ring in enumerate(rings):
            for j in ring:
                idx_i.append(i)
                idx_j.append(int(j))
                inv_deg.append(1.0 / len(ring))
        self.ring_i = torch.tensor(idx_i, dtype=torch.long)
        self.ring_j = torch.tensor(idx_j, dtype=torch.long)
        self.ring_w = torch.tensor(inv_deg, dtype=DTYPE).unsqueeze(1)
        self.n = reference.num_vertices

    def edge_loss(self, verts: torch.Tensor) -> torch.Tensor:
        length = (verts[self.edges[:, 0]] - verts[self.edges[:, 1]]).norm(dim=1)
        return (((length - self.rest_len) / self.rest_len) ** 2).mean()

    def laplace_loss(self, verts: torch.Tensor) -> torch.Tensor:
        disp = verts - self.ref
        mean_nbr = torch.zeros_like(disp).index_add(
            0, self.ring_i, disp[self.ring_j] * self.ring_w)
        lap = mean_nbr - disp
        return (lap ** 2).sum(dim=1).mean() / (self.mean_len ** 2)


@dataclass
class RefineDiagnostics:
    records: list[dict] = field(default_factory=list)

    def log(self, **kw) -> None:
        self.records.append(kw)
        logger.info("refine %s", kw)


def _inner_descent(leaves: Sequence[torch.Tensor],
                   verts_fn: Callable[[], torch.Tensor],
                   view_data: list[_ViewOptData], reg: RegularizerState,
                   tris: torch.Tensor, config: RefinementConfig,
                   post_step: Callable[[], None] | None = None,
                   refresh_fn: Callable[[], None] | None = None,
                   diagnostics: RefineDiagnostics | None = None,
                   outer_index: int = 0) -> None:
    """Adam descent with periodic monotone checkpoints.

    Every guard interval the objective is compared against the last
    accepted checkpoint; a regression or an inverted triangle rolls the
    parameters back to that checkpoint and halves the learning rate, so
    the accepted-state sequence is non-increasing. verts_fn maps the leaf
    tensors to vertex positions, which lets expression fitting drive the
    same loop through a rig evaluation.
    """

    def total_loss() -> tuple[torch.Tensor, dict]:
        verts = verts_fn()
        parts = {}
        loss = torch.zeros((), dtype=DTYPE)
        for i, data in enumerate(view_data):
            photo, sem = _view_losses(data, verts, tris)
            loss = loss + data.weight * (config.w_photo * photo + config.w_sem * sem)
            parts[f"photo_{i}"] = float(photo)
            parts[f"sem_{i}"] = float(sem)
        edge = reg.edge_loss(verts)
        lap = reg.laplace_loss(verts)
        loss = loss + config.w_edge * edge + config.w_lap * lap
        parts["edge"] = float(edge)
        parts["laplace"] = float(lap)
        parts["total"] = float(loss)
        return loss, parts

    def current_normals() -> torch.Tensor:
        verts = verts_fn()
        v0 = verts[tris[:, 0]]
        return torch.linalg.cross(verts[tris[:, 1]] - v0, verts[tris[:, 2]] - v0).detach()

    guard = max(1, config.guard_every)
    optimizer = torch.optim.Adam(list(leaves), lr=config.learning_rate)
    loss, parts = total_loss()
    check_loss = float(loss)
    check_state = [leaf.detach().clone() for leaf in leaves]
    check_normals = current_normals()
    prev_check = None

    step = 0
    while step < config.inner_steps:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if post_step is not None:
            post_step()
        step += 1

        at_guard = step % guard == 0 or step == config.inner_steps
        if not at_guard:
            loss, parts = total_loss()
            continue

        cand, cand_parts = total_loss()
        normals = current_normals()
        flipped = bool(((normals * check_normals).sum(dim=1) <= 0).any())
        if float(cand) > check_loss or flipped or not np.isfinite(float(cand)):
            with torch.no_grad():
                for leaf, saved in zip(leaves, check_state):
                    leaf.data.copy_(saved)
            if post_step is not None:
                post_step()
            new_lr = optimizer.param_groups[0]["lr"] * 0.5
            if new_lr < 1e-10:
                loss, parts = total_loss()
                break
            optimizer = torch.optim.Adam(list(leaves), lr=new_lr)
            loss, parts = total_loss()
            continue

        # Accepted checkpoint.
        prev_check = check_loss
        check_loss = float(cand)
        check_state = [leaf.detach().clone() for leaf in leaves]
        check_normals = normals
        loss, parts = cand, cand_parts
        new_lr = optimizer.param_groups[0]["lr"] * config.lr_decay
        optimizer = torch.optim.Adam(list(leaves), lr=new_lr)
        if refresh_fn is not None:
            refresh_fn()
            loss, parts = total_loss()
            check_loss = float(loss)
        if prev_check is not None and \
                prev_check - check_loss < config.rel_decrease_tol * max(prev_check, 1e-12):
            break

    with torch.no_grad():
        final, final_parts = total_loss()
        if float(final) > check_loss:
            for leaf, saved in zip(leaves, check_state):
                leaf.data.copy_(saved)
            if post_step is not None:
                post_step()
            _, final_parts = total_loss()
    parts = final_parts

    if diagnostics is not None:
        diagnostics.log(outer=outer_index, **parts)


def loss_breakdown(mesh: TriMesh, reference: TriMesh, view_data: list[_ViewOptData],
                   config: RefinementConfig) -> dict:
    """One evaluation of every loss term (for tests and diagnostics)."""
    verts = torch.tensor(mesh.vertices, dtype=DTYPE)
    tris = torch.tensor(mesh.triangles, dtype=torch.long)
    reg = RegularizerState(reference)
    out = {}
    total = 0.0
    for i, data in enumerate(view_data):
        photo, sem = _view_losses(data, verts, tris)
        out[f"photo_{i}"] = float(photo)
        out[f"sem_{i}"] = float(sem)
        total += data.weight * (config.w_photo * float(photo) + config.w_sem * float(sem))
    out["edge"] = float(reg.edge_loss(verts))
    out["laplace"] = float(reg.laplace_loss(verts))
    total += config.w_edge * out["edge"] + config.w_lap * out["laplace"]
    out["total"] = total
    return out


def prepare_views(views: list[View], mesh: TriMesh, providers: ProviderBundle,
                  config: RefinementConfig,
                  fallback_texture: TextureMap | None = None) -> list[_ViewOptData]:
    """Build surrogates and frozen tensors for the given views (test seam)."""
    data = []
    for view in views:
        current = view.surrogate or fallback_texture or TextureMap.filled(config.texture_size)
        surr = build_surrogate(view, mesh, current, providers, config)
        view.surrogate = surr.texture
        data.append(_prepare_view(view, mesh, surr, config))
    return data


def refine_geometry(mesh: TriMesh, views: ViewSet, providers: ProviderBundle,
                    config: RefinementConfig = RefinementConfig(),
                    initial_texture: TextureMap | None = None,
                    diagnostics: RefineDiagnostics | None = None) -> TriMesh:
    """Vertex refinement over all views; first outer iteration is front-only."""
    if diagnostics is None:
        diagnostics = RefineDiagnostics()
    reference = mesh
    reg = RegularizerState(reference)
    tris = torch.tensor(mesh.triangles, dtype=torch.long)

    # Bootstrap texture for the front view's first synthetic render: the
    # real front image projected straight onto the initial mesh.
    front = views.front
    if front.surrogate is None and initial_texture is None:
        photons = project_photons(front.real_image, mesh, front.camera, config.falloff_p)
        initial_texture = gather_texture(photons, config.photon_k, config.texture_size)

    current = mesh
    for outer in range(config.outer_iterations):
        active = [front] if outer == 0 else list(views.views)
        t0 = time.time()

        for view in active:
            if config.realign:
                try:
                    tracked = providers.tracker.landmarks(view.real_image, view.real_context)
                    res = refine_rigid(current, view.surrogate or initial_texture
                                       or TextureMap.filled(config.texture_size),
                                       view.real_image, view.camera, providers.tracker,
                                       target=tracked)
                    view.camera = res.camera
                except SceneError as exc:
                    logger.warning("view %s realignment skipped: %s", view.name, exc)

        fallback = views.front.surrogate or initial_texture
        view_data = prepare_views(active, current, providers, config, fallback)

        verts = torch.tensor(current.vertices, dtype=DTYPE, requires_grad=True)

        def refresh():
            for data in view_data:
                refresh_photo_context(data, current, verts.detach().numpy(), config)

        _inner_descent([verts], lambda: verts, view_data, reg, tris, config,
                       refresh_fn=refresh, diagnostics=diagnostics, outer_index=outer)
        new_verts = verts.detach().numpy()
        disp = np.linalg.norm(new_verts - current.vertices, axis=1)
        diagnostics.log(outer=outer, stage="outer_done", views=len(active),
                        mean_disp=float(disp.mean()), max_disp=float(disp.max()),
                        seconds=round(time.time() - t0, 2))
        current = current.with_vertices(new_verts)

    return current
