"""Expression fitting: the single-view refinement loop in rig-DOF space.

Vertex positions are generated by the rig evaluation and gradients chain
into the slider vector; the DOF parameterization itself supplies the
strong regularization a single view needs. Masked sliders are clamped to
zero throughout and are exactly zero in the result.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from ..annotate import RenderContext
from ..align import refine_rigid
from ..geomopt import (
    ProviderBundle,
    RefinementConfig,
    RegularizerState,
    View,
    _inner_descent,
    _prepare_view,
    build_surrogate,
)
from ..scene.types import Camera, Image, SceneError, SHLighting, TriMesh
from .model import DTYPE, ExpressionSpec, FaceRig, RigTensors, evaluate_torch

logger = logging.getLogger(__name__)


@dataclass
class ExpressionFitConfig:
    outer_iterations: int = 2
    inner_steps: int = 80
    learning_rate: float = 0.08
    w_photo: float = 1.0
    w_sem: float = 0.5
    w_edge: float = 0.01
    w_lap: float = 0.01
    texture_size: int = 256
    guard_every: int = 10
    realign: bool = False

    def refinement(self) -> RefinementConfig:
        return RefinementConfig(
            w_photo=self.w_photo, w_sem=self.w_sem, w_edge=self.w_edge,
            w_lap=self.w_lap, inner_steps=self.inner_steps,
            learning_rate=self.learning_rate, guard_every=self.guard_every,
            texture_size=self.texture_size, realign=False,
        )


@dataclass
class FitResult:
    sliders: dict[str, float]
    mesh: TriMesh
    losses: dict = field(default_factory=dict)


def fit_expression(rig: FaceRig, capture: Image, camera: Camera,
                   providers: ProviderBundle, spec: ExpressionSpec,
                   lighting: SHLighting | None = None,
                   capture_context: RenderContext | None = None,
                   config: ExpressionFitConfig = ExpressionFitConfig()) -> FitResult:
    """Recover slider values for one captured expression.

    Per outer iteration the current rig pose is re-rendered, the capture
    is flow-aligned and projected into a surrogate texture, and the inner
    loop descends on the unmasked sliders. Masked sliders stay exactly 0;
    all sliders are clamped to [0, 1].
    """
    tensors = RigTensors(rig)
    ns = len(rig.slider_names)
    allowed = np.zeros(ns, dtype=bool)
    for name in spec.dof_mask:
        if name not in rig.slider_names:
            raise SceneError(f"DOF mask names unknown slider {name!r}")
        allowed[rig.slider_names.index(name)] = True
    allowed_t = torch.tensor(allowed)

    sliders = torch.zeros(ns, dtype=DTYPE, requires_grad=True)

    def clamp_sliders():
        with torch.no_grad():
            sliders.data.clamp_(0.0, 1.0)
            sliders.data[~allowed_t] = 0.0

    light = lighting or SHLighting.ambient(1.0)
    rcfg = config.refinement()
    current_cam = camera
    losses: dict = {}

    for outer in range(config.outer_iterations):
        with torch.no_grad():
            mesh_now = rig.neutral.with_vertices(
                evaluate_torch(tensors, sliders.detach()).numpy())

        if config.realign:
            try:
                tracked = providers.tracker.landmarks(capture, capture_context)
                res = refine_rigid(mesh_now, None, capture, current_cam,
                                   providers.tracker, target=tracked)
                current_cam = res.camera
            except SceneError as exc:
                logger.warning("expression fit realign skipped: %s", exc)

        seg_real = providers.segmenter.segmentation(capture, capture_context)
        view = View(current_cam, capture, seg_real, light,
                    real_context=capture_context, name=spec.name)
        surr = build_surrogate(view, mesh_now,
                               _initial_texture(mesh_now, view, rcfg),
                               providers, rcfg)
        data = _prepare_view(view, mesh_now, surr, rcfg)

        reg = RegularizerState(mesh_now)
        tris = torch.tensor(rig.neutral.triangles, dtype=torch.long)

        _inner_descent([sliders], lambda: evaluate_torch(tensors, sliders),
                       [data], reg, tris, rcfg, post_step=clamp_sliders)
        clamp_sliders()

    with torch.no_grad():
        final_mesh = rig.neutral.with_vertices(
            evaluate_torch(tensors, sliders.detach()).numpy())
    values = {name: float(sliders[i]) for i, name in enumerate(rig.slider_names)}
    return FitResult(values, final_mesh, losses)


def _initial_texture(mesh: TriMesh, view: View, config: RefinementConfig):
    """Bootstrap texture: the capture projected straight onto the current pose."""
    from ..texproject import gather_texture, project_photons

    photons = project_photons(view.real_image, mesh, view.camera, config.falloff_p)
    return gather_texture(photons, config.photon_k, config.texture_size)
