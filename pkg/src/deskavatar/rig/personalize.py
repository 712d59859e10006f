"""Rig personalization from reconstructed expression geometry.

Each fitted primary expression replaces its corrective so the rig
reproduces the reconstruction exactly at the expression's maximum pose;
correctives that were not refit but depend on modified primaries receive
compensating deltas that keep their full evaluation unchanged. Symmetric
expressions can additionally be split into left/right corrective halves.
"""

from __future__ import annotations

import logging

import numpy as np

from ..scene.meshops import vertex_tangent_frames
from ..scene.types import TriMesh
from .model import Corrective, ExpressionSpec, FaceRig, RigError, RigTensors, evaluate

logger = logging.getLogger(__name__)

#: Vertices within this |x| band of the midline belong to both halves.
DEFAULT_LATERAL_BAND = 0.02


def personalize(rig: FaceRig, fitted: list[tuple[ExpressionSpec, TriMesh]],
                split: bool = False,
                lateral_band: float = DEFAULT_LATERAL_BAND) -> FaceRig:
    """Replace fitted expressions' correctives; compensate dependent ones."""
    names = {c.name for c in rig.correctives}
    for spec, recon in fitted:
        if spec.name not in names:
            raise RigError(f"rig has no corrective for expression {spec.name!r}")
        if recon.num_vertices != rig.neutral.num_vertices or \
                (recon.triangles != rig.neutral.triangles).any():
            raise RigError(f"reconstruction for {spec.name!r} does not match the "
                           "rig topology")

    frames = vertex_tangent_frames(rig.neutral)
    tensors = RigTensors(rig)
    changes: dict[str, np.ndarray] = {}
    replaced: dict[str, Corrective] = {}

    for spec, recon in fitted:
        old = rig.corrective_named(spec.name)
        sliders = dict(spec.activations)
        activation = old.activation(sliders)
        if abs(activation) < 1e-9:
            raise RigError(f"corrective {spec.name!r} inactive at its own maximum")
        full = evaluate(rig, sliders, tensors)
        # Linearity in corrective deltas: subtracting this corrective's
        # world-space contribution gives the evaluation without it.
        contribution = activation * np.einsum("nij,nj->ni", frames, old.deltas_local)
        base = full.vertices - contribution
        delta_world = (recon.vertices - base) / activation
        delta_local = np.einsum("nji,nj->ni", frames, delta_world)
        changes[spec.name] = delta_local - old.deltas_local
        replaced[spec.name] = Corrective(old.name, delta_local,
                                         old.activation_weights, old.defining_sliders)

    new_correctives = []
    for c in rig.correctives:
        if c.name in replaced:
            new_correctives.append(replaced[c.name])
            continue
        compensation = np.zeros_like(c.deltas_local)
        for name, delta_change in changes.items():
            modified = rig.corrective_named(name)
            weight = modified.activation(dict(c.defining_sliders))
            if abs(weight) > 1e-12:
                compensation -= weight * delta_change
        if np.abs(compensation).max() > 0:
            new_correctives.append(Corrective(c.name, c.deltas_local + compensation,
                                              c.activation_weights, c.defining_sliders))
        else:
            new_correctives.append(c)

    out = FaceRig(rig.neutral, rig.joints, rig.skin_indices, rig.skin_weights,
                  rig.slider_names, rig.slider_map, tuple(new_correctives))
    if split:
        specs_by_name = {spec.name: spec for spec, _ in fitted}
        out = split_symmetric_correctives(out, list(specs_by_name.values()),
                                          lateral_band)
    return out


def _half_activation(spec: ExpressionSpec, half: str) -> dict[str, float]:
    return {k: v for k, v in spec.activations.items()
            if spec.split_map.get(k) == half or k not in spec.split_map}


def split_expression_spec(spec: ExpressionSpec) -> tuple[ExpressionSpec, ExpressionSpec]:
    """Left/right variants: the other half's sliders set identically to zero."""
    if not spec.split_map:
        raise RigError(f"expression {spec.name!r} has no symmetry split map")
    halves = []
    for half in ("left", "right"):
        act = _half_activation(spec, half)
        halves.append(ExpressionSpec(
            name=f"{spec.name}--{half}",
            activations=act,
            dof_mask=tuple(sorted(act)),
            split_map={},
            group=spec.group,
        ))
    return halves[0], halves[1]


def split_symmetric_correctives(rig: FaceRig, specs: list[ExpressionSpec],
                                lateral_band: float = DEFAULT_LATERAL_BAND) -> FaceRig:
    """Add masked left/right corrective halves for splittable expressions.

    The half corrective carries the expression's delta on its side of the
    midline (x > 0 is the subject's left), shared midline-band vertices
    split evenly, and activates from that half's sliders alone.
    """
    x = rig.neutral.vertices[:, 0]
    masks = {
        "left": np.where(x > lateral_band, 1.0, np.where(x < -lateral_band, 0.0, 0.5)),
        "right": np.where(x < -lateral_band, 1.0, np.where(x > lateral_band, 0.0, 0.5)),
    }
    extra: list[Corrective] = []
    existing = {c.name for c in rig.correctives}
    for spec in specs:
        if not spec.split_map or spec.name not in existing:
            continue
        base = rig.corrective_named(spec.name)
        for half in ("left", "right"):
            act = _half_activation(spec, half)
            denom = sum(v * v for v in act.values())
            if denom <= 0:
                continue
            weights = {k: v / denom for k, v in act.items()}
            extra.append(Corrective(
                f"{spec.name}--{half}",
                base.deltas_local * masks[half][:, None],
                weights, dict(act)))
    if not extra:
        return rig
    return FaceRig(rig.neutral, rig.joints, rig.skin_indices, rig.skin_weights,
                   rig.slider_names, rig.slider_map,
                   tuple(list(rig.correctives) + extra))
