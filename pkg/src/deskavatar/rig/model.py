"""Face rig data model and evaluation.

Deformation model: sliders drive per-joint translation/rotation deltas in
each joint's rest-local frame; world transforms compose through the
hierarchy; vertices deform by linear blend skinning; corrective deltas,
stored in per-vertex tangent frames of the neutral mesh, are added on top
with slider-linear activation weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from ..scene.io import FORMAT_VERSION, ParseError, _LineReader, check_magic, _fmt
from ..scene.io import load_mesh, save_mesh
from ..scene.meshops import vertex_tangent_frames
from ..scene.types import SceneError, TriMesh

RIG_MAGIC = "DARIG"
DTYPE = torch.float64

_W_SUM_TOL = 1e-9
_ORTHO_TOL = 1e-9


class RigError(SceneError):
    pass


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int  # -1 for the root
    rest_position: np.ndarray  # (3,) world
    rest_orientation: np.ndarray  # (3, 3) world, orthonormal


@dataclass(frozen=True)
class SliderChannel:
    """One slider's effect on one joint, in the joint's rest-local frame.

    translation = value * translation_axis; rotation = exp(skew(value *
    rotation_axis)), so the axis magnitude carries the rotation scale.
    """

    joint: int
    translation_axis: np.ndarray  # (3,)
    rotation_axis: np.ndarray  # (3,)


@dataclass(frozen=True)
class Corrective:
    """Named blendshape: per-vertex deltas in neutral-mesh tangent frames.

    activation(s) = sum_k activation_weights[k] * s_k; defining_sliders is
    the slider configuration at which this corrective is fully active
    (activation exactly 1), i.e. its expression's maximum pose.
    """

    name: str
    deltas_local: np.ndarray  # (n, 3)
    activation_weights: Mapping[str, float]
    defining_sliders: Mapping[str, float]

    def activation(self, sliders: Mapping[str, float]) -> float:
        return float(sum(w * sliders.get(k, 0.0)
                         for k, w in self.activation_weights.items()))


@dataclass(frozen=True)
class ExpressionSpec:
    """A capturable expression: activations, fit DOF mask, symmetry split."""

    name: str
    activations: Mapping[str, float]  # slider -> value at the expression maximum
    dof_mask: tuple[str, ...]  # sliders allowed to move during fitting
    split_map: Mapping[str, str] = field(default_factory=dict)  # slider -> left|right
    group: int = 1

    def __post_init__(self):
        masked_out = set(self.activations) - set(self.dof_mask)
        if masked_out:
            raise RigError(f"expression {self.name!r}: activations use sliders "
                           f"outside the DOF mask: {sorted(masked_out)}")
        if self.split_map:
            halves = set(self.split_map.values())
            if not halves <= {"left", "right"}:
                raise RigError(f"expression {self.name!r}: split halves must be "
                               "'left' or 'right'")
            if set(self.split_map) - set(self.activations):
                raise RigError(f"expression {self.name!r}: split map names sliders "
                               "outside the activation set")


@dataclass(frozen=True)
class FaceRig:
    neutral: TriMesh
    joints: tuple[Joint, ...]
    skin_indices: np.ndarray  # (n, K) int64 joint ids
    skin_weights: np.ndarray  # (n, K) float64, rows sum to 1
    slider_names: tuple[str, ...]
    slider_map: Mapping[str, tuple[SliderChannel, ...]]
    correctives: tuple[Corrective, ...]

    def __post_init__(self):
        n = self.neutral.num_vertices
        if self.skin_indices.shape != self.skin_weights.shape \
                or self.skin_indices.shape[0] != n:
            raise RigError("skin weight arrays must be (n, K)")
        if self.skin_weights.min(initial=0.0) < -_W_SUM_TOL:
            raise RigError("skin weights must be nonnegative")
        sums = self.skin_weights.sum(axis=1)
        if np.abs(sums - 1.0).max() > _W_SUM_TOL:
            raise RigError("skin weights must sum to 1 per vertex (within 1e-9)")
        nj = len(self.joints)
        if self.skin_indices.min(initial=0) < 0 or self.skin_indices.max(initial=0) >= nj:
            raise RigError("skin indices reference unknown joints")
        for j, joint in enumerate(self.joints):
            if joint.parent >= j:
                raise RigError(f"joint {joint.name!r}: parents must precede children")
            r = joint.rest_orientation
            if np.abs(r @ r.T - np.eye(3)).max() > _ORTHO_TOL:
                raise RigError(f"joint {joint.name!r}: orientation not orthonormal")
        for name, channels in self.slider_map.items():
            if name not in self.slider_names:
                raise RigError(f"slider map names unknown slider {name!r}")
            for ch in channels:
                if not (0 <= ch.joint < nj):
                    raise RigError(f"slider {name!r} drives unknown joint {ch.joint}")
        for c in self.correctives:
            if c.deltas_local.shape != (n, 3):
                raise RigError(f"corrective {c.name!r}: delta shape mismatch")
            act = c.activation(dict(c.defining_sliders))
            if abs(act - 1.0) > 1e-9:
                raise RigError(f"corrective {c.name!r}: activation at its defining "
                               f"sliders is {act}, expected 1")

    def corrective_named(self, name: str) -> Corrective:
        for c in self.correctives:
            if c.name == name:
                return c
        raise RigError(f"rig has no corrective named {name!r}")

    def slider_vector(self, sliders: Mapping[str, float]) -> np.ndarray:
        unknown = set(sliders) - set(self.slider_names)
        if unknown:
            raise RigError(f"unknown sliders: {sorted(unknown)}")
        vec = np.zeros(len(self.slider_names))
        for i, name in enumerate(self.slider_names):
            vec[i] = float(sliders.get(name, 0.0))
        if vec.min(initial=0.0) < 0.0 or vec.max(initial=0.0) > 1.0 + 1e-12:
            raise RigError("slider values must lie in [0, 1]")
        return vec


class RigTensors:
    """Torch-side constants for differentiable rig evaluation."""

    def __init__(self, rig: FaceRig):
        self.rig = rig
        nj = len(rig.joints)
        ns = len(rig.slider_names)
        self.parents = [j.parent for j in rig.joints]
        self.rest_rot = torch.tensor(np.stack([j.rest_orientation for j in rig.joints]),
                                     dtype=DTYPE)
        self.rest_pos = torch.tensor(np.stack([j.rest_position for j in rig.joints]),
                                     dtype=DTYPE)
        # Rest-local frames relative to the parent.
        local_rot = []
        local_pos = []
        for j, joint in enumerate(rig.joints):
            if joint.parent < 0:
                local_rot.append(joint.rest_orientation)
                local_pos.append(joint.rest_position)
            else:
                parent = rig.joints[joint.parent]
                local_rot.append(parent.rest_orientation.T @ joint.rest_orientation)
                local_pos.append(parent.rest_orientation.T
                                 @ (joint.rest_position - parent.rest_position))
        self.local_rot = torch.tensor(np.stack(local_rot), dtype=DTYPE)
        self.local_pos = torch.tensor(np.stack(local_pos), dtype=DTYPE)

        # Slider -> joint axes as dense (ns, nj, 3) matrices (sparse in practice).
        trans_axes = np.zeros((ns, nj, 3))
        rot_axes = np.zeros((ns, nj, 3))
        for name, channels in rig.slider_map.items():
            si = rig.slider_names.index(name)
            for ch in channels:
                trans_axes[si, ch.joint] += ch.translation_axis
                rot_axes[si, ch.joint] += ch.rotation_axis
        self.trans_axes = torch.tensor(trans_axes, dtype=DTYPE)
        self.rot_axes = torch.tensor(rot_axes, dtype=DTYPE)

        self.skin_idx = torch.tensor(rig.skin_indices, dtype=torch.long)
        self.skin_w = torch.tensor(rig.skin_weights, dtype=DTYPE)
        self.neutral = torch.tensor(rig.neutral.vertices, dtype=DTYPE)

        frames = vertex_tangent_frames(rig.neutral)
        self.frames = torch.tensor(frames, dtype=DTYPE)  # (n, 3, 3)
        self.corr_world = torch.tensor(
            np.stack([np.einsum("nij,nj->ni", frames, c.deltas_local)
                      for c in rig.correctives])
            if rig.correctives else np.zeros((0, rig.neutral.num_vertices, 3)),
            dtype=DTYPE)
        act = np.zeros((len(rig.correctives), ns))
        for ci, c in enumerate(rig.correctives):
            for k, w in c.activation_weights.items():
                act[ci, rig.slider_names.index(k)] = w
        self.corr_act = torch.tensor(act, dtype=DTYPE)


def _rot_from_axisangle(vec: torch.Tensor) -> torch.Tensor:
    """Batched Rodrigues for (J, 3) axis-angle vectors, safe at zero."""
    t2 = (vec * vec).sum(dim=1)
    small = t2 < 1e-12
    t2_safe = torch.where(small, torch.ones_like(t2), t2)
    theta = torch.sqrt(t2_safe)
    a = torch.where(small, 1.0 - t2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - t2 / 24.0, (1.0 - torch.cos(theta)) / t2_safe)
    x, y, z = vec[:, 0], vec[:, 1], vec[:, 2]
    zero = torch.zeros_like(x)
    k = torch.stack([
        torch.stack([zero, -z, y], dim=1),
        torch.stack([z, zero, -x], dim=1),
        torch.stack([-y, x, zero], dim=1),
    ], dim=1)
    eye = torch.eye(3, dtype=vec.dtype).expand(vec.shape[0], 3, 3)
    return eye + a[:, None, None] * k + b[:, None, None] * (k @ k)


def evaluate_torch(tensors: RigTensors, slider_values: torch.Tensor) -> torch.Tensor:
    """Differentiable rig evaluation: slider vector (ns,) -> vertices (n, 3)."""
    trans = torch.einsum("s,sjd->jd", slider_values, tensors.trans_axes)
    rotvec = torch.einsum("s,sjd->jd", slider_values, tensors.rot_axes)
    delta_rot = _rot_from_axisangle(rotvec)

    nj = len(tensors.parents)
    world_rot: list[torch.Tensor] = [None] * nj
    world_pos: list[torch.Tensor] = [None] * nj
    for j in range(nj):
        lr = tensors.local_rot[j] @ delta_rot[j]
        lp = tensors.local_pos[j] + tensors.local_rot[j] @ trans[j]
        p = tensors.parents[j]
        if p < 0:
            world_rot[j] = lr
            world_pos[j] = lp
        else:
            world_rot[j] = world_rot[p] @ lr
            world_pos[j] = world_pos[p] + world_rot[p] @ lp
    wr = torch.stack(world_rot)
    wp = torch.stack(world_pos)

    # Skinning matrices relative to rest.
    mrot = wr @ tensors.rest_rot.transpose(1, 2)
    mtrans = wp - torch.einsum("jab,jb->ja", mrot, tensors.rest_pos)

    rot_v = mrot[tensors.skin_idx]  # (n, K, 3, 3)
    trans_v = mtrans[tensors.skin_idx]  # (n, K, 3)
    v = tensors.neutral
    skinned = torch.einsum("nkab,nb->nka", rot_v, v) + trans_v
    out = (tensors.skin_w.unsqueeze(2) * skinned).sum(dim=1)

    if tensors.corr_world.shape[0]:
        act = tensors.corr_act @ slider_values  # (C,)
        out = out + torch.einsum("c,cnd->nd", act, tensors.corr_world)
    return out


def evaluate(rig: FaceRig, sliders: Mapping[str, float],
             tensors: RigTensors | None = None) -> TriMesh:
    """Deformed mesh at the given slider values (unknown slider -> error)."""
    vec = rig.slider_vector(sliders)
    if tensors is None:
        tensors = RigTensors(rig)
    with torch.no_grad():
        verts = evaluate_torch(tensors, torch.tensor(vec, dtype=DTYPE))
    return rig.neutral.with_vertices(verts.numpy())


def save_rig(rig: FaceRig, path: str | Path) -> None:
    """Self-contained structured-text rig file (neutral mesh embedded)."""
    path = Path(path)
    lines = [f"{RIG_MAGIC} {FORMAT_VERSION}"]
    mesh_path = path.with_suffix(path.suffix + ".mesh")
    save_mesh(rig.neutral, mesh_path)
    lines.append(f"neutral {mesh_path.name}")

    lines.append(f"joints {len(rig.joints)}")
    for j in rig.joints:
        vals = [j.name, str(j.parent)] + [_fmt(x) for x in j.rest_position] \
            + [_fmt(x) for x in j.rest_orientation.ravel()]
        lines.append(" ".join(vals))

    n, k = rig.skin_indices.shape
    lines.append(f"skin {n} {k}")
    for i in range(n):
        row = []
        for c in range(k):
            row.append(str(int(rig.skin_indices[i, c])))
            row.append(_fmt(rig.skin_weights[i, c]))
        lines.append(" ".join(row))

    lines.append(f"sliders {len(rig.slider_names)}")
    for name in rig.slider_names:
        channels = rig.slider_map.get(name, ())
        lines.append(f"{name} {len(channels)}")
        for ch in channels:
            lines.append(" ".join([str(ch.joint)]
                                  + [_fmt(x) for x in ch.translation_axis]
                                  + [_fmt(x) for x in ch.rotation_axis]))

    lines.append(f"correctives {len(rig.correctives)}")
    for c in rig.correctives:
        lines.append(f"{c.name} {len(c.activation_weights)} {len(c.defining_sliders)}")
        for key, w in sorted(c.activation_weights.items()):
            lines.append(f"{key} {_fmt(w)}")
        for key, w in sorted(c.defining_sliders.items()):
            lines.append(f"{key} {_fmt(w)}")
        for row in c.deltas_local:
            lines.append(" ".join(_fmt(x) for x in row))

    path.write_text("\n".join(lines) + "\n")


def load_rig(path: str | Path) -> FaceRig:
    path = Path(path)
    reader = _LineReader(path.read_bytes())
    check_magic(reader, RIG_MAGIC)

    parts = reader.fields(2, "neutral reference")
    if parts[0] != "neutral":
        raise ParseError("expected neutral mesh reference", reader.offset)
    neutral = load_mesh(path.parent / parts[1])
    n = neutral.num_vertices

    parts = reader.fields(2, "joint count")
    if parts[0] != "joints":
        raise ParseError("expected joints section", reader.offset)
    joints = []
    for _ in range(int(parts[1])):
        row = reader.fields(14, "joint row")
        try:
            joints.append(Joint(row[0], int(row[1]),
                                np.array([float(x) for x in row[2:5]]),
                                np.array([float(x) for x in row[5:14]]).reshape(3, 3)))
        except ValueError:
            raise ParseError("invalid joint row", reader.offset) from None

    parts = reader.fields(3, "skin header")
    if parts[0] != "skin":
        raise ParseError("expected skin section", reader.offset)
    ns_rows, k = int(parts[1]), int(parts[2])
    if ns_rows != n:
        raise ParseError("skin rows disagree with the neutral mesh", reader.offset)
    skin_idx = np.zeros((n, k), dtype=np.int64)
    skin_w = np.zeros((n, k))
    for i in range(n):
        row = reader.fields(2 * k, "skin row")
        try:
            for c in range(k):
                skin_idx[i, c] = int(row[2 * c])
                skin_w[i, c] = float(row[2 * c + 1])
        except ValueError:
            raise ParseError("invalid skin row", reader.offset) from None

    parts = reader.fields(2, "slider count")
    if parts[0] != "sliders":
        raise ParseError("expected sliders section", reader.offset)
    slider_names = []
    slider_map: dict[str, tuple[SliderChannel, ...]] = {}
    for _ in range(int(parts[1])):
        head = reader.fields(2, "slider header")
        name, nch = head[0], int(head[1])
        channels = []
        for _ in range(nch):
            row = reader.fields(7, "slider channel")
            try:
                channels.append(SliderChannel(
                    int(row[0]), np.array([float(x) for x in row[1:4]]),
                    np.array([float(x) for x in row[4:7]])))
            except ValueError:
                raise ParseError("invalid slider channel", reader.offset) from None
        slider_names.append(name)
        slider_map[name] = tuple(channels)

    parts = reader.fields(2, "corrective count")
    if parts[0] != "correctives":
        raise ParseError("expected correctives section", reader.offset)
    correctives = []
    for _ in range(int(parts[1])):
        head = reader.fields(3, "corrective header")
        name, nact, ndef = head[0], int(head[1]), int(head[2])
        act = {}
        for _ in range(nact):
            row = reader.fields(2, "activation weight")
            act[row[0]] = float(row[1])
        defining = {}
        for _ in range(ndef):
            row = reader.fields(2, "defining slider")
            defining[row[0]] = float(row[1])
        deltas = np.zeros((n, 3))
        for i in range(n):
            deltas[i] = reader.floats(3, "corrective delta")
        correctives.append(Corrective(name, deltas, act, defining))

    try:
        return FaceRig(neutral, tuple(joints), skin_idx, skin_w, tuple(slider_names),
                       slider_map, tuple(correctives))
    except RigError as exc:
        raise ParseError(f"rig violates invariants: {exc}", reader.offset) from exc
