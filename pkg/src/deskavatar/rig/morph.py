"""Volumetric rig morph: harmonic extension of surface displacements.

The per-vertex displacement from the old neutral to the target is
extended into an oversized box by three decoupled Poisson (Laplace)
solves on a Cartesian grid: grid edges that intersect the old neutral
pin both endpoint nodes to the barycentric displacement at the
intersection (averaged over multiple hits), box faces carry zero-Neumann
conditions. Joints resample the field trilinearly; orientations come
from morphing a small epsilon frame and re-orthogonalizing; corrective
deltas keep their local-frame coordinates, which re-expresses them on
the new neutral's frames.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as slinalg

from ..scene.types import TriMesh
from .model import FaceRig, Joint, RigError

logger = logging.getLogger(__name__)


@dataclass
class MorphField:
    """Displacement samples on a cubic Cartesian grid over an oversized box."""

    origin: np.ndarray  # (3,)
    spacing: float
    displacement: np.ndarray  # (R, R, R, 3)
    dirichlet: np.ndarray  # (R, R, R) bool, constrained nodes

    @property
    def resolution(self) -> int:
        return self.displacement.shape[0]

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation of the displacement field."""
        p = (np.atleast_2d(points) - self.origin) / self.spacing
        r = self.resolution
        p = np.clip(p, 0.0, r - 1.0 - 1e-12)
        i0 = np.floor(p).astype(np.int64)
        f = p - i0
        out = np.zeros((p.shape[0], 3))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (np.where(dx, f[:, 0], 1 - f[:, 0])
                         * np.where(dy, f[:, 1], 1 - f[:, 1])
                         * np.where(dz, f[:, 2], 1 - f[:, 2]))
                    idx = (np.minimum(i0[:, 0] + dx, r - 1),
                           np.minimum(i0[:, 1] + dy, r - 1),
                           np.minimum(i0[:, 2] + dz, r - 1))
                    out += w[:, None] * self.displacement[idx]
        return out


def _edge_triangle_constraints(mesh: TriMesh, displacements: np.ndarray,
                               origin: np.ndarray, spacing: float,
                               resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum of displacement samples and hit counts per grid node.

    For every grid edge intersecting a triangle, both endpoint nodes
    accumulate the barycentrically interpolated displacement at the hit.
    """
    r = resolution
    acc = np.zeros((r, r, r, 3))
    cnt = np.zeros((r, r, r))

    verts = (mesh.vertices - origin) / spacing  # grid units
    disp = displacements
    tris = mesh.triangles

    for ti in range(tris.shape[0]):
        tri = tris[ti]
        a, b, c = verts[tri]
        lo = np.floor(np.minimum(np.minimum(a, b), c)).astype(np.int64) - 1
        hi = np.ceil(np.maximum(np.maximum(a, b), c)).astype(np.int64) + 1
        lo = np.clip(lo, 0, r - 1)
        hi = np.clip(hi, 0, r - 1)
        if (hi <= lo).any():
            continue
        # Candidate axis-aligned unit edges within the bbox, per direction.
        xs = np.arange(lo[0], hi[0] + 1)
        ys = np.arange(lo[1], hi[1] + 1)
        zs = np.arange(lo[2], hi[2] + 1)
        e1 = b - a
        e2 = c - a
        for axis in range(3):
            ranges = [xs, ys, zs]
            ranges[axis] = ranges[axis][:-1] if len(ranges[axis]) > 1 else ranges[axis]
            gx, gy, gz = np.meshgrid(*ranges, indexing="ij")
            starts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(np.float64)
            if not starts.size:
                continue
            d = np.zeros(3)
            d[axis] = 1.0
            # Moeller-Trumbore against the unit segment [start, start + d].
            pvec = np.cross(d, e2)
            det = e1 @ pvec
            if abs(det) < 1e-14:
                continue
            tvec = starts - a
            u = (tvec @ pvec) / det
            qvec = np.cross(tvec, e1)
            v = (qvec @ e2) / det
            t = (qvec @ d) / det
            hit = (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1 + 1e-12) \
                & (t >= 0.0) & (t <= 1.0)
            if not hit.any():
                continue
            bary = np.stack([1.0 - u[hit] - v[hit], u[hit], v[hit]], axis=1)
            d_hit = bary @ disp[tri]
            nodes = starts[hit].astype(np.int64)
            for endpoint in (0, 1):
                n = nodes.copy()
                n[:, axis] += endpoint
                n[:, axis] = np.minimum(n[:, axis], r - 1)
                np.add.at(acc, (n[:, 0], n[:, 1], n[:, 2]), d_hit)
                np.add.at(cnt, (n[:, 0], n[:, 1], n[:, 2]), 1.0)
    return acc, cnt


def solve_morph_field(old_neutral: TriMesh, target_neutral: TriMesh,
                      grid_resolution: int = 64, margin: float = 0.1,
                      tol: float = 1e-8) -> MorphField:
    """Laplace-extend the neutral-to-target displacements over a cubic box."""
    if old_neutral.triangles.shape != target_neutral.triangles.shape or \
            (old_neutral.triangles != target_neutral.triangles).any():
        raise RigError("target neutral topology differs from the rig neutral")
    disp = target_neutral.vertices - old_neutral.vertices

    lo = np.minimum(old_neutral.vertices.min(axis=0), target_neutral.vertices.min(axis=0))
    hi = np.maximum(old_neutral.vertices.max(axis=0), target_neutral.vertices.max(axis=0))
    diag = float(np.linalg.norm(hi - lo))
    center = 0.5 * (lo + hi)
    half = 0.5 * float((hi - lo).max()) + margin * diag
    origin = center - half
    r = grid_resolution
    spacing = 2.0 * half / (r - 1)

    acc, cnt = _edge_triangle_constraints(old_neutral, disp, origin, spacing, r)
    dirichlet = cnt > 0
    if not dirichlet.any():
        raise RigError("grid too coarse: no grid edge intersects the neutral mesh")
    values = np.zeros_like(acc)
    values[dirichlet] = acc[dirichlet] / cnt[dirichlet, None]

    unknown = ~dirichlet
    idx = -np.ones((r, r, r), dtype=np.int64)
    idx[unknown] = np.arange(int(unknown.sum()))
    n = int(unknown.sum())

    ur, uc, uz = np.nonzero(unknown)
    uidx = idx[ur, uc, uz]
    rows, cols, vals = [], [], []
    rhs = np.zeros((n, 3))
    deg = np.zeros(n)
    for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
        nr, nc, nz = ur + d[0], uc + d[1], uz + d[2]
        in_grid = ((nr >= 0) & (nr < r) & (nc >= 0) & (nc < r)
                   & (nz >= 0) & (nz < r))
        deg[uidx[in_grid]] += 1.0
        nbr_unknown = np.zeros_like(in_grid)
        nbr_unknown[in_grid] = unknown[nr[in_grid], nc[in_grid], nz[in_grid]]
        sel = in_grid & nbr_unknown
        rows.append(uidx[sel])
        cols.append(idx[nr[sel], nc[sel], nz[sel]])
        vals.append(-np.ones(int(sel.sum())))
        selk = in_grid & ~nbr_unknown
        rhs[uidx[selk]] += values[nr[selk], nc[selk], nz[selk]]
    rows.append(uidx)
    cols.append(uidx)
    vals.append(deg)
    a_mat = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n))

    try:
        import pyamg

        precond = pyamg.smoothed_aggregation_solver(a_mat).aspreconditioner(cycle="V")
    except Exception:  # pragma: no cover
        precond = None

    field = values.copy()
    for comp in range(3):
        x, info = slinalg.cg(a_mat, rhs[:, comp], rtol=tol * 1e-2, atol=tol * 1e-4,
                             maxiter=20000, M=precond)
        if info != 0:
            raise RigError("morph Poisson solve did not converge; the grid is "
                           f"likely too coarse (CG info {info})")
        field[unknown, comp] = x
    return MorphField(origin, spacing, field, dirichlet)


def _gram_schmidt(frame: np.ndarray) -> np.ndarray:
    """Orthonormalize 3 column vectors, preserving handedness."""
    a, b, c = frame[:, 0], frame[:, 1], frame[:, 2]
    a = a / max(np.linalg.norm(a), 1e-30)
    b = b - (b @ a) * a
    b = b / max(np.linalg.norm(b), 1e-30)
    c = c - (c @ a) * a - (c @ b) * b
    norm_c = np.linalg.norm(c)
    if norm_c < 1e-12:
        c = np.cross(a, b)
    else:
        c = c / norm_c
    if np.linalg.det(np.stack([a, b, c], axis=1)) < 0:
        c = -c
    return np.stack([a, b, c], axis=1)


def volumetric_morph(rig: FaceRig, target_neutral: TriMesh,
                     grid_resolution: int = 64, epsilon: float | None = None,
                     margin: float = 0.1, tol: float = 1e-8
                     ) -> tuple[FaceRig, MorphField]:
    """Morph the rig onto a refined neutral.

    Joint positions resample the harmonic displacement field; joint
    orientations rotate by the Gram-Schmidt-orthonormalized deformation
    of an epsilon sample frame (default epsilon: half the grid spacing).
    Skin weights, slider mappings, corrective activations, and corrective
    local-frame coordinates are left unchanged; the new neutral's tangent
    frames re-express the correctives automatically at evaluation.
    """
    field = solve_morph_field(rig.neutral, target_neutral, grid_resolution,
                              margin, tol)
    eps = 0.5 * field.spacing if epsilon is None else epsilon

    new_joints = []
    for joint in rig.joints:
        x0 = joint.rest_position
        base = x0 + field.sample(x0)[0]
        frame = np.zeros((3, 3))
        for axis in range(3):
            probe = x0.copy()
            probe[axis] += eps
            moved = probe + field.sample(probe)[0]
            frame[:, axis] = (moved - base) / eps
        rotation = _gram_schmidt(frame)
        new_joints.append(Joint(joint.name, joint.parent, base,
                                rotation @ joint.rest_orientation))

    morphed = FaceRig(
        neutral=target_neutral,
        joints=tuple(new_joints),
        skin_indices=rig.skin_indices,
        skin_weights=rig.skin_weights,
        slider_names=rig.slider_names,
        slider_map=rig.slider_map,
        correctives=rig.correctives,
    )
    return morphed, field
