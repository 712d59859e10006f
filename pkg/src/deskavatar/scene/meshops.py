"""Basic mesh utilities: normals, adjacency, stencils, anchor evaluation."""

from __future__ import annotations

import numpy as np

from .types import SceneError, TriMesh

_DEGENERATE_AREA = 1e-14


def triangle_normals(mesh: TriMesh, check_degenerate: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-triangle unit normals and areas.

    Raises SceneError naming the first zero-area triangle when
    check_degenerate is set.
    """
    v = mesh.vertices
    t = mesh.triangles
    e1 = v[t[:, 1]] - v[t[:, 0]]
    e2 = v[t[:, 2]] - v[t[:, 0]]
    cross = np.cross(e1, e2)
    norms = np.linalg.norm(cross, axis=1)
    areas = 0.5 * norms
    if check_degenerate and (areas <= _DEGENERATE_AREA).any():
        bad = int(np.argmax(areas <= _DEGENERATE_AREA))
        raise SceneError(f"degenerate (zero-area) triangle at index {bad}")
    safe = np.maximum(norms, _DEGENERATE_AREA)
    return cross / safe[:, None], areas


def compute_vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted average of incident triangle normals, unit length.

    Equivariant under rigid rotation: normals(R @ mesh) == R @ normals(mesh).
    """
    if mesh.num_triangles < 1:
        raise SceneError("mesh has no triangles")
    tnormals, areas = triangle_normals(mesh)
    weighted = tnormals * areas[:, None]
    out = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(out, mesh.triangles[:, k], weighted)
    lengths = np.linalg.norm(out, axis=1)
    lengths = np.maximum(lengths, 1e-30)
    return out / lengths[:, None]


def edge_list(mesh: TriMesh) -> np.ndarray:
    """Unique undirected edges as a (E, 2) int array with i < j."""
    t = mesh.triangles
    pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def one_ring_neighbors(mesh: TriMesh) -> list[np.ndarray]:
    """Per-vertex arrays of one-ring neighbor indices."""
    edges = edge_list(mesh)
    neighbors: list[list[int]] = [[] for _ in range(mesh.num_vertices)]
    for i, j in edges:
        neighbors[int(i)].append(int(j))
        neighbors[int(j)].append(int(i))
    return [np.asarray(sorted(n), dtype=np.int64) for n in neighbors]


def uniform_laplacian_csr(mesh: TriMesh):
    """Sparse one-ring uniform Laplacian: (L x)_i = mean_j x_j - x_i."""
    from scipy import sparse

    edges = edge_list(mesh)
    n = mesh.num_vertices
    deg = np.zeros(n)
    np.add.at(deg, edges[:, 0], 1.0)
    np.add.at(deg, edges[:, 1], 1.0)
    deg = np.maximum(deg, 1.0)
    rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    vals = np.concatenate([1.0 / deg[edges[:, 0]], 1.0 / deg[edges[:, 1]], -np.ones(n)])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def evaluate_anchors(mesh: TriMesh, positions: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """3D positions of all landmark anchors via barycentric interpolation.

    An explicit vertex array may be supplied to evaluate anchors on deformed
    copies of the mesh without rebuilding it.
    """
    v = mesh.vertices if positions is None else np.asarray(positions, dtype=np.float64)
    out: dict[str, np.ndarray] = {}
    for a in mesh.landmark_anchors:
        tri = mesh.triangles[a.triangle]
        out[a.landmark_id] = a.bary @ v[tri]
    return out


def bounding_box_diagonal(mesh: TriMesh) -> float:
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    return float(np.linalg.norm(hi - lo))


def vertex_tangent_frames(mesh: TriMesh) -> np.ndarray:
    """Per-vertex orthonormal frames (n, 3, 3) with columns tangent/bitangent/normal.

    The tangent follows the texture-u gradient averaged over incident
    triangles, projected orthogonal to the area-weighted normal; the
    bitangent completes the right-handed frame.
    """
    normals = compute_vertex_normals(mesh)
    v, t, uv = mesh.vertices, mesh.triangles, mesh.uvs

    e1 = v[t[:, 1]] - v[t[:, 0]]
    e2 = v[t[:, 2]] - v[t[:, 0]]
    du1 = uv[t[:, 1], 0] - uv[t[:, 0], 0]
    dv1 = uv[t[:, 1], 1] - uv[t[:, 0], 1]
    du2 = uv[t[:, 2], 0] - uv[t[:, 0], 0]
    dv2 = uv[t[:, 2], 1] - uv[t[:, 0], 1]
    det = du1 * dv2 - du2 * dv1
    det = np.where(np.abs(det) < 1e-12, 1e-12, det)
    tan_tri = (e1 * dv2[:, None] - e2 * dv1[:, None]) / det[:, None]

    tangents = np.zeros_like(v)
    for k in range(3):
        np.add.at(tangents, t[:, k], tan_tri)

    # Orthonormalize against the vertex normal; fall back to an arbitrary
    # perpendicular where the UV gradient is degenerate.
    tangents -= (tangents * normals).sum(axis=1, keepdims=True) * normals
    lengths = np.linalg.norm(tangents, axis=1)
    bad = lengths < 1e-9
    if bad.any():
        alt = np.cross(normals[bad], np.array([1.0, 0.0, 0.0]))
        alt_len = np.linalg.norm(alt, axis=1)
        swap = alt_len < 1e-9
        alt[swap] = np.cross(normals[bad][swap], np.array([0.0, 1.0, 0.0]))
        tangents[bad] = alt
        lengths = np.linalg.norm(tangents, axis=1)
    tangents /= lengths[:, None]
    bitangents = np.cross(normals, tangents)

    frames = np.stack([tangents, bitangents, normals], axis=2)
    return frames
