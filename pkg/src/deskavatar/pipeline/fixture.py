"""Synthetic ground-truth scenes for tests and the `synth-fixture` command.

Generates a head-like closed mesh with painted semantic regions, a
procedural skin albedo, the five-view camera layout (front, both
three-quarters, both profiles), SH lighting rigs with positive
irradiance margin, and a 159-entry landmark catalog anchored on the
mesh. Everything is deterministic in the seed.
"""

from __future__ import annotations

import numpy as np

from ..annotate import CatalogEntry, LandmarkCatalog
from ..render.diff import rasterize
from ..render.raster import RenderConfig
from ..render.sh import sh_basis
from ..scene.types import (
    Camera,
    Image,
    LandmarkAnchor,
    REGION_BACKGROUND,
    REGION_EYES,
    REGION_LEFT_BROW,
    REGION_LOWER_LIP,
    REGION_NOSE,
    REGION_RIGHT_BROW,
    REGION_SKIN,
    REGION_UPPER_LIP,
    SHLighting,
    TextureMap,
    TriMesh,
)

LANDMARK_COUNT = 159

#: Angular camera layout around the vertical axis, degrees; front view first.
FIVE_VIEW_ANGLES_DEG = (0.0, -40.0, 40.0, -80.0, 80.0)


def uv_sphere_topology(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lat-long sphere directions, triangles, and UVs.

    The seam column and both poles are duplicated per UV column so UVs
    stay per-vertex (seams handled by vertex duplication).
    """
    dirs, uvs = [], []
    for i in range(1, rows):
        theta = np.pi * i / rows
        for j in range(cols + 1):
            phi = 2.0 * np.pi * j / cols
            dirs.append([np.sin(theta) * np.sin(phi),
                         np.cos(theta),
                         -np.sin(theta) * np.cos(phi)])
            uvs.append([j / cols, i / rows])

    def vid(i: int, j: int) -> int:
        return (i - 1) * (cols + 1) + j

    # Winding below yields outward triangle normals (right-hand rule).
    tris = []
    for i in range(1, rows - 1):
        for j in range(cols):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            tris.append([a, b, c])
            tris.append([b, d, c])
    top = len(dirs)
    for j in range(cols):
        dirs.append([0.0, 1.0, 0.0])
        uvs.append([(j + 0.5) / cols, 0.0])
        tris.append([top + j, vid(1, j + 1), vid(1, j)])
    bottom = len(dirs)
    for j in range(cols):
        dirs.append([0.0, -1.0, 0.0])
        uvs.append([(j + 0.5) / cols, 1.0])
        tris.append([bottom + j, vid(rows - 1, j), vid(rows - 1, j + 1)])

    return (np.asarray(dirs, dtype=np.float64),
            np.asarray(tris, dtype=np.int64),
            np.clip(np.asarray(uvs, dtype=np.float64), 0.0, 1.0))


def _angular_distance(dirs: np.ndarray, center) -> np.ndarray:
    c = np.asarray(center, dtype=np.float64)
    c = c / np.linalg.norm(c)
    return np.arccos(np.clip(dirs @ c, -1.0, 1.0))


# Facial feature centers as directions; the face looks toward -z, +y is up,
# +x is the subject's left.
_FEATURES = {
    "nose": ((0.0, -0.05, -1.0), 0.25, 0.25),
    "brow_left": ((0.35, 0.35, -0.87), 0.06, 0.20),
    "brow_right": ((-0.35, 0.35, -0.87), 0.06, 0.20),
    "lips": ((0.0, -0.42, -0.91), 0.08, 0.18),
    "chin": ((0.0, -0.75, -0.66), 0.10, 0.30),
    "cheek_left": ((0.5, -0.25, -0.8), 0.05, 0.35),
    "cheek_right": ((-0.5, -0.25, -0.8), 0.05, 0.35),
}

_REGION_PAINT = (
    (REGION_EYES, (0.30, 0.18, -0.93), 0.12),
    (REGION_EYES, (-0.30, 0.18, -0.93), 0.12),
    (REGION_LEFT_BROW, (0.35, 0.35, -0.87), 0.17),
    (REGION_RIGHT_BROW, (-0.35, 0.35, -0.87), 0.17),
    (REGION_UPPER_LIP, (0.0, -0.33, -0.94), 0.16),
    (REGION_LOWER_LIP, (0.0, -0.52, -0.85), 0.16),
    (REGION_NOSE, (0.0, -0.05, -1.0), 0.28),
)


def synthetic_head(rows: int = 64, cols: int = 80, radius: float = 1.0,
                   seed: int = 0) -> TriMesh:
    """Closed head-like mesh (~5k vertices at default resolution)."""
    dirs, tris, uvs = uv_sphere_topology(rows, cols)
    rho = np.full(dirs.shape[0], radius)
    for center, amp, sigma in _FEATURES.values():
        ang = _angular_distance(dirs, center)
        rho += amp * np.exp(-0.5 * (ang / sigma) ** 2)
    verts = dirs * rho[:, None]

    labels = np.full(dirs.shape[0], REGION_SKIN, dtype=np.int64)
    # Back of the head stands in for hair/body, merged into background.
    labels[dirs[:, 2] > 0.25] = REGION_BACKGROUND
    for region, center, reach in _REGION_PAINT:
        labels[_angular_distance(dirs, center) < reach] = region

    mesh = TriMesh(verts, tris, uvs, labels)
    anchors = _landmark_anchors(mesh, seed=seed)
    return TriMesh(verts, tris, uvs, labels, anchors)


def _landmark_anchors(mesh: TriMesh, seed: int = 0,
                      count: int = LANDMARK_COUNT) -> tuple[LandmarkAnchor, ...]:
    """Farthest-point sample of front-hemisphere triangle centroids."""
    centers = mesh.vertices[mesh.triangles].mean(axis=1)
    center_dirs = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    front = np.nonzero(center_dirs[:, 2] < -0.15)[0]
    rng = np.random.default_rng(seed)
    chosen = [int(front[rng.integers(len(front))])]
    dist = np.linalg.norm(centers[front] - centers[chosen[0]], axis=1)
    while len(chosen) < count:
        nxt = int(front[np.argmax(dist)])
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(centers[front] - centers[nxt], axis=1))
    bary = np.array([1.0, 1.0, 1.0]) / 3.0
    return tuple(LandmarkAnchor(t, bary, f"lm_{i:03d}") for i, t in enumerate(chosen))


def landmark_catalog(mesh: TriMesh, non_sliding_count: int = 12) -> LandmarkCatalog:
    """Catalog mirroring hand-labeled template anchors.

    The non-sliding subset is the anchors closest to the stable feature
    points (nose tip, eye corners, mouth corners, jaw) -- an engine
    choice, configurable via the catalog file.
    """
    stable_dirs = np.array([
        (0.0, -0.05, -1.0),   # nose tip
        (0.38, 0.18, -0.9), (-0.38, 0.18, -0.9),   # outer eye corners
        (0.22, 0.18, -0.95), (-0.22, 0.18, -0.95),  # inner eye corners
        (0.2, -0.42, -0.88), (-0.2, -0.42, -0.88),  # mouth corners
        (0.72, -0.3, -0.5), (-0.72, -0.3, -0.5),    # jaw at ear
        (0.0, -0.75, -0.66),  # chin
        (0.35, 0.35, -0.87), (-0.35, 0.35, -0.87),  # brow peaks
    ])
    stable_dirs = stable_dirs / np.linalg.norm(stable_dirs, axis=1, keepdims=True)

    positions = {}
    for a in mesh.landmark_anchors:
        positions[a.landmark_id] = a.bary @ mesh.vertices[mesh.triangles[a.triangle]]
    ids = sorted(positions)
    pts = np.array([positions[i] for i in ids])
    pts_dir = pts / np.linalg.norm(pts, axis=1, keepdims=True)

    non_sliding: set[str] = set()
    for sd in stable_dirs[:non_sliding_count]:
        non_sliding.add(ids[int(np.argmax(pts_dir @ sd))])

    entries = []
    for a in mesh.landmark_anchors:
        entries.append(CatalogEntry(a.landmark_id, a.landmark_id.replace("lm_", "landmark-"),
                                    a.triangle, np.asarray(a.bary),
                                    a.landmark_id in non_sliding))
    return LandmarkCatalog(tuple(entries))


def procedural_albedo(size: int = 256, seed: int = 0, moles: int = 6) -> TextureMap:
    """Skin-tone albedo with smooth blotches, dark moles, and stubble noise."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    base = np.array([0.72, 0.55, 0.46]) + rng.normal(0.0, 0.02, 3)
    tex = np.tile(base, (size, size, 1))

    blotch = gaussian_filter(rng.normal(0.0, 1.0, (size, size, 3)), (size / 16, size / 16, 0))
    blotch /= max(np.abs(blotch).max(), 1e-9)
    tex += 0.08 * blotch

    stubble = gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 1.0)
    stubble /= max(np.abs(stubble).max(), 1e-9)
    band = np.zeros((size, size))
    band[int(size * 0.55):int(size * 0.9)] = 1.0
    band = gaussian_filter(band, size / 32)
    tex -= 0.05 * (stubble * band)[:, :, None]

    # Fine skin speckle everywhere: pores/freckles give the photometric
    # terms sub-pixel features to lock onto.
    speckle = gaussian_filter(rng.normal(0.0, 1.0, (size, size, 3)), (1.2, 1.2, 0))
    speckle /= max(np.abs(speckle).max(), 1e-9)
    tex += 0.09 * speckle

    jj, ii = np.meshgrid(np.arange(size), np.arange(size))
    for _ in range(moles):
        cy = rng.uniform(0.2, 0.85) * size
        cx = rng.uniform(0.1, 0.9) * size
        r = rng.uniform(1.5, 3.5) * size / 256
        mask = (ii - cy) ** 2 + (jj - cx) ** 2 < r ** 2
        tex[mask] *= 0.45

    return TextureMap(np.clip(tex, 0.05, 0.95), np.ones((size, size)))


def five_view_cameras(image_size: int = 512, distance: float = 3.0,
                      focal_scale: float = 0.95) -> list[Camera]:
    """Front, both three-quarters, and both profile cameras aimed at the origin."""
    cams = []
    f = focal_scale * image_size
    for ang in FIVE_VIEW_ANGLES_DEG:
        a = np.deg2rad(ang)
        eye = np.array([distance * np.sin(a), 0.06, -distance * np.cos(a)])
        cams.append(Camera.look_at(eye, [0.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                                   f, f, image_size, image_size))
    return cams


def lighting_rig(seed: int = 0, ambient: float = 0.72, directional: float = 0.22) -> SHLighting:
    """Random SH rig with irradiance verified positive over the sphere."""
    rng = np.random.default_rng(seed)
    coeffs = np.zeros((9, 3))
    coeffs[0] = ambient / sh_basis(np.array([0.0, 0.0, 1.0]))[0]
    coeffs[1:4] = rng.normal(0.0, directional, (3, 3))
    coeffs[4:] = rng.normal(0.0, directional * 0.35, (5, 3))

    theta = np.arccos(rng.uniform(-1, 1, 512))
    phi = rng.uniform(0, 2 * np.pi, 512)
    dirs = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi),
                     np.cos(theta)], axis=1)
    irr = sh_basis(dirs) @ coeffs
    lo = irr.min()
    if lo < 0.12:
        scale = (ambient - 0.12) / max(ambient - lo, 1e-9)
        coeffs[1:] *= scale
    return SHLighting(coeffs)


def render_view(mesh: TriMesh, texture: TextureMap, lighting: SHLighting,
                camera: Camera, soft_sigma_px: float = 1.0) -> Image:
    out = rasterize(mesh, texture, lighting, camera,
                    RenderConfig(soft_sigma_px=soft_sigma_px))
    return out.image


def perturb_mesh_smooth(mesh: TriMesh, max_fraction: float = 0.03, bumps: int = 16,
                        seed: int = 0) -> TriMesh:
    """Smooth radial Gaussian bumps; peak displacement is max_fraction of the
    bbox diagonal (the spec's perturbation amplitude cap)."""
    from ..scene.meshops import bounding_box_diagonal, compute_vertex_normals

    rng = np.random.default_rng(seed)
    normals = compute_vertex_normals(mesh)
    verts = mesh.vertices.copy()
    dirs = verts / np.maximum(np.linalg.norm(verts, axis=1, keepdims=True), 1e-12)

    # Bumps live on the camera-visible face: centers well inside the front
    # hemisphere, windowed to exactly zero at 2.5 sigma so no displacement
    # leaks onto surface regions no view can observe.
    disp = np.zeros(mesh.num_vertices)
    front = np.nonzero(dirs[:, 2] < -0.35)[0]
    for _ in range(bumps):
        center = dirs[front[rng.integers(len(front))]]
        sigma = rng.uniform(0.15, 0.28)
        amp = rng.uniform(0.5, 1.0) * (1 if rng.uniform() < 0.5 else -1)
        ang = _angular_distance(dirs, center)
        bump = np.exp(-0.5 * (ang / sigma) ** 2)
        t = np.clip((2.5 * sigma - ang) / (0.5 * sigma), 0.0, 1.0)
        window = t * t * (3.0 - 2.0 * t)
        disp += amp * bump * window

    target = max_fraction * bounding_box_diagonal(mesh)
    peak = np.abs(disp).max()
    if peak > 1e-12:
        disp *= target / peak
    return mesh.with_vertices(verts + disp[:, None] * normals)


# --- Demo animation rig -----------------------------------------------------
# Structural analogue of a production face rig at reduced scale: ~28 sliders,
# ~56 joints (root + jaw chain + feature/support joints), one corrective per
# catalog expression. Lateral joints only skin same-side vertices beyond a
# midline band, which keeps left/right slider effects separable.

LATERAL_BAND = 0.02

_FEATURE_JOINTS = {
    # name: (direction on the head, parent)
    "jaw": ((0.0, -0.55, -0.62), "root"),
    "chin": ((0.0, -0.72, -0.60), "jaw"),
    "lower_lip": ((0.0, -0.5, -0.84), "jaw"),
    "upper_lip": ((0.0, -0.33, -0.92), "root"),
    "mouth_l": ((0.24, -0.42, -0.84), "root"),
    "mouth_r": ((-0.24, -0.42, -0.84), "root"),
    "nose": ((0.0, -0.05, -0.99), "root"),
    "nose_wing_l": ((0.13, -0.10, -0.95), "root"),
    "nose_wing_r": ((-0.13, -0.10, -0.95), "root"),
    "brow_l": ((0.35, 0.35, -0.86), "root"),
    "brow_r": ((-0.35, 0.35, -0.86), "root"),
    "eyelid_l": ((0.30, 0.18, -0.92), "root"),
    "eyelid_r": ((-0.30, 0.18, -0.92), "root"),
    "cheek_l": ((0.50, -0.25, -0.80), "root"),
    "cheek_r": ((-0.50, -0.25, -0.80), "root"),
    "squint_l": ((0.30, 0.02, -0.92), "root"),
    "squint_r": ((-0.30, 0.02, -0.92), "root"),
    "dimple_l": ((0.32, -0.44, -0.78), "root"),
    "dimple_r": ((-0.32, -0.44, -0.78), "root"),
}

# slider -> list of (joint, translation axis+scale, rotation axis+scale)
_SLIDER_CHANNELS = {
    "jaw_open": [("jaw", (0, -0.015, 0.0), (0.30, 0, 0))],
    "pucker": [("mouth_l", (-0.05, 0, -0.02), None),
               ("mouth_r", (0.05, 0, -0.02), None),
               ("upper_lip", (0, -0.01, -0.04), None),
               ("lower_lip", (0, 0.01, -0.04), None)],
    "funnel": [("upper_lip", (0, 0.02, -0.05), None),
               ("lower_lip", (0, -0.02, -0.05), None),
               ("jaw", None, (0.08, 0, 0))],
    "lips_toward": [("upper_lip", (0, -0.025, 0), None),
                    ("lower_lip", (0, 0.025, 0), None)],
    "upper_lip_raise": [("upper_lip", (0, 0.04, -0.01), None)],
    "lower_lip_depress": [("lower_lip", (0, -0.045, 0.01), None)],
}

for _side, _sign in (("l", 1.0), ("r", -1.0)):
    _SLIDER_CHANNELS.update({
        f"smile_{_side}": [(f"mouth_{_side}", (_sign * 0.05, 0.035, -0.01), None)],
        f"lip_corner_pull_{_side}": [(f"mouth_{_side}", (_sign * 0.06, 0.015, 0), None)],
        f"mouth_stretch_{_side}": [(f"mouth_{_side}", (_sign * 0.07, -0.01, 0), None)],
        f"lip_corner_depress_{_side}": [(f"mouth_{_side}", (_sign * 0.03, -0.05, 0), None)],
        f"mouth_dimple_{_side}": [(f"dimple_{_side}", (_sign * 0.04, 0.0, 0.02), None)],
        f"brow_raise_{_side}": [(f"brow_{_side}", (0, 0.06, 0), None)],
        f"brow_lower_{_side}": [(f"brow_{_side}", (0, -0.05, 0.01), None)],
        f"blink_{_side}": [(f"eyelid_{_side}", (0, -0.04, 0), None)],
        f"nose_wrinkle_{_side}": [(f"nose_wing_{_side}", (0, 0.03, 0.01), None),
                                  ("nose", (0, 0.015, 0.005), None)],
        f"cheek_raise_{_side}": [(f"cheek_{_side}", (0, 0.045, -0.01), None),
                                 (f"squint_{_side}", (0, 0.02, 0), None)],
        f"squint_{_side}": [(f"squint_{_side}", (0, 0.03, 0.005), None)],
    })


def _surface_point(mesh: TriMesh, direction, depth: float = 0.92) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    dirs = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    nearest = int(np.argmax(dirs @ d))
    return mesh.vertices[nearest] * depth


def demo_rig(head: TriMesh, support_joints: int = 36, skin_k: int = 6,
             seed: int = 0):
    """Build the bundled demo rig around a synthetic head."""
    from ..rig.model import Corrective, FaceRig, Joint, SliderChannel
    from ..rig.expressions import expression_catalog

    rng = np.random.default_rng(seed)
    eye3 = np.eye(3)
    joints: list[Joint] = [Joint("root", -1, np.zeros(3), eye3)]
    index = {"root": 0}
    for name, (direction, parent) in _FEATURE_JOINTS.items():
        joints.append(Joint(name, index[parent], _surface_point(head, direction), eye3))
        index[name] = len(joints) - 1

    dirs = head.vertices / np.linalg.norm(head.vertices, axis=1, keepdims=True)
    front = np.nonzero(dirs[:, 2] < -0.2)[0]
    chosen = [int(front[rng.integers(len(front))])]
    dist = np.linalg.norm(head.vertices[front] - head.vertices[chosen[0]], axis=1)
    while len(chosen) < support_joints:
        nxt = int(front[np.argmax(dist)])
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(head.vertices[front]
                                               - head.vertices[nxt], axis=1))
    for i, vi in enumerate(chosen):
        joints.append(Joint(f"support_{i:02d}", 0, head.vertices[vi] * 0.92, eye3))
        index[f"support_{i:02d}"] = len(joints) - 1

    # Skin weights: Gaussian falloff to nearby joints, lateral joints clipped
    # to their own side, jaw soft-masked to the lower front face, root floor.
    n = head.num_vertices
    verts = head.vertices
    nj = len(joints)
    weights = np.zeros((n, nj))
    weights[:, 0] = 0.08  # root floor
    jaw_mask = 1.0 / (1.0 + np.exp((verts[:, 1] + 0.30) / 0.05))
    jaw_mask *= dirs[:, 2] < 0.1
    for j, joint in enumerate(joints):
        if j == 0:
            continue
        sigma = 0.22 if not joint.name.startswith("support_") else 0.30
        w = np.exp(-0.5 * (np.linalg.norm(verts - joint.rest_position, axis=1)
                           / sigma) ** 2)
        jx = joint.rest_position[0]
        if abs(jx) > 0.05:
            same_side = np.sign(verts[:, 0]) == np.sign(jx)
            w = w * same_side * (np.abs(verts[:, 0]) >= LATERAL_BAND)
        if joint.name in ("jaw", "chin", "lower_lip"):
            w = w if joint.name != "jaw" else np.maximum(w, 0.5 * jaw_mask)
            w = w * jaw_mask if joint.name == "jaw" else w
        weights[:, j] = w

    order = np.argsort(-weights, axis=1)[:, :skin_k]
    skin_idx = order.astype(np.int64)
    skin_w = np.take_along_axis(weights, order, axis=1)
    skin_w = np.maximum(skin_w, 0.0)
    skin_w[:, 0] = np.maximum(skin_w[:, 0], 1e-3)  # never fully unweighted
    skin_w /= skin_w.sum(axis=1, keepdims=True)

    slider_map = {}
    for name, channels in _SLIDER_CHANNELS.items():
        chans = []
        for joint_name, trans, rot in channels:
            chans.append(SliderChannel(
                index[joint_name],
                np.asarray(trans, dtype=np.float64) if trans else np.zeros(3),
                np.asarray(rot, dtype=np.float64) if rot else np.zeros(3)))
        slider_map[name] = tuple(chans)
    slider_names = tuple(sorted(slider_map))

    # One corrective per catalog expression: smooth bump fields near the
    # expression's driven joints, stored in neutral tangent frames.
    from ..scene.meshops import vertex_tangent_frames

    frames = vertex_tangent_frames(head)
    correctives = []
    for spec in expression_catalog():
        field = np.zeros((n, 3))
        direction = rng.normal(0, 1, 3)
        direction /= np.linalg.norm(direction)
        for slider in spec.activations:
            for joint_name, _, _ in _SLIDER_CHANNELS[slider]:
                p = joints[index[joint_name]].rest_position
                fall = np.exp(-0.5 * (np.linalg.norm(verts - p, axis=1) / 0.18) ** 2)
                field += 0.012 * fall[:, None] * direction
        local = np.einsum("nji,nj->ni", frames, field)
        denom = sum(a * a for a in spec.activations.values())
        act_weights = {k: v / denom for k, v in spec.activations.items()}
        correctives.append(Corrective(spec.name, local, act_weights,
                                      dict(spec.activations)))

    return FaceRig(head, tuple(joints), skin_idx, skin_w, slider_names,
                   slider_map, tuple(correctives))
