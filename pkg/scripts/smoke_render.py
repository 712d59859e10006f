"""Scratch harness: renderer forward + gradient-vs-FD sanity (not shipped tests)."""

import time

import numpy as np
import torch

from deskavatar.scene import Camera, SHLighting, TextureMap, TriMesh
from deskavatar.render import rasterize, render_with_gradients
from deskavatar.render.diff import TorchRenderer, RenderConfig, rodrigues, shade


def uv_sphere(rows=24, cols=32, radius=1.0):
    """Lat-long sphere with duplicated seam column and pole fans."""
    verts, uvs = [], []
    for i in range(1, rows):
        theta = np.pi * i / rows
        for j in range(cols + 1):
            phi = 2 * np.pi * j / cols
            verts.append([radius * np.sin(theta) * np.cos(phi),
                          radius * np.cos(theta),
                          radius * np.sin(theta) * np.sin(phi)])
            uvs.append([j / cols, i / rows])
    def vid(i, j):
        return (i - 1) * (cols + 1) + j
    tris = []
    for i in range(1, rows - 1):
        for j in range(cols):
            a, b, c, d = vid(i, j), vid(i, j + 1), vid(i + 1, j), vid(i + 1, j + 1)
            tris.append([a, c, b])
            tris.append([b, c, d])
    # pole fans (duplicated pole verts for UV)
    base = len(verts)
    for j in range(cols):
        verts.append([0, radius, 0]); uvs.append([(j + 0.5) / cols, 0.0])
    for j in range(cols):
        tris.append([base + j, vid(1, j), vid(1, j + 1)])
    base2 = len(verts)
    for j in range(cols):
        verts.append([0, -radius, 0]); uvs.append([(j + 0.5) / cols, 1.0])
    for j in range(cols):
        tris.append([base2 + j, vid(rows - 1, j + 1), vid(rows - 1, j)])
    verts = np.array(verts, float)
    uvs = np.clip(np.array(uvs, float), 0, 1)
    tris = np.array(tris, int)
    labels = np.ones(len(verts), dtype=int)
    return TriMesh(verts, tris, uvs, labels)


def orientation_check(mesh, cam):
    # ensure front faces wind negative in screen space
    from deskavatar.render.raster import camera_space, project_pixels
    campts = camera_space(mesh.vertices, cam)
    z = campts[:, 2]
    scr = project_pixels(campts, cam)
    t = mesh.triangles
    sv = scr[t]
    area2 = ((sv[:, 1, 0] - sv[:, 0, 0]) * (sv[:, 2, 1] - sv[:, 0, 1])
             - (sv[:, 1, 1] - sv[:, 0, 1]) * (sv[:, 2, 0] - sv[:, 0, 0]))
    # outward normal toward camera = front
    import deskavatar.scene.meshops as mo
    tn, _ = mo.triangle_normals(mesh)
    centers = mesh.vertices[t].mean(axis=1)
    todir = centers - cam.world_center()
    facing = (tn * todir).sum(axis=1) < 0  # normal opposes view dir -> front
    print("front faces with negative screen area:", (area2[facing] < 0).mean())


def main():
    rng = np.random.default_rng(0)
    mesh = uv_sphere()
    print("verts", mesh.num_vertices, "tris", mesh.num_triangles)
    cam = Camera.look_at([0, 0, -3.0], [0, 0, 0], [0, 1, 0], 200, 200, 128, 128)
    orientation_check(mesh, cam)

    # smooth random texture
    from scipy.ndimage import gaussian_filter
    tex_raw = rng.uniform(0.2, 0.8, (64, 64, 3))
    tex_raw = gaussian_filter(tex_raw, (6, 6, 0))
    tex = TextureMap(np.clip(tex_raw, 0, 1), np.ones((64, 64)))
    coeffs = np.zeros((9, 3))
    coeffs[0] = 2.0
    coeffs[1:] = rng.normal(0, 0.1, (8, 3))
    light = SHLighting(coeffs)

    t0 = time.time()
    out = rasterize(mesh, tex, light, cam)
    print(f"raster {time.time()-t0:.3f}s, covered {out.fragments.covered.mean():.3f}",
          "img range", out.image.pixels.min(), out.image.pixels.max())

    # gradient check: pixel sum loss
    def loss_fn(img):
        return img.sum()

    t0 = time.time()
    ro = render_with_gradients(mesh, tex, light, cam, loss_fn)
    print(f"grad render {time.time()-t0:.3f}s")
    g = ro.gradients

    # FD on a full re-render (fresh rasterization each probe)
    def full_loss(vertices=None, texels=None, sh=None, omega=None, delta=None):
        m = mesh if vertices is None else mesh.with_vertices(vertices)
        t = tex if texels is None else TextureMap(texels, tex.coverage, tex.fill_color)
        l = light if sh is None else SHLighting(sh)
        c = cam
        if omega is not None or delta is not None:
            om = np.zeros(3) if omega is None else omega
            de = np.zeros(3) if delta is None else delta
            with torch.no_grad():
                rot = (torch.tensor(cam.rotation) @ rodrigues(torch.tensor(om))).numpy()
            c = cam.with_extrinsics(rot, cam.translation + de)
        return rasterize(m, t, l, c).image.pixels.sum()

    h = 1e-4
    errs = []
    for _ in range(20):
        vi = rng.integers(0, mesh.num_vertices)
        k = rng.integers(0, 3)
        vp = mesh.vertices.copy(); vm = mesh.vertices.copy()
        vp[vi, k] += h; vm[vi, k] -= h
        fd = (full_loss(vertices=vp) - full_loss(vertices=vm)) / (2 * h)
        an = g.vertices[vi, k]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        errs.append((rel, an, fd))
    errs.sort(key=lambda e: -e[0])
    print("worst vertex grad rel errors:", [(f"{e[0]:.2e}", f"{e[1]:.2e}", f"{e[2]:.2e}") for e in errs[:5]])

    # texel gradients
    errs = []
    for _ in range(10):
        ti, tj = rng.integers(0, 64, 2)
        ch = rng.integers(0, 3)
        tp = tex.texels.copy(); tm = tex.texels.copy()
        tp[ti, tj, ch] += h; tm[ti, tj, ch] -= h
        fd = (full_loss(texels=np.clip(tp, 0, 1)) - full_loss(texels=np.clip(tm, 0, 1))) / (2 * h)
        an = g.texels[ti, tj, ch]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        errs.append(rel)
    print("worst texel grad rel:", max(errs))

    # sh gradients
    errs = []
    for i in range(9):
        for ch in range(3):
            cp = coeffs.copy(); cmn = coeffs.copy()
            cp[i, ch] += h; cmn[i, ch] -= h
            fd = (full_loss(sh=cp) - full_loss(sh=cmn)) / (2 * h)
            an = g.sh[i, ch]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            errs.append(rel)
    print("worst sh grad rel:", max(errs))

    # extrinsics
    errs = []
    for i in range(6):
        hp = 1e-6
        dp = np.zeros(6); dp[i] = hp
        fd = (full_loss(omega=dp[:3], delta=dp[3:]) - full_loss(omega=-dp[:3], delta=-dp[3:])) / (2 * hp)
        an = g.extrinsics[i]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        errs.append(rel)
    print("worst extrinsics grad rel:", max(errs))


if __name__ == "__main__":
    main()
