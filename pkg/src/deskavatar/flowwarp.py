"""Segmentation-driven optical flow, Laplace post-processing, and warping.

The flow field f is defined on the target image's pixel-center lattice;
warping is backward: output(p) = source(p + f(p)) with bilinear sampling
and edge-clamped lookups. Solving minimizes the one-hot segmentation
mismatch plus norm and 5x5-stencil Laplacian regularizers, coarse to
fine. The post-process rebuilds the flow as the discrete-harmonic
(5-point stencil) extension of its values on segmentation-boundary
pixels, with zero-Neumann image borders.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .annotate import NUM_REGIONS, SegMap
from .scene.types import Image, SceneError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass(frozen=True)
class FlowField:
    """Dense 2D displacement grid in pixels; [..., 0] is x (columns), [..., 1] y."""

    vectors: np.ndarray  # (H, W, 2) float64

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)
        if v.ndim != 3 or v.shape[2] != 2:
            raise SceneError(f"flow must be (H, W, 2), got {v.shape}")
        if not np.isfinite(v).all():
            raise SceneError("flow contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]

    @staticmethod
    def zero(height: int, width: int) -> "FlowField":
        return FlowField(np.zeros((height, width, 2)))


def _bilinear_indexspace(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample arr (H, W, C) at fractional array-index coordinates, edge-clamped."""
    h, w = arr.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    flat = arr.reshape(h * w, -1)
    v00 = flat[y0 * w + x0]
    v10 = flat[y0 * w + x1]
    v01 = flat[y1 * w + x0]
    v11 = flat[y1 * w + x1]
    return ((1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10
            + (1 - fx) * fy * v01 + fx * fy * v11)


def warp_array(arr: np.ndarray, flow: FlowField) -> np.ndarray:
    """Backward-warp an (H, W[, C]) array by the flow."""
    if arr.shape[:2] != flow.shape:
        raise SceneError("array resolution does not match the flow field")
    squeeze = arr.ndim == 2
    data = arr[..., None] if squeeze else arr
    h, w = flow.shape
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
    xs = cols + flow.vectors[..., 0]
    ys = rows + flow.vectors[..., 1]
    out = _bilinear_indexspace(np.asarray(data, dtype=np.float64), xs, ys)
    return out[..., 0] if squeeze else out


def warp_image(image: Image, flow: FlowField) -> Image:
    pixels = np.clip(warp_array(image.pixels, flow), 0.0, 1.0)
    mask = warp_array(image.background_mask.astype(np.float64), flow) > 0.5
    return Image(pixels, mask)


def warp_segmap(seg: SegMap, flow: FlowField) -> SegMap:
    onehot = warp_array(seg.one_hot(), flow)
    return SegMap(onehot.argmax(axis=2).astype(np.int64))


def warp_landmarks(positions: np.ndarray, flow: FlowField) -> np.ndarray:
    """Displace landmark positions by the flow sampled at their pre-warp location.

    Positions use pixel-center coordinates (pixel (i, j) center at
    (j + 0.5, i + 0.5)); flow grid nodes live at those centers.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    sampled = _bilinear_indexspace(flow.vectors, pos[:, 0] - 0.5, pos[:, 1] - 0.5)
    return pos + sampled


# 4th-order 1D second-derivative stencil over a 5-sample window.
_LAP5_1D = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def _laplacian5_torch(field: torch.Tensor) -> torch.Tensor:
    """Per-channel 5x5-support Laplacian (sum of the two 4th-order axis stencils)."""
    c = field.shape[1]
    kx = torch.zeros(c, 1, 1, 5, dtype=field.dtype)
    kx[:, 0, 0, :] = torch.tensor(_LAP5_1D, dtype=field.dtype)
    ky = torch.zeros(c, 1, 5, 1, dtype=field.dtype)
    ky[:, 0, :, 0] = torch.tensor(_LAP5_1D, dtype=field.dtype)
    padded_x = F.pad(field, (2, 2, 0, 0), mode="replicate")
    padded_y = F.pad(field, (0, 0, 2, 2), mode="replicate")
    return (F.conv2d(padded_x, kx, groups=c)
            + F.conv2d(padded_y, ky, groups=c))


def _warp_torch(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward warp of src (C, H, W) by flow (H, W, 2), same semantics as warp_array."""
    c, h, w = src.shape
    cols, rows = torch.meshgrid(torch.arange(w, dtype=src.dtype),
                                torch.arange(h, dtype=src.dtype), indexing="xy")
    xs = (cols + flow[..., 0]).clamp(0.0, w - 1.0)
    ys = (rows + flow[..., 1]).clamp(0.0, h - 1.0)
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0l = x0.long().clamp(0, w - 1)
    x1l = (x0.long() + 1).clamp(0, w - 1)
    y0l = y0.long().clamp(0, h - 1)
    y1l = (y0.long() + 1).clamp(0, h - 1)
    flat = src.reshape(c, h * w)
    v00 = flat[:, (y0l * w + x0l).reshape(-1)].reshape(c, h, w)
    v10 = flat[:, (y0l * w + x1l).reshape(-1)].reshape(c, h, w)
    v01 = flat[:, (y1l * w + x0l).reshape(-1)].reshape(c, h, w)
    v11 = flat[:, (y1l * w + x1l).reshape(-1)].reshape(c, h, w)
    return ((1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10
            + (1 - fx) * fy * v01 + fx * fy * v11)


@dataclass
class FlowSolveConfig:
    w_norm: float = 1e-3
    w_lap: float = 1e-1
    levels: int = 4
    iterations_per_level: int = 200
    learning_rate: float = 0.5
    onehot_blur_sigma: float = 1.0
    min_level_size: int = 12
    point_weight: float = 1.0
    #: Stop a level early when the relative objective decrease over
    #: check_every iterations falls below this.
    rel_decrease_tol: float = 1e-8
    check_every: int = 20
    #: Regularizer stencil footprint, fixed by the method (5x5 support).
    laplacian_stencil: int = 5


def _soft_onehot(seg: SegMap, sigma: float) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    onehot = seg.one_hot()
    if sigma > 0:
        onehot = gaussian_filter(onehot, (sigma, sigma, 0), mode="nearest")
    return onehot


def _downsample(arr: np.ndarray) -> np.ndarray:
    """2x average pooling with edge padding for odd sizes."""
    h, w = arr.shape[:2]
    if h % 2:
        arr = np.concatenate([arr, arr[-1:]], axis=0)
        h += 1
    if w % 2:
        arr = np.concatenate([arr, arr[:, -1:]], axis=1)
        w += 1
    return 0.25 * (arr[0::2, 0::2] + arr[1::2, 0::2] + arr[0::2, 1::2] + arr[1::2, 1::2])


def solve_flow(source_seg: SegMap, target_seg: SegMap,
               config: FlowSolveConfig = FlowSolveConfig(),
               point_positions: np.ndarray | None = None,
               point_displacements: np.ndarray | None = None) -> FlowField:
    """Flow warping the source segmentation onto the target (Eq.-1 direction).

    Optional point constraints pin the flow at given pixel-center
    positions to given displacements (used by the texture-space aligner
    for landmark and mole terms); they are soft quadratic penalties.
    """
    if source_seg.labels.shape != target_seg.labels.shape:
        raise SceneError("segmentation resolutions disagree")

    src_levels = [_soft_onehot(source_seg, config.onehot_blur_sigma)]
    tgt_levels = [_soft_onehot(target_seg, config.onehot_blur_sigma)]
    for _ in range(config.levels - 1):
        if min(src_levels[-1].shape[:2]) // 2 < config.min_level_size:
            break
        src_levels.append(_downsample(src_levels[-1]))
        tgt_levels.append(_downsample(tgt_levels[-1]))

    have_points = point_positions is not None and len(point_positions) > 0
    if have_points:
        pts = np.asarray(point_positions, dtype=np.float64).reshape(-1, 2)
        disp = np.asarray(point_displacements, dtype=np.float64).reshape(-1, 2)

    flow_np: np.ndarray | None = None
    for level in range(len(src_levels) - 1, -1, -1):
        src = torch.tensor(np.moveaxis(src_levels[level], 2, 0), dtype=DTYPE)
        tgt = torch.tensor(np.moveaxis(tgt_levels[level], 2, 0), dtype=DTYPE)
        h, w = src.shape[1:]
        scale = 2.0 ** level

        if flow_np is None:
            flow = torch.zeros(h, w, 2, dtype=DTYPE, requires_grad=True)
        else:
            prev = torch.tensor(np.moveaxis(flow_np, 2, 0), dtype=DTYPE).unsqueeze(0)
            up = F.interpolate(prev, size=(h, w), mode="bilinear", align_corners=False)
            flow = (up.squeeze(0).permute(1, 2, 0) * 2.0).detach().requires_grad_(True)

        if have_points:
            p_pos = torch.tensor(pts / scale, dtype=DTYPE)
            p_disp = torch.tensor(disp / scale, dtype=DTYPE)

        optimizer = torch.optim.Adam([flow], lr=config.learning_rate)
        checkpoint = None
        for it in range(config.iterations_per_level):
            optimizer.zero_grad()
            warped = _warp_torch(src, flow)
            # Per-pixel mismatch sums over the one-hot channels (the data
            # term is "unit normalized": an entirely mislabeled pixel
            # contributes ~2), keeping the regularizer weights meaningful.
            loss = ((tgt - warped) ** 2).sum(dim=0).mean()
            loss = loss + config.w_norm * (flow ** 2).sum(dim=2).mean()
            lap = _laplacian5_torch(flow.permute(2, 0, 1).unsqueeze(0))
            loss = loss + config.w_lap * (lap ** 2).mean()
            if have_points:
                sampled = _sample_flow_torch(flow, p_pos)
                loss = loss + config.point_weight * ((sampled - p_disp) ** 2).mean()
            loss.backward()
            optimizer.step()
            if it % config.check_every == 0:
                val = float(loss)
                if checkpoint is not None and \
                        abs(checkpoint - val) < config.rel_decrease_tol * max(checkpoint, 1e-30):
                    break
                checkpoint = val
        flow_np = flow.detach().numpy()

    field = FlowField(flow_np)
    # Contract: warping with the solved flow never increases the hard one-hot
    # mismatch relative to zero flow; otherwise fall back to zero.
    src_hot = source_seg.one_hot()
    tgt_hot = target_seg.one_hot()
    mismatch_solved = np.abs(tgt_hot - warp_array(src_hot, field)).sum()
    mismatch_zero = np.abs(tgt_hot - src_hot).sum()
    if mismatch_solved > mismatch_zero:
        logger.warning("flow solve did not improve the segmentation mismatch; "
                       "returning zero flow")
        return FlowField.zero(*field.shape)
    return field


def _sample_flow_torch(flow: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Bilinear flow lookup at pixel-center positions (differentiable)."""
    h, w = flow.shape[:2]
    xs = (positions[:, 0] - 0.5).clamp(0.0, w - 1.0)
    ys = (positions[:, 1] - 0.5).clamp(0.0, h - 1.0)
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    fx = (xs - x0).unsqueeze(1)
    fy = (ys - y0).unsqueeze(1)
    x0l = x0.long().clamp(0, w - 1)
    x1l = (x0.long() + 1).clamp(0, w - 1)
    y0l = y0.long().clamp(0, h - 1)
    y1l = (y0.long() + 1).clamp(0, h - 1)
    flat = flow.reshape(h * w, 2)
    v00 = flat[y0l * w + x0l]
    v10 = flat[y0l * w + x1l]
    v01 = flat[y1l * w + x0l]
    v11 = flat[y1l * w + x1l]
    return ((1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10
            + (1 - fx) * fy * v01 + fx * fy * v11)


def segmentation_boundary(seg: SegMap) -> np.ndarray:
    """Pixels with any differently-labeled 4-neighbor."""
    lab = seg.labels
    boundary = np.zeros(lab.shape, dtype=bool)
    boundary[:-1, :] |= lab[:-1, :] != lab[1:, :]
    boundary[1:, :] |= lab[1:, :] != lab[:-1, :]
    boundary[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    boundary[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    return boundary


def laplace_postprocess(flow: FlowField, seg: SegMap, tol: float = 1e-8) -> FlowField:
    """Discrete-harmonic extension of the flow from segmentation boundaries.

    Flow values on boundary pixels of the segmentation are preserved
    exactly (Dirichlet); elsewhere each component satisfies the 5-point
    Laplace equation, with zero-Neumann conditions on the image border
    (missing neighbors drop out of the stencil). Solved per component by
    AMG-preconditioned conjugate gradient. With no boundary pixels the
    pure-Neumann zero-initialized solve returns the zero field.
    """
    from scipy import sparse
    from scipy.sparse import linalg as slinalg

    if flow.shape != seg.labels.shape:
        raise SceneError("segmentation resolution does not match the flow")
    h, w = flow.shape
    dirichlet = segmentation_boundary(seg)
    if not dirichlet.any():
        return FlowField.zero(h, w)

    unknown = ~dirichlet
    idx = -np.ones((h, w), dtype=np.int64)
    idx[unknown] = np.arange(unknown.sum())
    n = int(unknown.sum())
    if n == 0:
        return FlowField(flow.vectors.copy())

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    rhs = np.zeros((n, 2))
    deg = np.zeros(n)

    ur, uc = np.nonzero(unknown)
    uidx = idx[ur, uc]
    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nr, nc = ur + dr, uc + dc
        in_img = (nr >= 0) & (nr < h) & (nc >= 0) & (nc < w)
        deg[uidx[in_img]] += 1.0
        nbr_unknown = np.zeros_like(in_img)
        nbr_unknown[in_img] = unknown[nr[in_img], nc[in_img]]
        sel = in_img & nbr_unknown
        rows.append(uidx[sel])
        cols.append(idx[nr[sel], nc[sel]])
        vals.append(-np.ones(sel.sum()))
        selk = in_img & ~nbr_unknown
        rhs[uidx[selk]] += flow.vectors[nr[selk], nc[selk]]

    rows.append(uidx)
    cols.append(uidx)
    vals.append(deg)
    a_mat = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n))

    try:
        import pyamg

        precond = pyamg.ruge_stuben_solver(a_mat).aspreconditioner(cycle="V")
    except Exception:  # pragma: no cover - AMG setup fallback
        precond = None

    out = flow.vectors.copy()
    maxiter = 10 * h * w
    for comp in range(2):
        b = rhs[:, comp]
        x, info = slinalg.cg(a_mat, b, rtol=tol * 1e-2, atol=tol * 1e-4,
                             maxiter=maxiter, M=precond)
        if info != 0:
            logger.warning("laplace post-process CG did not fully converge (info=%s)", info)
        out[unknown, comp] = x
    return FlowField(out)
