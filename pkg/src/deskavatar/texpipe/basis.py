"""Whitened PCA basis over albedo textures and the low-band projection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..annotate import SegMap
from ..scene.io import FORMAT_VERSION, ParseError, _LineReader, check_magic, _fmt
from ..scene.types import (
    REGION_EYES,
    REGION_LEFT_BROW,
    REGION_RIGHT_BROW,
    SceneError,
    TextureMap,
)

BASIS_MAGIC = "DAALB"
DEFAULT_NUM_BASES = 5  # first five bases drive the projection
STD_FLOOR = 1e-3


@dataclass(frozen=True)
class AlbedoBasis:
    """Mean, per-texel whitening scale, orthonormal bases, and ignore mask.

    Basis textures are mutually orthonormal under the inner product
    restricted to non-ignored texels (all three channels). The ignore
    mask marks regions whose baked-in content must not steer the fit
    (eyebrows, eye folds/sockets, inner nostril analogues), though those
    regions are still reconstructed from the basis.
    """

    mean: np.ndarray  # (S, S, 3)
    scale: np.ndarray  # (S, S, 3) whitening std, floored
    basis: np.ndarray  # (K, S, S, 3)
    ignore_mask: np.ndarray  # (S, S) bool, True = ignored during fitting

    def __post_init__(self):
        if self.basis.ndim != 4 or self.basis.shape[1:] != self.mean.shape:
            raise SceneError("basis shape disagrees with the mean texture")
        if self.ignore_mask.shape != self.mean.shape[:2]:
            raise SceneError("ignore mask shape disagrees with the mean texture")
        k = self.basis.shape[0]
        keep = ~self.ignore_mask
        flat = self.basis[:, keep, :].reshape(k, -1)
        gram = flat @ flat.T
        if np.abs(gram - np.eye(k)).max() > 1e-6:
            raise SceneError("basis textures are not orthonormal under the masked "
                             "inner product")

    @property
    def num_bases(self) -> int:
        return self.basis.shape[0]

    @property
    def size(self) -> int:
        return self.mean.shape[0]


def ignore_mask_from_labels(seg: SegMap) -> np.ndarray:
    """Texture-space ignore mask from region labels (brows and eye regions)."""
    lab = seg.labels
    return np.isin(lab, (REGION_LEFT_BROW, REGION_RIGHT_BROW, REGION_EYES))


def build_albedo_basis(training: list[TextureMap], ignore_mask: np.ndarray,
                       num_bases: int = DEFAULT_NUM_BASES,
                       std_floor: float = STD_FLOOR) -> AlbedoBasis:
    """Whiten the training set per texel-channel, then PCA via the Gram matrix.

    Eigenvectors of the masked Gram matrix give full-support basis
    textures (ignored regions keep their training-correlation values) that
    are orthonormal under the masked inner product.
    """
    if len(training) <= num_bases:
        raise SceneError(f"need more than {num_bases} training textures, "
                         f"have {len(training)}")
    stack = np.stack([t.texels for t in training])  # (N, S, S, 3)
    mean = stack.mean(axis=0)
    scale = np.maximum(stack.std(axis=0), std_floor)
    whitened = (stack - mean) / scale

    keep = ~ignore_mask
    n = stack.shape[0]
    flat_masked = whitened[:, keep, :].reshape(n, -1)
    gram = flat_masked @ flat_masked.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1][:num_bases]

    bases = []
    for col in order:
        combo = np.tensordot(evecs[:, col], whitened, axes=(0, 0))  # (S, S, 3)
        norm = np.linalg.norm(combo[keep, :])
        if norm < 1e-12:
            raise SceneError("degenerate training set: zero-variance principal axis")
        bases.append(combo / norm)
    return AlbedoBasis(mean, scale, np.stack(bases), ignore_mask.astype(bool))


def pca_project(low: TextureMap, basis: AlbedoBasis, l2_weight: float = 0.0,
                high_band: np.ndarray | None = None,
                num_bases: int | None = None) -> tuple[TextureMap, np.ndarray]:
    """Project the whitened low band onto the basis; rebuild the full texture.

    Coefficients solve the masked per-channel ridge problem in closed
    form. The reconstruction is un-whitened over the full texture (so
    ignored regions are rebuilt from the basis), and the high band, when
    given, is added back outside the ignored regions. Returns the final
    texture and the (K, 3) coefficient matrix.
    """
    k = num_bases or basis.num_bases
    if k < 1 or k > basis.num_bases:
        raise SceneError(f"requested {k} bases, basis has {basis.num_bases}")
    z = (low.texels - basis.mean) / basis.scale
    keep = ~basis.ignore_mask

    coeffs = np.zeros((k, 3))
    for ch in range(3):
        a = basis.basis[:k, keep, ch].reshape(k, -1).T  # (M, K)
        y = z[keep, ch].ravel()
        ata = a.T @ a + l2_weight * np.eye(k)
        rhs = a.T @ y
        if l2_weight == 0.0:
            cond = np.linalg.cond(ata)
            if cond > 1e12:
                raise SceneError(f"rank-deficient masked system (cond={cond:.2e}); "
                                 "set l2_weight > 0")
        coeffs[:, ch] = np.linalg.solve(ata, rhs)

    recon_z = np.zeros_like(z)
    for ch in range(3):
        recon_z[:, :, ch] = np.tensordot(coeffs[:, ch], basis.basis[:k, :, :, ch],
                                         axes=(0, 0))
    recon = recon_z * basis.scale + basis.mean

    final = recon.copy()
    if high_band is not None:
        final[keep] += high_band[keep]
    out = TextureMap(np.clip(final, 0.0, 1.0),
                     np.ones(final.shape[:2]), low.fill_color)
    return out, coeffs


def save_albedo_basis(basis: AlbedoBasis, path: str | Path) -> None:
    header = (f"{BASIS_MAGIC} {FORMAT_VERSION}\n"
              f"{basis.size} {basis.num_bases}\n").encode()
    payload = (basis.mean.astype("<f8").tobytes()
               + basis.scale.astype("<f8").tobytes()
               + basis.basis.astype("<f8").tobytes()
               + basis.ignore_mask.astype("<u1").tobytes())
    Path(path).write_bytes(header + payload)


def load_albedo_basis(path: str | Path) -> AlbedoBasis:
    reader = _LineReader(Path(path).read_bytes())
    check_magic(reader, BASIS_MAGIC)
    s, k = reader.ints(2, "basis dimensions")
    mean = np.frombuffer(reader.raw(s * s * 3 * 8, "mean"), dtype="<f8").reshape(s, s, 3)
    scale = np.frombuffer(reader.raw(s * s * 3 * 8, "scale"), dtype="<f8").reshape(s, s, 3)
    basis = np.frombuffer(reader.raw(k * s * s * 3 * 8, "basis"),
                          dtype="<f8").reshape(k, s, s, 3)
    mask = np.frombuffer(reader.raw(s * s, "mask"), dtype="<u1").reshape(s, s).astype(bool)
    try:
        return AlbedoBasis(mean.copy(), scale.copy(), basis.copy(), mask)
    except SceneError as exc:
        raise ParseError(f"basis violates invariants: {exc}", reader.offset) from exc
