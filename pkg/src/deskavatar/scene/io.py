"""File formats for meshes, textures, and flow fields.

Every format opens with a magic token and an integer format version.
Plain-text formats write floats with 17 significant digits, which
round-trips IEEE doubles bit-exactly. Textures are written as a standard
8-bit PNG for inspection plus a sidecar carrying the exact float64 texels
and coverage (PNG cannot represent doubles).
"""

from __future__ import annotations

import io as _stdio
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .types import LandmarkAnchor, SceneError, TextureMap, TriMesh

MESH_MAGIC = "DAMESH"
TEXTURE_MAGIC = "DATEX"
FLOW_MAGIC = "DAFLOW"
FORMAT_VERSION = 1


class ParseError(SceneError):
    """Malformed file; carries the byte offset where parsing failed."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


class _LineReader:
    """Line tokenizer over bytes that tracks the byte offset of each line."""

    def __init__(self, data: bytes):
        self._stream = _stdio.BytesIO(data)
        self.offset = 0

    def line(self) -> str:
        self.offset = self._stream.tell()
        raw = self._stream.readline()
        if not raw:
            raise ParseError("unexpected end of file", self.offset)
        return raw.decode("utf-8", errors="replace").rstrip("\n")

    def fields(self, n: int, kind: str) -> list[str]:
        parts = self.line().split()
        if len(parts) < n:
            raise ParseError(f"expected {n} fields for {kind}, got {len(parts)}", self.offset)
        return parts

    def floats(self, n: int, kind: str) -> list[float]:
        parts = self.fields(n, kind)
        try:
            return [float(p) for p in parts[:n]]
        except ValueError:
            raise ParseError(f"invalid float in {kind}", self.offset) from None

    def ints(self, n: int, kind: str) -> list[int]:
        parts = self.fields(n, kind)
        try:
            return [int(p) for p in parts[:n]]
        except ValueError:
            raise ParseError(f"invalid integer in {kind}", self.offset) from None

    def raw(self, nbytes: int, kind: str) -> bytes:
        self.offset = self._stream.tell()
        data = self._stream.read(nbytes)
        if len(data) != nbytes:
            raise ParseError(f"truncated {kind} payload", self.offset + len(data))
        return data


def check_magic(reader: _LineReader, magic: str) -> int:
    parts = reader.fields(2, "header")
    if parts[0] != magic:
        raise ParseError(f"bad magic: expected {magic}, got {parts[0]!r}", reader.offset)
    try:
        version = int(parts[1])
    except ValueError:
        raise ParseError("format version is not an integer", reader.offset) from None
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported {magic} version {version}", reader.offset)
    return version


def save_mesh(mesh: TriMesh, path: str | Path) -> None:
    lines = [f"{MESH_MAGIC} {FORMAT_VERSION}"]
    lines.append(f"{mesh.num_vertices} {mesh.num_triangles} {len(mesh.landmark_anchors)}")
    for p, uv, lab in zip(mesh.vertices, mesh.uvs, mesh.region_labels):
        lines.append(" ".join([_fmt(p[0]), _fmt(p[1]), _fmt(p[2]),
                               _fmt(uv[0]), _fmt(uv[1]), str(int(lab))]))
    for t in mesh.triangles:
        lines.append(f"{t[0]} {t[1]} {t[2]}")
    for a in mesh.landmark_anchors:
        lines.append(" ".join([str(a.triangle), _fmt(a.bary[0]), _fmt(a.bary[1]),
                               _fmt(a.bary[2]), a.landmark_id]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path: str | Path) -> TriMesh:
    reader = _LineReader(Path(path).read_bytes())
    check_magic(reader, MESH_MAGIC)
    nv, nt, na = reader.ints(3, "mesh counts")
    vertices = np.empty((nv, 3))
    uvs = np.empty((nv, 2))
    labels = np.empty(nv, dtype=np.int64)
    for i in range(nv):
        vals = reader.floats(6, "vertex row")
        vertices[i] = vals[:3]
        uvs[i] = vals[3:5]
        labels[i] = int(vals[5])
    triangles = np.empty((nt, 3), dtype=np.int64)
    for i in range(nt):
        triangles[i] = reader.ints(3, "triangle row")
    anchors = []
    for _ in range(na):
        parts = reader.fields(5, "anchor row")
        try:
            tri = int(parts[0])
            bary = np.array([float(parts[1]), float(parts[2]), float(parts[3])])
        except ValueError:
            raise ParseError("invalid anchor row", reader.offset) from None
        anchors.append(LandmarkAnchor(tri, bary, parts[4]))
    try:
        return TriMesh(vertices, triangles, uvs, labels, tuple(anchors))
    except SceneError as exc:
        raise ParseError(f"mesh violates invariants: {exc}", reader.offset) from exc


def save_texture(texture: TextureMap, path: str | Path) -> None:
    """Write an 8-bit PNG preview plus the exact-float sidecar <path>.cov."""
    path = Path(path)
    preview = np.clip(np.rint(texture.texels * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(preview, mode="RGB").save(path, format="PNG")

    s = texture.size
    header = (f"{TEXTURE_MAGIC} {FORMAT_VERSION}\n"
              f"{s} {_fmt(texture.fill_color[0])} {_fmt(texture.fill_color[1])} "
              f"{_fmt(texture.fill_color[2])}\n").encode()
    payload = texture.texels.astype("<f8").tobytes() + texture.coverage.astype("<f8").tobytes()
    sidecar_path(path).write_bytes(header + payload)


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".cov")


def load_texture(path: str | Path) -> TextureMap:
    reader = _LineReader(sidecar_path(path).read_bytes())
    check_magic(reader, TEXTURE_MAGIC)
    parts = reader.fields(4, "texture header")
    try:
        s = int(parts[0])
        fill = (float(parts[1]), float(parts[2]), float(parts[3]))
    except ValueError:
        raise ParseError("invalid texture header", reader.offset) from None
    texels = np.frombuffer(reader.raw(s * s * 3 * 8, "texels"), dtype="<f8").reshape(s, s, 3)
    coverage = np.frombuffer(reader.raw(s * s * 8, "coverage"), dtype="<f8").reshape(s, s)
    try:
        return TextureMap(texels.copy(), coverage.copy(), fill)
    except SceneError as exc:
        raise ParseError(f"texture violates invariants: {exc}", reader.offset) from exc


def save_flow(vectors: np.ndarray, path: str | Path) -> None:
    """2-channel float grid; header then raw little-endian float64."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 3 or v.shape[2] != 2:
        raise SceneError(f"flow must be (H, W, 2), got {v.shape}")
    header = f"{FLOW_MAGIC} {FORMAT_VERSION}\n{v.shape[0]} {v.shape[1]}\n".encode()
    Path(path).write_bytes(header + v.astype("<f8").tobytes())


def load_flow(path: str | Path) -> np.ndarray:
    reader = _LineReader(Path(path).read_bytes())
    check_magic(reader, FLOW_MAGIC)
    h, w = reader.ints(2, "flow dimensions")
    data = np.frombuffer(reader.raw(h * w * 2 * 8, "flow"), dtype="<f8")
    return data.reshape(h, w, 2).copy()


def save_image(image, path: str | Path) -> None:
    """8-bit PNG of an Image value (mask stored in the alpha channel)."""
    rgb = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    alpha = np.where(image.background_mask, 0, 255).astype(np.uint8)
    rgba = np.dstack([rgb, alpha])
    PILImage.fromarray(rgba, mode="RGBA").save(Path(path), format="PNG")


def load_image(path: str | Path):
    from .types import Image

    arr = np.asarray(PILImage.open(Path(path)).convert("RGBA"), dtype=np.float64)
    pixels = arr[:, :, :3] / 255.0
    mask = arr[:, :, 3] < 128
    return Image(pixels, mask)
