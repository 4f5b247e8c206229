"""Per-vertex neural textures and their rasterization onto hex planes.

A texture is an (N, C) feature array on the model's vertices. Conditioning a
field on a synthesized mesh means orthographically rasterizing those features
onto each of the six planes with a depth test toward the plane, so each plane
sees the features of the surface nearest to it. The raster is captured as a
sparse texel<-vertex weight matrix, which makes conditioning a single sparse
matmul and gives the exact adjoint for routing plane gradients back to the
texture. Positions receive no gradient through conditioning.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import config
from .bilinear import BilinearModel, synthesize_vertices
from .errors import DimensionError, ParseError
from .hexplanes import HexPlanes, _UV
from .raster import _edge_accepts

TEX_MAGIC = b"H360TEX\x00"
GEN_MAGIC = b"H360GEN\x00"


def init_texture(n_vertices: int, channels: int, rng: np.random.Generator,
                 scale: float = 0.1) -> np.ndarray:
    return rng.normal(0.0, scale, size=(n_vertices, channels))


@dataclass
class TextureGenerator:
    """Affine map from a compact texture code to per-vertex features."""

    matrix: np.ndarray  # (N*C, D)
    bias: np.ndarray    # (N*C,)
    n_vertices: int
    channels: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if m.shape[0] != self.n_vertices * self.channels or b.shape[0] != m.shape[0]:
            raise DimensionError("generator shape does not match vertex/channel counts")
        self.matrix = m
        self.bias = b

    @property
    def code_dim(self):
        return self.matrix.shape[1]


def generate_texture(gen: TextureGenerator, code) -> np.ndarray:
    code = np.asarray(code, dtype=np.float64).reshape(-1)
    if code.shape[0] != gen.code_dim:
        raise DimensionError(f"texture code has length {code.shape[0]}, expected {gen.code_dim}")
    flat = gen.matrix @ code + gen.bias
    return flat.reshape(gen.n_vertices, gen.channels)


def fit_generator(textures) -> TextureGenerator:
    """Exact affine interpolator of a texture library under one-hot codes.

    bias is the library mean and column i maps e_i to texture i exactly, so the
    generator spans affine blends of the library.
    """
    if len(textures) == 0:
        raise DimensionError("need at least one texture")
    stack = np.stack([np.asarray(t, dtype=np.float64) for t in textures])
    n, c = stack.shape[1], stack.shape[2]
    flat = stack.reshape(len(textures), -1)
    bias = flat.mean(axis=0)
    matrix = (flat - bias).T
    return TextureGenerator(matrix=matrix, bias=bias, n_vertices=n, channels=c)


@dataclass
class PlaneRasterMap:
    """Sparse map from per-vertex features to plane texels for one posed mesh."""

    matrix: sp.csr_matrix   # (6*R*R, N)
    resolution: int
    n_vertices: int

    @property
    def covered(self):
        return np.asarray(self.matrix.sum(axis=1)).reshape(-1) > 0


def rasterize_to_planes(vertices, faces, resolution: int = config.PLANE_RESOLUTION,
                        bbox=(config.BBOX_LO, config.BBOX_HI)) -> PlaneRasterMap:
    """Orthographic raster of the mesh onto all six planes.

    Texel (i, j) samples the grid node it owns (align-corners layout shared
    with plane sampling). For each plane the surface nearest that plane wins
    the depth test. Fragments interpolating outside the box along the dropped
    axis are discarded, so a mesh fully outside the box covers nothing.
    """
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    R = resolution
    lo, hi = float(bbox[0]), float(bbox[1])
    extent = hi - lo
    scale = (R - 1) / extent
    n_vertices = len(verts)

    rows, cols, vals = [], [], []
    grid = (verts - lo) * scale  # continuous texel coords per world axis

    for plane in range(6):
        axis, sign = divmod(plane, 2)
        ua, va = _UV[axis]
        # Distance toward this plane; the smallest value is the visible surface.
        depth_v = (hi - verts[:, axis]) if sign == 0 else (verts[:, axis] - lo)
        win_depth = np.full((R, R), np.inf)
        win_face = np.full((R, R), -1, dtype=np.int64)
        win_bary = np.zeros((R, R, 3))

        for fi, face in enumerate(faces):
            idx = (int(face[0]), int(face[1]), int(face[2]))
            p = np.stack([grid[j][[ua, va]] for j in idx])
            area2 = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) \
                - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
            if area2 == 0.0:
                continue
            if area2 < 0.0:
                p = p[[0, 2, 1]]
                idx = (idx[0], idx[2], idx[1])
                area2 = -area2
            i0 = max(0, int(np.ceil(p[:, 0].min())))
            i1 = min(R - 1, int(np.floor(p[:, 0].max())))
            j0 = max(0, int(np.ceil(p[:, 1].min())))
            j1 = min(R - 1, int(np.floor(p[:, 1].max())))
            if i0 > i1 or j0 > j1:
                continue
            gi, gj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
            inside = np.ones(gi.shape, dtype=bool)
            e = []
            for a, b in ((1, 2), (2, 0), (0, 1)):
                dx, dy = p[b, 0] - p[a, 0], p[b, 1] - p[a, 1]
                ek = dx * (gj - p[a, 1]) - dy * (gi - p[a, 0])
                inside &= _edge_accepts(ek, dx, dy)
                e.append(ek)
            if not inside.any():
                continue
            lam = np.stack(e, axis=-1) / area2
            dep = lam @ np.array([depth_v[j] for j in idx])
            ok = inside & (dep >= 0.0) & (dep <= extent)
            patch = win_depth[i0:i1 + 1, j0:j1 + 1]
            ok &= dep < patch
            if not ok.any():
                continue
            patch[ok] = dep[ok]
            win_face[i0:i1 + 1, j0:j1 + 1][ok] = fi
            win_bary[i0:i1 + 1, j0:j1 + 1][ok] = lam[ok]

        covered = win_face >= 0
        if covered.any():
            ti, tj = np.nonzero(covered)
            flat = plane * R * R + ti * R + tj
            f_idx = win_face[ti, tj]
            lam = win_bary[ti, tj]
            for k in range(3):
                rows.append(flat)
                cols.append(faces[f_idx, k])
                vals.append(lam[:, k])

    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    else:
        rows = np.zeros(0, dtype=np.int64)
        cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(6 * R * R, max(n_vertices, 1)))
    return PlaneRasterMap(matrix=matrix, resolution=R, n_vertices=n_vertices)


def planes_from_features(rmap: PlaneRasterMap, features,
                         bbox=(config.BBOX_LO, config.BBOX_HI),
                         blend_width: float = config.BLEND_WIDTH) -> HexPlanes:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != rmap.n_vertices:
        raise DimensionError("features must be (N, C) matching the raster map")
    R, C = rmap.resolution, f.shape[1]
    flat = rmap.matrix @ f
    return HexPlanes(flat.reshape(6, R, R, C), bbox=bbox, blend_width=blend_width)


def features_grad_from_planes(rmap: PlaneRasterMap, dplanes) -> np.ndarray:
    """Adjoint of planes_from_features."""
    dp = np.asarray(dplanes, dtype=np.float64)
    R = rmap.resolution
    return rmap.matrix.T @ dp.reshape(6 * R * R, -1)


def condition_field(model: BilinearModel, s, b, features,
                    resolution: int = config.PLANE_RESOLUTION,
                    bbox=(config.BBOX_LO, config.BBOX_HI),
                    blend_width: float = config.BLEND_WIDTH):
    """Synthesize the mesh for (s, b) and rasterize its texture onto hex planes."""
    verts = synthesize_vertices(model, s, b)
    rmap = rasterize_to_planes(verts, model.faces, resolution=resolution, bbox=bbox)
    planes = planes_from_features(rmap, features, bbox=bbox, blend_width=blend_width)
    return planes, rmap


def save_texture(path, features):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionError("texture must be (N, C)")
    with open(path, "wb") as fh:
        fh.write(TEX_MAGIC)
        fh.write(struct.pack("<2I", f.shape[0], f.shape[1]))
        fh.write(np.ascontiguousarray(f, dtype="<f4").tobytes())


def load_texture(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != TEX_MAGIC:
        raise ParseError(f"{path}: not a texture file")
    n, c = struct.unpack("<2I", raw[8:16])
    body = np.frombuffer(raw[16:], dtype="<f4")
    if body.size != n * c:
        raise ParseError(f"{path}: payload size does not match header")
    return body.astype(np.float64).reshape(n, c)


def save_generator(path, gen: TextureGenerator):
    with open(path, "wb") as fh:
        fh.write(GEN_MAGIC)
        fh.write(struct.pack("<3I", gen.n_vertices, gen.channels, gen.code_dim))
        fh.write(np.ascontiguousarray(gen.matrix, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(gen.bias, dtype="<f4").tobytes())


def load_generator(path) -> TextureGenerator:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != GEN_MAGIC:
        raise ParseError(f"{path}: not a texture generator file")
    n, c, d = struct.unpack("<3I", raw[8:20])
    body = np.frombuffer(raw[20:], dtype="<f4")
    if body.size != n * c * d + n * c:
        raise ParseError(f"{path}: payload size does not match header")
    matrix = body[:n * c * d].astype(np.float64).reshape(n * c, d)
    bias = body[n * c * d:].astype(np.float64)
    return TextureGenerator(matrix=matrix, bias=bias, n_vertices=n, channels=c)
