"""Software perspective rasterizer with z-buffer and optional Lambertian shading.

Pixel (ix, iy) is covered when its center (ix+0.5, iy+0.5) falls inside the
projected triangle; centers exactly on an edge follow the top-left fill rule so
coverage is deterministic and independent of vertex order within a face.
Barycentric attribute interpolation is perspective correct.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, TriMesh

# Fixed world-space light for shaded dataset renders, pointing from the surface
# toward the light. Front-top-right so orbit views get visible shading gradients.
LIGHT_DIR = np.array([0.4, 0.7, 0.6]) / np.linalg.norm([0.4, 0.7, 0.6])
AMBIENT = 0.3

_Z_EPS = 1e-6


@dataclass
class RasterResult:
    image: np.ndarray      # (H, W, 3) in [0, 1]
    depth: np.ndarray      # (H, W), +inf where uncovered
    mask: np.ndarray       # (H, W) bool coverage
    face_id: np.ndarray    # (H, W) int32, -1 where uncovered


def shade_vertex_colors(mesh: TriMesh, light_dir=LIGHT_DIR, ambient=AMBIENT):
    """Per-vertex Lambertian shading of the mesh albedo."""
    albedo = mesh.colors if mesh.colors is not None else np.full((mesh.n_vertices, 3), 0.5)
    normals = mesh.vertex_normals()
    lam = np.maximum(normals @ light_dir, 0.0)
    shade = ambient + (1.0 - ambient) * lam
    return np.clip(albedo * shade[:, None], 0.0, 1.0)


def _edge_accepts(e, dx, dy):
    # Top-left fill rule in y-down pixel coordinates: a horizontal edge running
    # +x is a top edge, an edge running -y is a left edge.
    on_edge_ok = (dy == 0.0) & (dx > 0.0) | (dy < 0.0)
    return (e > 0.0) | ((e == 0.0) & on_edge_ok)


def rasterize_mesh(mesh: TriMesh, camera: Camera, shading: str | None = None,
                   background=(1.0, 1.0, 1.0)) -> RasterResult:
    """Rasterize a mesh. shading=None interpolates raw albedo, "lambert" shades it."""
    H, W = camera.height, camera.width
    image = np.empty((H, W, 3), dtype=np.float64)
    image[:] = np.asarray(background, dtype=np.float64)
    depth = np.full((H, W), np.inf)
    face_id = np.full((H, W), -1, dtype=np.int32)
    if mesh.n_faces == 0:
        return RasterResult(image, depth, depth < np.inf, face_id)

    if shading == "lambert":
        colors = shade_vertex_colors(mesh)
    elif shading is None:
        colors = mesh.colors if mesh.colors is not None else np.full((mesh.n_vertices, 3), 0.5)
    else:
        raise ValueError(f"unknown shading mode {shading!r}")

    cam_pts = camera.world_to_camera(mesh.vertices)
    z = cam_pts[:, 2]
    px = camera.fx * cam_pts[:, 0] / np.where(z > _Z_EPS, z, 1.0) + camera.cx
    py = camera.fy * cam_pts[:, 1] / np.where(z > _Z_EPS, z, 1.0) + camera.cy

    for fi, face in enumerate(mesh.faces):
        i0, i1, i2 = int(face[0]), int(face[1]), int(face[2])
        if z[i0] <= _Z_EPS or z[i1] <= _Z_EPS or z[i2] <= _Z_EPS:
            continue  # faces touching the camera plane are dropped, not clipped
        p = np.array([[px[i0], py[i0]], [px[i1], py[i1]], [px[i2], py[i2]]])
        area2 = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) \
            - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
        idx = (i0, i1, i2)
        if area2 == 0.0:
            continue
        if area2 < 0.0:
            # Canonical winding so coverage does not depend on vertex order.
            p = p[[0, 2, 1]]
            idx = (i0, i2, i1)
            area2 = -area2

        ix0 = max(0, int(np.ceil(p[:, 0].min() - 0.5)))
        ix1 = min(W - 1, int(np.floor(p[:, 0].max() - 0.5)))
        iy0 = max(0, int(np.ceil(p[:, 1].min() - 0.5)))
        iy1 = min(H - 1, int(np.floor(p[:, 1].max() - 0.5)))
        if ix0 > ix1 or iy0 > iy1:
            continue
        qx = np.arange(ix0, ix1 + 1) + 0.5
        qy = np.arange(iy0, iy1 + 1) + 0.5
        gx, gy = np.meshgrid(qx, qy)

        inside = np.ones(gx.shape, dtype=bool)
        e = []
        for a, b in ((1, 2), (2, 0), (0, 1)):  # edge k is opposite vertex k
            dx, dy = p[b, 0] - p[a, 0], p[b, 1] - p[a, 1]
            ek = dx * (gy - p[a, 1]) - dy * (gx - p[a, 0])
            inside &= _edge_accepts(ek, dx, dy)
            e.append(ek)
        if not inside.any():
            continue

        lam = np.stack(e, axis=-1) / area2
        zs = np.array([z[j] for j in idx])
        inv = lam / zs
        norm = inv.sum(axis=-1)
        z_interp = 1.0 / norm
        patch = depth[iy0:iy1 + 1, ix0:ix1 + 1]
        win = inside & (z_interp < patch)
        if not win.any():
            continue
        bary = inv / norm[..., None]
        attr = bary @ colors[list(idx)]
        patch[win] = z_interp[win]
        image[iy0:iy1 + 1, ix0:ix1 + 1][win] = attr[win]
        face_id[iy0:iy1 + 1, ix0:ix1 + 1][win] = fi

    return RasterResult(image, depth, np.isfinite(depth), face_id)
