"""Triangle meshes, pinhole cameras, the orbit rig, rays, and mesh/camera file I/O.

Conventions: world is right-handed with +y up. Cameras look down their +z axis
with +x right and +y down in image space, so pixel rows grow downward. The
world-to-camera transform is x_cam = R @ x_world + t.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config
from .errors import DimensionError, GeometryError, ParseError

WORLD_UP = np.array([0.0, 1.0, 0.0])
# Used when the viewing direction is parallel to WORLD_UP (straight up/down poses).
FALLBACK_UP = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class TriMesh:
    """Shared-vertex triangle mesh with optional per-vertex colors/features."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if not np.all(np.isfinite(v)):
            raise DimensionError("mesh vertices must be finite")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise DimensionError(
                    f"face index out of range: [{f.min()}, {f.max()}] for {len(v)} vertices"
                )
            # A face that repeats a vertex index has zero area by construction.
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise DimensionError("face with repeated vertex index")
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64).reshape(len(v), 3)
            object.__setattr__(self, "colors", c)
        if self.features is not None:
            t = np.asarray(self.features, dtype=np.float64)
            if t.shape[0] != len(v):
                raise DimensionError("features must have one row per vertex")
            object.__setattr__(self, "features", t)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def vertex_normals(self):
        """Area-weighted per-vertex normals; zero-length normals stay zero."""
        v, f = self.vertices, self.faces
        n = np.zeros_like(v)
        if f.size == 0:
            return n
        e1 = v[f[:, 1]] - v[f[:, 0]]
        e2 = v[f[:, 2]] - v[f[:, 0]]
        fn = np.cross(e1, e2)
        for k in range(3):
            np.add.at(n, f[:, k], fn)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 1e-12)

    def bounds_radius(self):
        if len(self.vertices) == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices, axis=1).max())


def merge_meshes(a: TriMesh, b: TriMesh) -> tuple[TriMesh, np.ndarray]:
    """Concatenate two meshes; returns the merged mesh and per-face ownership (0=a, 1=b)."""
    if b.n_vertices == 0:
        return a, np.zeros(a.n_faces, dtype=np.int32)
    if a.n_vertices == 0:
        return b, np.ones(b.n_faces, dtype=np.int32)

    def _col(m):
        return m.colors if m.colors is not None else np.full((m.n_vertices, 3), 0.5)

    merged = TriMesh(
        vertices=np.vstack([a.vertices, b.vertices]),
        faces=np.vstack([a.faces, b.faces + a.n_vertices]),
        colors=np.vstack([_col(a), _col(b)]),
    )
    owner = np.concatenate(
        [np.zeros(a.n_faces, dtype=np.int32), np.ones(b.n_faces, dtype=np.int32)]
    )
    return merged, owner


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. rotation/translation map world points into camera space."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image size must be positive")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-8:
            raise GeometryError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise GeometryError("rotation must be proper (det +1)")

    def position(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def optical_axis(self):
        """Unit viewing direction (camera +z) in world coordinates."""
        return self.rotation[2].copy()

    def world_to_camera(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def to_dict(self):
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                fx=float(d["fx"]),
                fy=float(d["fy"]),
                cx=float(d["cx"]),
                cy=float(d["cy"]),
                width=int(d["width"]),
                height=int(d["height"]),
                rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.asarray(d["translation"], dtype=np.float64),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad camera record: {exc}") from exc


def project(camera: Camera, points):
    """Project world points to continuous pixel coordinates.

    Accepts (3,) or (M, 3); returns matching (2,) or (M, 2). Raises
    GeometryError if any point is at or behind the camera plane.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    cam = camera.world_to_camera(pts.reshape(-1, 3))
    z = cam[:, 2]
    if np.any(z <= 1e-9):
        raise GeometryError("point at or behind camera plane")
    px = camera.fx * cam[:, 0] / z + camera.cx
    py = camera.fy * cam[:, 1] / z + camera.cy
    out = np.stack([px, py], axis=1)
    return out[0] if single else out


def look_at(position, target=(0.0, 0.0, 0.0), up=None, intrinsics=None) -> Camera:
    """Camera at `position` looking at `target`, rolled so `up` maps to image up.

    Falls back to FALLBACK_UP when the view direction is parallel to up, which
    keeps straight-down/straight-up poses well defined.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = WORLD_UP if up is None else np.asarray(up, dtype=np.float64)
    forward = target - position
    dist = np.linalg.norm(forward)
    if dist < 1e-12:
        raise GeometryError("camera position coincides with target")
    forward = forward / dist
    if np.linalg.norm(np.cross(forward, up)) < 1e-8:
        up = FALLBACK_UP
    y_cam = -(up - np.dot(up, forward) * forward)
    y_cam = y_cam / np.linalg.norm(y_cam)
    x_cam = np.cross(y_cam, forward)
    R = np.stack([x_cam, y_cam, forward])
    t = -R @ position
    intr = intrinsics or {}
    return Camera(rotation=R, translation=t, **intr)


def intrinsics_for(size: int, fov_deg: float = config.FOV_DEG) -> dict:
    """Square intrinsics with the given vertical field of view."""
    f = (size / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return {"fx": f, "fy": f, "cx": size / 2.0, "cy": size / 2.0,
            "width": size, "height": size}


@dataclass(frozen=True)
class CameraRig:
    """Orbit rig: pitch rings of evenly spaced yaw positions, all looking at the origin."""

    cameras: tuple
    yaw_count: int
    pitch_angles: tuple
    radius: float

    def __len__(self):
        return len(self.cameras)

    def __getitem__(self, idx):
        return self.cameras[idx]

    def summary(self):
        return {
            "count": len(self.cameras),
            "yaw_count": self.yaw_count,
            "pitch_angles": list(self.pitch_angles),
            "radius": self.radius,
        }


def build_rig(yaw_count: int = config.YAW_COUNT,
              pitch_angles=config.PITCH_ANGLES,
              radius: float = config.RIG_RADIUS,
              intrinsics: dict | None = None,
              size: int = 64,
              fov_deg: float = config.FOV_DEG) -> CameraRig:
    """Build the orbit rig. Camera k of a ring sits at yaw k * 360/yaw_count."""
    if yaw_count < 1:
        raise GeometryError("yaw_count must be >= 1")
    intr = intrinsics or intrinsics_for(size, fov_deg)
    cams = []
    for pitch in pitch_angles:
        p = math.radians(pitch)
        for k in range(yaw_count):
            yaw = 2.0 * math.pi * k / yaw_count
            pos = radius * np.array(
                [math.sin(yaw) * math.cos(p), math.sin(p), math.cos(yaw) * math.cos(p)]
            )
            cams.append(look_at(pos, intrinsics=intr))
    return CameraRig(cameras=tuple(cams), yaw_count=yaw_count,
                     pitch_angles=tuple(float(p) for p in pitch_angles),
                     radius=float(radius))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise GeometryError("ray direction must be unit length")
        if not (0 <= self.near < self.far):
            raise GeometryError("require 0 <= near < far")

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + np.multiply.outer(t, self.direction)


def generate_ray(camera: Camera, pixel, near: float = config.NEAR,
                 far: float = config.FAR) -> Ray:
    """Ray through a continuous pixel coordinate. Pixel (i, j) center is (i+0.5, j+0.5)."""
    px, py = float(pixel[0]), float(pixel[1])
    if not (0.0 <= px <= camera.width and 0.0 <= py <= camera.height):
        raise GeometryError(f"pixel ({px}, {py}) outside image bounds")
    d_cam = np.array([(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, 1.0])
    d_world = camera.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=camera.position(), direction=d_world, near=near, far=far)


def pixel_ray_grid(camera: Camera, near: float = config.NEAR, far: float = config.FAR):
    """Origins/directions for all pixel centers, row-major. Returns (H*W, 3) twice."""
    xs = np.arange(camera.width) + 0.5
    ys = np.arange(camera.height) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack(
        [(gx - camera.cx) / camera.fx, (gy - camera.cy) / camera.fy, np.ones_like(gx)],
        axis=-1,
    ).reshape(-1, 3)
    d_world = d_cam @ camera.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position(), d_world.shape).copy()
    return origins, d_world


# ---------------------------------------------------------------------------
# OBJ I/O. Supports the per-vertex color extension: "v x y z r g b".
# ---------------------------------------------------------------------------

def save_obj(path, mesh: TriMesh):
    lines = []
    has_color = mesh.colors is not None
    for i, v in enumerate(mesh.vertices):
        if has_color:
            c = mesh.colors[i]
            lines.append("v %.10g %.10g %.10g %.10g %.10g %.10g"
                         % (v[0], v[1], v[2], c[0], c[1], c[2]))
        else:
            lines.append("v %.10g %.10g %.10g" % (v[0], v[1], v[2]))
    for f in mesh.faces:
        lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    verts, colors, faces = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "v":
                if len(parts) not in (4, 7):
                    raise ValueError("expected 3 or 6 components")
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) == 7:
                    colors.append([float(x) for x in parts[4:7]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError("only triangles supported")
                # Accept "f 1 2 3" and "f 1/1 2/2 3/3"; indices are 1-based.
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
            # Other directives (vn, vt, o, g, s, usemtl...) are ignored.
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if colors and len(colors) != len(verts):
        raise ParseError(f"{path}: color given for only some vertices")
    return TriMesh(
        vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        faces=np.asarray(faces, dtype=np.int32).reshape(-1, 3),
        colors=np.asarray(colors, dtype=np.float64) if colors else None,
    )


def save_cameras_json(path, rig: CameraRig):
    payload = {
        "yaw_count": rig.yaw_count,
        "pitch_angles": list(rig.pitch_angles),
        "radius": rig.radius,
        "cameras": [dict(id=i, **c.to_dict()) for i, c in enumerate(rig.cameras)],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_cameras_json(path) -> CameraRig:
    try:
        payload = json.loads(Path(path).read_text())
        cams = tuple(Camera.from_dict(d) for d in payload["cameras"])
        return CameraRig(
            cameras=cams,
            yaw_count=int(payload["yaw_count"]),
            pitch_angles=tuple(payload["pitch_angles"]),
            radius=float(payload["radius"]),
        )
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
