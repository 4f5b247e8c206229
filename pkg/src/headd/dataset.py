"""Procedural stand-in dataset: registered heads, hairstyles, and orbit renders.

Every identity is an icosphere deformed by a seeded smooth radial field, so all
meshes share vertex count, topology, and semantic layout (registration for
free). Expressions are fixed displacement caps that are exactly zero outside
their support, expression 0 being neutral and expression 1 a jaw-open that
moves the chin straight down. Hairstyles are radially offset scalp shells above
style-specific latitude bands; "bald" is an empty mesh. Renders are shaded
rasterizations over a white background with per-pixel hair visibility masks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import config
from .bilinear import VertexTensor
from .errors import DimensionError, ParseError
from .geometry import (CameraRig, TriMesh, build_rig, load_cameras_json,
                       load_obj, merge_meshes, save_cameras_json, save_obj)
from .imageops import load_png, save_png
from .raster import rasterize_mesh

BALD_STYLE = "bald"
STYLE_NAMES = (BALD_STYLE, "style01", "style02", "style03")

# Scalp latitude threshold, front-fringe dip, and shell offset per style.
_STYLE_PARAMS = {
    "style01": (0.34, 0.00, 0.045),
    "style02": (0.10, 0.18, 0.055),
    "style03": (-0.10, 0.30, 0.065),
}
_STYLE_COLORS = {
    "style01": (0.16, 0.10, 0.06),
    "style02": (0.08, 0.07, 0.07),
    "style03": (0.38, 0.20, 0.10),
}

_HEAD_RADIUS = 0.52
_HEAD_RADIUS_CAP = 0.58


@dataclass
class DatasetSpec:
    identities: int = 8
    expressions: int = 6
    hairstyles: int = 4
    yaw_count: int = config.YAW_COUNT
    pitch_angles: tuple = config.PITCH_ANGLES
    image_size: int = 64
    subdivision: int = 4
    radius: float = config.RIG_RADIUS
    fov_deg: float = config.FOV_DEG
    seed: int = 0

    def __post_init__(self):
        self.pitch_angles = tuple(float(p) for p in self.pitch_angles)
        if self.identities < 1 or self.expressions < 1:
            raise DimensionError("need at least one identity and one expression")
        if not 1 <= self.hairstyles <= len(STYLE_NAMES):
            raise DimensionError(f"hairstyles must be in [1, {len(STYLE_NAMES)}]")

    def to_dict(self):
        d = asdict(self)
        d["pitch_angles"] = list(self.pitch_angles)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


# ---------------------------------------------------------------------------
# Base sphere
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def icosphere(subdivision: int):
    """Unit icosphere with deterministic vertex order. Returns (verts, faces)."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivision):
        midpoint = {}
        new_faces = []

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                v = np.add(verts[i], verts[j])
                v = v / np.linalg.norm(v)
                midpoint[key] = len(verts)
                verts.append(tuple(v))
            return midpoint[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts, dtype=np.float64)
    f = np.array(faces, dtype=np.int32)
    v.setflags(write=False)
    f.setflags(write=False)
    return v, f


def _cap_weight(dirs, center, angle):
    """Smooth bump supported on the spherical cap around `center`; 0 outside."""
    center = np.asarray(center, dtype=np.float64)
    center = center / np.linalg.norm(center)
    cos_t = dirs @ center
    cos_0 = np.cos(angle)
    w = np.maximum(0.0, (cos_t - cos_0) / (1.0 - cos_0))
    return w * w


# Fixed face-region expression caps: (center, displacement, amplitude, angle).
_EXPRESSION_CAPS = [
    # jaw open: the chin moves straight down with activation
    [((0.0, -0.60, 0.80), (0.0, -1.0, 0.0), 0.13, 0.60)],
    # smile: both cheeks bulge outward and slightly up
    [((0.45, -0.30, 0.82), (0.55, 0.35, 0.25), 0.07, 0.45),
     ((-0.45, -0.30, 0.82), (-0.55, 0.35, 0.25), 0.07, 0.45)],
    # brow raise
    [((0.0, 0.45, 0.88), (0.0, 0.8, 0.35), 0.06, 0.45)],
    # cheek puff: radial swell around the mouth
    [((0.0, -0.25, 0.95), "radial", 0.08, 0.50)],
    # frown: mouth region pulls down and in
    [((0.0, -0.55, 0.80), (0.0, -0.45, -0.65), 0.07, 0.45)],
]


def _expression_caps(expr_index: int):
    """Caps for expression e >= 1. Beyond the fixed table, derive seeded caps."""
    if expr_index - 1 < len(_EXPRESSION_CAPS):
        return _EXPRESSION_CAPS[expr_index - 1]
    rng = np.random.default_rng(7700 + expr_index)
    center = rng.normal(size=3)
    center[2] = abs(center[2]) + 0.5   # keep extra expressions on the face side
    center /= np.linalg.norm(center)
    vec = rng.normal(size=3)
    vec /= np.linalg.norm(vec)
    return [(tuple(center), tuple(vec * 0.8), 0.06, 0.5)]


def expression_displacement(dirs, expr_index: int) -> np.ndarray:
    """Displacement field (N, 3) for expression e >= 1 on base directions."""
    disp = np.zeros((len(dirs), 3))
    for center, vec, amp, angle in _expression_caps(expr_index):
        w = _cap_weight(dirs, center, angle)
        if isinstance(vec, str) and vec == "radial":
            d = dirs
        else:
            v = np.asarray(vec, dtype=np.float64)
            d = np.broadcast_to(v / np.linalg.norm(v), dirs.shape)
        disp += amp * w[:, None] * d
    return disp


@dataclass
class IdentityGeometry:
    meshes: list           # per-expression TriMesh (shared faces and colors)
    hair: TriMesh          # possibly empty
    hairstyle: str
    seed: int


def generate_identity(seed: int, spec: DatasetSpec, hairstyle: str) -> IdentityGeometry:
    """Seeded head geometry plus expression meshes and the hairstyle shell."""
    dirs, faces = icosphere(spec.subdivision)
    rng = np.random.default_rng(seed)
    axis_scale = 1.0 + 0.10 * rng.uniform(-1.0, 1.0, size=3)
    n_lobes = 6
    centers = rng.normal(size=(n_lobes, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    widths = rng.uniform(0.45, 1.0, size=n_lobes)
    amps = rng.uniform(-0.07, 0.07, size=n_lobes)
    radial = np.ones(len(dirs))
    for c, w, a in zip(centers, widths, amps):
        ang = np.arccos(np.clip(dirs @ c, -1.0, 1.0))
        radial += a * np.exp(-((ang / w) ** 2))
    base = dirs * (radial * _HEAD_RADIUS)[:, None] * axis_scale[None, :]
    peak = np.linalg.norm(base, axis=1).max()
    if peak > _HEAD_RADIUS_CAP:
        base *= _HEAD_RADIUS_CAP / peak

    tone = np.array([rng.uniform(0.70, 0.88), rng.uniform(0.52, 0.68),
                     rng.uniform(0.40, 0.56)])
    colors = np.tile(tone, (len(dirs), 1))
    for _ in range(3):
        c = rng.normal(size=3)
        c /= np.linalg.norm(c)
        ang = np.arccos(np.clip(dirs @ c, -1.0, 1.0))
        colors += rng.uniform(-0.05, 0.05, size=3) * np.exp(-((ang / 0.8) ** 2))[:, None]
    colors = np.clip(colors, 0.05, 0.95)

    meshes = []
    for e in range(spec.expressions):
        v = base if e == 0 else base + expression_displacement(dirs, e)
        meshes.append(TriMesh(vertices=v, faces=faces, colors=colors))

    hair = generate_hairstyle(hairstyle, meshes[0], dirs)
    return IdentityGeometry(meshes=meshes, hair=hair, hairstyle=hairstyle, seed=seed)


def generate_hairstyle(style: str, base_mesh: TriMesh, dirs=None) -> TriMesh:
    """Offset scalp shell above the style's latitude band; bald is empty."""
    if style == BALD_STYLE:
        return TriMesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int32))
    if style not in _STYLE_PARAMS:
        raise DimensionError(f"unknown hairstyle {style!r}")
    if dirs is None:
        dirs = base_mesh.vertices / np.linalg.norm(base_mesh.vertices, axis=1, keepdims=True)
    threshold, fringe, offset = _STYLE_PARAMS[style]
    # Fringe lowers the threshold toward the face (+z) so styles read distinctly.
    cut = threshold - fringe * np.maximum(0.0, dirs[:, 2]) ** 2
    keep = dirs[:, 1] > cut
    faces = base_mesh.faces
    face_keep = keep[faces].all(axis=1)
    if not face_keep.any():
        return TriMesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int32))
    used = np.unique(faces[face_keep])
    remap = -np.ones(base_mesh.n_vertices, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = base_mesh.vertices[used] + offset * dirs[used]
    color = np.tile(np.asarray(_STYLE_COLORS[style]), (len(used), 1))
    return TriMesh(vertices=verts, faces=remap[faces[face_keep]].astype(np.int32),
                   colors=color)


def landmark_indices(subdivision: int, count: int = 40):
    """Well-spread face-region vertex indices, fixed per subdivision level.

    Spirals candidate directions over the +z face region and snaps each to the
    nearest base-sphere vertex, skipping duplicates.
    """
    dirs, _ = icosphere(subdivision)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    picked = []
    seen = set()
    k = 0
    while len(picked) < count and k < count * 20:
        frac = (k + 0.5) / (count * 1.6)
        z = 1.0 - frac * 0.75            # cos of polar angle from +z, staying frontal
        r = np.sqrt(max(0.0, 1.0 - z * z))
        ang = golden * k
        cand = np.array([r * np.cos(ang), r * np.sin(ang), z])
        idx = int(np.argmax(dirs @ cand))
        if idx not in seen:
            seen.add(idx)
            picked.append(idx)
        k += 1
    return picked


# ---------------------------------------------------------------------------
# Rendering and file layout
# ---------------------------------------------------------------------------

def _style_for(identity: int, spec: DatasetSpec) -> str:
    return STYLE_NAMES[identity % spec.hairstyles]


def _img_name(i, e, c):
    return f"i{i:02d}_e{e:02d}_c{c:03d}.png"


def _mesh_name(i, e):
    return f"i{i:02d}_e{e:02d}.obj"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_dataset(spec: DatasetSpec, out_dir) -> dict:
    """Render the full dataset into out_dir and return the manifest."""
    out = Path(out_dir)
    for sub in ("images", "bald", "masks", "meshes"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rig = build_rig(yaw_count=spec.yaw_count, pitch_angles=spec.pitch_angles,
                    radius=spec.radius, size=spec.image_size, fov_deg=spec.fov_deg)
    save_cameras_json(out / "cameras.json", rig)
    lm = landmark_indices(spec.subdivision)
    (out / "landmarks.json").write_text(json.dumps({"indices": lm}, indent=1))

    files = {"images": {}, "bald": {}, "masks": {}, "meshes": {}}
    identities = []
    for i in range(spec.identities):
        style = _style_for(i, spec)
        seed = spec.seed * 1000 + i
        geo = generate_identity(seed, spec, style)
        identities.append({"id": f"{i:02d}", "hairstyle": style, "seed": seed})
        for e, head in enumerate(geo.meshes):
            mesh_path = out / "meshes" / _mesh_name(i, e)
            save_obj(mesh_path, head)
            files["meshes"][_mesh_name(i, e)] = _sha256(mesh_path)
            merged, owner = merge_meshes(head, geo.hair)
            for c, cam in enumerate(rig.cameras):
                name = _img_name(i, e, c)
                full = rasterize_mesh(merged, cam, shading="lambert")
                bald = rasterize_mesh(head, cam, shading="lambert")
                hair_visible = np.zeros(full.face_id.shape, dtype=np.float64)
                covered = full.face_id >= 0
                hair_visible[covered] = owner[full.face_id[covered]] == 1
                save_png(out / "images" / name, full.image)
                save_png(out / "bald" / name, bald.image)
                save_png(out / "masks" / name, hair_visible)
                files["images"][name] = _sha256(out / "images" / name)
                files["bald"][name] = _sha256(out / "bald" / name)
                files["masks"][name] = _sha256(out / "masks" / name)

    manifest = {
        "spec": spec.to_dict(),
        "identities": identities,
        "styles": list(STYLE_NAMES[:spec.hairstyles]),
        "landmarks": "landmarks.json",
        "files": files,
        "cameras_sha256": _sha256(out / "cameras.json"),
        "landmarks_sha256": _sha256(out / "landmarks.json"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def verify_dataset(out_dir) -> bool:
    """True when every file listed in the manifest matches its recorded hash."""
    out = Path(out_dir)
    mpath = out / "manifest.json"
    if not mpath.exists():
        return False
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError:
        return False
    sub_of = {"images": "images", "bald": "bald", "masks": "masks", "meshes": "meshes"}
    try:
        for group, names in manifest["files"].items():
            for name, digest in names.items():
                path = out / sub_of[group] / name
                if not path.exists() or _sha256(path) != digest:
                    return False
        if _sha256(out / "cameras.json") != manifest["cameras_sha256"]:
            return False
        if _sha256(out / "landmarks.json") != manifest["landmarks_sha256"]:
            return False
    except (KeyError, OSError):
        return False
    return True


class DatasetIndex:
    """Read access to a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise ParseError(f"{self.root}: no manifest.json (not a dataset directory)")
        self.manifest = json.loads(mpath.read_text())
        self.spec = DatasetSpec.from_dict(self.manifest["spec"])
        self.rig: CameraRig = load_cameras_json(self.root / "cameras.json")
        self.landmarks = json.loads((self.root / "landmarks.json").read_text())["indices"]
        self._style_of = {rec["id"]: rec["hairstyle"] for rec in self.manifest["identities"]}
        self._cache = {}

    @property
    def identity_ids(self):
        return [rec["id"] for rec in self.manifest["identities"]]

    @property
    def styles(self):
        return list(self.manifest["styles"])

    def style_of(self, identity_id: str) -> str:
        return self._style_of[identity_id]

    def wearers(self, style: str):
        return [i for i in self.identity_ids if self._style_of[i] == style]

    def _load(self, kind, i, e, c):
        key = (kind, i, e, c)
        if key not in self._cache:
            path = self.root / kind / _img_name(int(i), e, c)
            arr = load_png(path)
            if kind == "masks":
                arr = arr > 0.5
            self._cache[key] = arr
        return self._cache[key]

    def full_image(self, identity_id: str, e: int, c: int):
        return self._load("images", identity_id, e, c)

    def bald_image(self, identity_id: str, e: int, c: int):
        return self._load("bald", identity_id, e, c)

    def hair_mask(self, identity_id: str, e: int, c: int):
        return self._load("masks", identity_id, e, c)

    def mesh(self, identity_id: str, e: int) -> TriMesh:
        return load_obj(self.root / "meshes" / _mesh_name(int(identity_id), e))

    def build_tensor(self) -> VertexTensor:
        """Stack all meshes into the (3N, I, E) registered vertex tensor."""
        ids = self.identity_ids
        E = self.spec.expressions
        first = self.mesh(ids[0], 0)
        data = np.zeros((first.n_vertices * 3, len(ids), E))
        faces = first.faces
        for ii, ident in enumerate(ids):
            for e in range(E):
                m = self.mesh(ident, e)
                if m.n_vertices != first.n_vertices or not np.array_equal(m.faces, faces):
                    raise DimensionError("dataset meshes do not share topology")
                data[:, ii, e] = m.vertices.reshape(-1)
        return VertexTensor(data=data, faces=faces)
