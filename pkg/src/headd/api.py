"""Shared request schema between the command line and the HTTP service.

Both front ends resolve render and animation requests through the same payload
dictionaries and the same byte-level PNG encoding, so output from one is byte
comparable with output from the other. Payloads are plain dicts:

render:
    s            r floats (default: the model's mean identity code)
    activations  E-1 floats in [0, 1] (default: all zero, the neutral face)
    texture_id   library texture name, or
    texture_code generator code (D floats); omitted -> all-zero code
    hairstyle    style name (default "bald")
    camera       rig index or an explicit camera dict (default rig camera 0)
    size         square output size, capped (scales the chosen camera)
    samples      quadrature samples per ray (default: checkpoint setting)

animate: the same base fields plus "frames", a list of per-frame overrides
({"activations": [...], "camera": k}); renders one PNG per frame.
"""

from __future__ import annotations

import io
import time
import zipfile
from dataclasses import asdict, dataclass, replace

import numpy as np

from .checkpoint import Checkpoint, render_request
from .config import RenderConfig
from .errors import DimensionError, ParseError
from .geometry import Camera
from .imageops import png_bytes
from .texture import generate_texture

DEFAULT_MAX_SIZE = 256

_CROCKFORD = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"


def new_job_id(rng: np.random.Generator | None = None) -> str:
    """26-character sortable id: 48-bit millisecond timestamp + 80 random bits."""
    rng = rng or np.random.default_rng()
    ms = int(time.time() * 1000) & ((1 << 48) - 1)
    rand = int.from_bytes(rng.bytes(10), "big")
    value = (ms << 80) | rand
    chars = []
    for _ in range(26):
        chars.append(_CROCKFORD[value & 31])
        value >>= 5
    return "".join(reversed(chars))


@dataclass
class JobRecord:
    """Lifecycle of one async job; states only move forward."""

    job_id: str
    kind: str
    state: str = "queued"        # queued -> running -> done | failed
    progress: float = 0.0
    result_path: str = ""
    error: str = ""

    def to_dict(self):
        return asdict(self)


def scaled_camera(cam: Camera, size: int) -> Camera:
    """The same pose at a square target resolution; intrinsics scale with it."""
    if size == cam.width and size == cam.height:
        return cam
    sx = size / cam.width
    sy = size / cam.height
    return Camera(fx=cam.fx * sx, fy=cam.fy * sy, cx=cam.cx * sx, cy=cam.cy * sy,
                  width=size, height=size,
                  rotation=cam.rotation, translation=cam.translation)


def resolve_camera(ckpt: Checkpoint, payload: dict,
                   max_size: int = DEFAULT_MAX_SIZE) -> Camera:
    spec = payload.get("camera", 0)
    if isinstance(spec, bool):
        raise ParseError("camera must be a rig index or a camera dict")
    if isinstance(spec, (int, np.integer)):
        if not 0 <= spec < len(ckpt.rig):
            raise DimensionError(
                f"camera index {spec} outside rig of {len(ckpt.rig)}")
        cam = ckpt.rig[int(spec)]
    elif isinstance(spec, dict):
        cam = Camera.from_dict(spec)
    else:
        raise ParseError("camera must be a rig index or a camera dict")
    size = payload.get("size")
    if size is not None:
        size = int(size)
        if size < 8 or size > max_size:
            raise DimensionError(f"size {size} outside [8, {max_size}]")
        cam = scaled_camera(cam, size)
    return cam


def _resolve_codes(ckpt: Checkpoint, payload: dict):
    """(s, activations, texture features) with library-aware defaults."""
    texture_id = payload.get("texture_id")
    if texture_id is not None:
        texture = ckpt.texture_for(str(texture_id))
        default_s = None
        if str(texture_id) in ckpt.identity_codes:
            default_s = ckpt.identity_code(str(texture_id))
    else:
        code = payload.get("texture_code")
        if code is None:
            code = np.zeros(ckpt.generator.code_dim)
        texture = generate_texture(ckpt.generator, code)
        default_s = None

    s = payload.get("s")
    if s is None:
        s = ckpt.model.mean_identity_code() if default_s is None else default_s
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.shape[0] != ckpt.model.rank:
        raise DimensionError(
            f"identity code has length {s.shape[0]}, expected {ckpt.model.rank}")

    acts = np.asarray(payload.get("activations", []), dtype=np.float64).reshape(-1)
    if acts.size == 0:
        acts = np.zeros(ckpt.model.n_expressions - 1)
    if acts.shape[0] != ckpt.model.n_expressions - 1:
        raise DimensionError(
            f"activations have length {acts.shape[0]}, "
            f"expected {ckpt.model.n_expressions - 1}")
    return s, acts, texture


def _resolve_style(ckpt: Checkpoint, payload: dict) -> str:
    style = str(payload.get("hairstyle", "bald"))
    if style not in ckpt.hair:
        raise DimensionError(f"unknown hairstyle {style!r}; have {ckpt.styles}")
    return style


def _resolve_render_cfg(ckpt: Checkpoint, payload: dict) -> RenderConfig:
    samples = payload.get("samples")
    if samples is None:
        return ckpt.render_cfg
    samples = int(samples)
    if samples < 1 or samples > 512:
        raise DimensionError(f"samples {samples} outside [1, 512]")
    return replace(ckpt.render_cfg, samples_per_ray=samples)


def resolve_render(ckpt: Checkpoint, payload: dict,
                   max_size: int = DEFAULT_MAX_SIZE):
    """Validate and execute one render payload. Returns (rgb, alpha)."""
    if not isinstance(payload, dict):
        raise ParseError("render request must be a JSON object")
    camera = resolve_camera(ckpt, payload, max_size)
    s, acts, texture = _resolve_codes(ckpt, payload)
    style = _resolve_style(ckpt, payload)
    cfg = _resolve_render_cfg(ckpt, payload)
    return render_request(ckpt, camera, s, activations=acts, features=texture,
                          style=style, render_cfg=cfg)


def render_png(ckpt: Checkpoint, payload: dict,
               max_size: int = DEFAULT_MAX_SIZE) -> bytes:
    rgb, _ = resolve_render(ckpt, payload, max_size)
    return png_bytes(rgb)


def deterministic_zip(entries) -> bytes:
    """Zip of (name, bytes) pairs with frozen metadata so digests are stable."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, blob in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, blob)
    return buf.getvalue()


def animate_zip(ckpt: Checkpoint, payload: dict,
                max_size: int = DEFAULT_MAX_SIZE) -> bytes:
    """Render a frame stream into a zip of PNGs named frame_0000.png, ..."""
    if not isinstance(payload, dict):
        raise ParseError("animate request must be a JSON object")
    frames = payload.get("frames")
    if not isinstance(frames, list) or not frames:
        raise ParseError("animate request needs a non-empty frames list")
    if len(frames) > 240:
        raise DimensionError(f"{len(frames)} frames exceed the cap of 240")
    base = {k: v for k, v in payload.items() if k != "frames"}
    entries = []
    for i, frame in enumerate(frames):
        if not isinstance(frame, dict):
            raise ParseError(f"frame {i} is not an object")
        merged = dict(base)
        merged.update(frame)
        rgb, _ = resolve_render(ckpt, merged, max_size)
        entries.append((f"frame_{i:04d}.png", png_bytes(rgb)))
    return deterministic_zip(entries)


def parse_fit_inputs(ckpt: Checkpoint, image, mask, landmarks_obj: dict):
    """Normalize fit inputs shared by the CLI and the service.

    landmarks_obj is {"camera": rig index | camera dict,
                      "landmarks": [[vertex, [px, py]], ...],
                      "fit": optional FitConfig overrides}.
    Returns (image, mask, landmark pairs, camera, fit config dict).
    """
    if not isinstance(landmarks_obj, dict):
        raise ParseError("landmarks payload must be a JSON object")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 4:
        image = image[:, :, :3]
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"image has shape {image.shape}, expected (H, W, 3)")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[:, :, 0]
    if mask.shape != image.shape[:2]:
        raise DimensionError(
            f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    mask = mask > 0.5

    camera = resolve_camera(ckpt, {"camera": landmarks_obj.get("camera", 0)},
                            max_size=max(image.shape[0], image.shape[1]))
    if (camera.height, camera.width) != image.shape[:2]:
        raise DimensionError(
            f"camera size {(camera.height, camera.width)} does not match "
            f"image {image.shape[:2]}")

    raw = landmarks_obj.get("landmarks")
    if not isinstance(raw, list) or not raw:
        raise ParseError("landmarks payload needs a non-empty landmarks list")
    n_vertices = ckpt.model.n_vertices
    pairs = []
    for entry in raw:
        try:
            vidx, (px, py) = entry
            vidx = int(vidx)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"bad landmark entry {entry!r}") from exc
        if not 0 <= vidx < n_vertices:
            raise DimensionError(
                f"landmark vertex {vidx} outside mesh of {n_vertices}")
        pairs.append((vidx, (float(px), float(py))))
    cfg = landmarks_obj.get("fit", {})
    if not isinstance(cfg, dict):
        raise ParseError("fit overrides must be an object")
    return image, mask, pairs, camera, cfg


def model_summary(ckpt: Checkpoint) -> dict:
    """The /model payload: sizes, library ids, rig layout."""
    return {
        "rank": ckpt.model.rank,
        "expressions": ckpt.model.n_expressions,
        "hairstyles": len(ckpt.styles),
        "texture_ids": ckpt.texture_ids,
        "hairstyle_ids": ckpt.styles,
        "identity_codes": {k: [float(x) for x in ckpt.identity_code(k)]
                           for k in sorted(ckpt.identity_codes)},
        "rig": ckpt.rig.summary(),
        "render": ckpt.render_cfg.to_dict(),
    }
