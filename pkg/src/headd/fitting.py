"""Single-image fitting, hairstyle matching and swapping, and animation.

Fitting is strictly staged: (1) landmarks pin the identity code, which is then
frozen bit-for-bit; (2) texture features are optimized photometrically over
the non-hair region from a randomly chosen library texture, never jointly with
the shape; (3) the hair mask is matched against silhouette descriptors of the
hairstyle library. Swapping hair replaces only the hair branch reference, so a
swap to bald renders identically to the head branch alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion

from . import config
from .bilinear import blend_from_activations, fit_shape_landmarks
from .checkpoint import Checkpoint, head_field, render_request
from .config import RenderConfig
from .errors import DimensionError, FittingError
from .geometry import Camera, pixel_ray_grid
from .gradients import BranchState, render_loss_and_grads
from .imageops import block_mean, poisson_blend, psnr
from .optimize import AdamState
from .render import render_image
from .texture import load_texture, planes_from_features, save_texture


@dataclass
class FitConfig:
    """Stage-wise fitting knobs; learning-rate scale multiplies the Adam base."""

    ridge: float = 1e-6
    landmark_iterations: int = 5
    texture_steps: int = 600
    rays_per_step: int = 512
    lr: float = config.LEARNING_RATE
    lr_scale_texture: float = 24.0
    loss: str = "l1"
    seed: int = 0
    poisson_harmonize: bool = False
    descriptor_pool: int = 16
    log_every: int = 50

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class FittedHead:
    s: np.ndarray
    texture: np.ndarray
    hairstyle: str
    camera: dict
    report: dict = field(default_factory=dict)


def save_fitted(out_dir, fitted: FittedHead):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "s": [float(x) for x in fitted.s],
        "hairstyle": fitted.hairstyle,
        "camera": fitted.camera,
        "report": fitted.report,
    }
    (out / "fitted.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    save_texture(out / "texture.bin", fitted.texture)


def load_fitted(in_dir) -> FittedHead:
    root = Path(in_dir)
    meta = json.loads((root / "fitted.json").read_text())
    return FittedHead(
        s=np.asarray(meta["s"], dtype=np.float64),
        texture=load_texture(root / "texture.bin"),
        hairstyle=meta["hairstyle"],
        camera=meta["camera"],
        report=meta.get("report", {}),
    )


# ---------------------------------------------------------------------------
# Hairstyle descriptors and matching
# ---------------------------------------------------------------------------

def hairstyle_descriptor(ckpt: Checkpoint, style: str, cameras,
                         pool: int = 16, render_cfg: RenderConfig | None = None):
    """Pooled hair-only opacity silhouettes at the query views, concatenated.

    Bald has no hair field and descriptors of exact zero, which is what makes
    it the unambiguous match for an empty mask.
    """
    cfg = render_cfg or ckpt.render_cfg
    fieldobj = ckpt.hair_field(style)
    parts = []
    for cam in cameras:
        if fieldobj is None:
            parts.append(np.zeros((pool, pool)))
        else:
            _, alpha = render_image(fieldobj, cam, cfg)
            parts.append(block_mean(alpha, pool))
    return np.concatenate([p.reshape(-1) for p in parts])


def match_hairstyle(masks, ckpt: Checkpoint, pool: int = 16,
                    render_cfg: RenderConfig | None = None) -> str:
    """Pick the library style whose silhouette descriptor is nearest the masks.

    masks is a sequence of (camera, binary mask). Ties resolve to the first
    style in sorted order, so an all-zero query lands on bald.
    """
    if not masks:
        raise FittingError("no masks given for hairstyle matching")
    query = []
    cams = []
    for cam, mask in masks:
        m = np.asarray(mask).astype(np.float64)
        if m.shape != (cam.height, cam.width):
            raise DimensionError("mask shape does not match its camera")
        query.append(block_mean(m, pool).reshape(-1))
        cams.append(cam)
    query = np.concatenate(query)
    best_style = None
    best_score = np.inf
    for style in ckpt.styles:  # sorted; first win keeps the lowest id on ties
        desc = hairstyle_descriptor(ckpt, style, cams, pool=pool, render_cfg=render_cfg)
        score = float(np.mean(np.abs(desc - query)))
        if score < best_score:
            best_score = score
            best_style = style
    return best_style


def swap_hair(fitted: FittedHead, style: str, ckpt: Checkpoint) -> FittedHead:
    """Replace only the hairstyle reference; head shape and texture untouched."""
    if style not in ckpt.hair:
        raise KeyError(f"unknown hairstyle {style!r}")
    return FittedHead(s=fitted.s.copy(), texture=fitted.texture.copy(),
                      hairstyle=style, camera=dict(fitted.camera),
                      report=dict(fitted.report))


# ---------------------------------------------------------------------------
# Single-image fitting
# ---------------------------------------------------------------------------

def fit_single_image(ckpt: Checkpoint, image, hair_mask, landmarks,
                     camera: Camera, cfg: FitConfig | None = None) -> FittedHead:
    """Fit shape, texture, and hairstyle to one image. See the module docstring
    for the staging contract."""
    cfg = cfg or FitConfig()
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(hair_mask).astype(bool)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError("image must be (H, W, 3)")
    if image.shape[:2] != (camera.height, camera.width):
        raise DimensionError("image size does not match the camera")
    if mask.shape != image.shape[:2]:
        raise DimensionError("hair mask shape does not match the image")
    if not landmarks:
        raise FittingError("cannot fit without landmarks")
    head_region = ~mask
    if not head_region.any():
        raise FittingError("hair mask covers the whole image; nothing to fit")

    # Stage 1: identity code from landmarks, then frozen.
    E = ckpt.model.n_expressions
    blend = blend_from_activations(np.zeros(E - 1), E)
    shape = fit_shape_landmarks(ckpt.model, landmarks, camera, blend,
                                ridge=cfg.ridge, iterations=cfg.landmark_iterations)
    s = shape.s
    s.setflags(write=False)

    # Stage 2: texture from a random library donor, photometric on non-hair rays.
    rng = np.random.default_rng(cfg.seed)
    ids = ckpt.texture_ids
    donor = ids[int(rng.integers(len(ids)))]
    texture = ckpt.texture_for(donor).copy()

    rcfg = ckpt.render_cfg
    target_image = image
    harmonized = False
    if cfg.poisson_harmonize:
        target_image, harmonized = _harmonize_target(
            ckpt, s, blend, texture, camera, image, head_region, rcfg)

    _, rmap = head_field(ckpt, s, blend, texture)
    origins, dirs = pixel_ray_grid(camera)
    flat_target = target_image.reshape(-1, 3)
    head_pix = np.nonzero(head_region.reshape(-1))[0]
    adam = AdamState(lr=cfg.lr, lr_scale={"texture": cfg.lr_scale_texture})
    losses = []
    for step in range(cfg.texture_steps):
        pix = head_pix[rng.integers(len(head_pix), size=cfg.rays_per_step)]
        planes = planes_from_features(rmap, texture, bbox=ckpt.bbox,
                                      blend_width=ckpt.blend_width)
        branch = BranchState(planes, ckpt.head_decoder, rmap=rmap, features=texture)
        loss, _, tape = render_loss_and_grads(
            branch, None, origins[pix], dirs[pix], flat_target[pix], rcfg,
            trainable=("texture",), loss=cfg.loss)
        adam.step({"texture": texture}, tape)
        losses.append(loss)

    # Stage 3: hairstyle from the mask silhouette.
    style = match_hairstyle([(camera, mask)], ckpt, pool=cfg.descriptor_pool,
                            render_cfg=rcfg)

    fitted = FittedHead(s=np.array(s), texture=texture, hairstyle=style,
                        camera=camera.to_dict())
    rgb = render_fitted(ckpt, fitted, camera)
    region3 = head_region[:, :, None] & np.ones(3, dtype=bool)
    fitted.report = {
        "landmark_rms": round(shape.residual_rms, 6),
        "landmark_iterations": shape.iterations,
        "texture_donor": donor,
        "harmonized": harmonized,
        "loss": [round(float(np.mean(losses[k:k + cfg.log_every])), 6)
                 for k in range(0, len(losses), cfg.log_every)],
        "psnr_head_region": round(psnr(rgb[region3], image[region3]), 3),
        "psnr_full": round(psnr(rgb, image), 3),
        "hairstyle": style,
        "fit_config": cfg.to_dict(),
    }
    return fitted


def _harmonize_target(ckpt, s, blend, texture, camera, image, head_region, rcfg):
    """Poisson-blend the donor-texture render into the target over the head
    region so stage 2 starts from matched low-frequency color."""
    fieldobj, _ = head_field(ckpt, s, blend, texture)
    rendered, alpha = render_image(fieldobj, camera, rcfg)
    blend_mask = head_region & (alpha > 0.5)
    blend_mask[0, :] = blend_mask[-1, :] = False
    blend_mask[:, 0] = blend_mask[:, -1] = False
    blend_mask = binary_erosion(blend_mask, iterations=1)
    if not blend_mask.any():
        return image, False
    out = image.copy()
    out[blend_mask] = poisson_blend(rendered, image, blend_mask)[blend_mask]
    return out, True


def render_fitted(ckpt: Checkpoint, fitted: FittedHead, camera: Camera | None = None,
                  activations=None, render_cfg: RenderConfig | None = None,
                  style: str | None = None):
    """Render a fitted head, optionally at another view/expression/style."""
    cam = camera or Camera.from_dict(fitted.camera)
    E = ckpt.model.n_expressions
    acts = np.zeros(E - 1) if activations is None else np.asarray(activations)
    rgb, _ = render_request(ckpt, cam, fitted.s, activations=acts,
                            features=fitted.texture,
                            style=style or fitted.hairstyle,
                            render_cfg=render_cfg)
    return rgb


def animate(ckpt: Checkpoint, s, texture, hairstyle: str, stream,
            render_cfg: RenderConfig | None = None):
    """Render an activation/camera stream into frames.

    stream entries are {"activations": [...], "camera": rig index} dicts; the
    conditioned head planes are rebuilt per frame since the blend code changes.
    """
    frames = []
    for entry in stream:
        acts = entry.get("activations", [])
        cam_idx = int(entry.get("camera", 0))
        if not 0 <= cam_idx < len(ckpt.rig):
            raise DimensionError(f"camera index {cam_idx} outside the rig")
        rgb, alpha = render_request(ckpt, ckpt.rig[cam_idx], s, activations=acts,
                                    features=texture, style=hairstyle,
                                    render_cfg=render_cfg)
        frames.append((rgb, alpha))
    return frames
