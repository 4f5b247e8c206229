"""Checkpoint directory layout and field assembly for deployment.

A checkpoint bundles everything needed to render and fit heads:

    model.bin          bilinear mesh model
    generator.bin      affine texture generator over the trained library
    decoder.bin        head branch decoder
    textures/<id>.bin  per-identity neural textures
    hair/<style>.bin   hex-plane checkpoint per hairstyle (shared hair decoder
                       duplicated into each file so they stay self-contained)
    cameras.json       the training camera rig
    config.json        render/conditioning parameters and id/style tables
    report.json        training losses and metrics
    optimizer.bin      optional resume state (written by training)

The "bald" hairstyle is the absence of a hair field, so swapping to bald
renders the head branch alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config
from .bilinear import BilinearModel, blend_from_activations, load_model, save_model, \
    synthesize_vertices
from .config import RenderConfig
from .errors import DimensionError, ParseError
from .geometry import Camera, CameraRig, load_cameras_json, save_cameras_json
from .hexplanes import (FieldDecoder, HexPlaneField, HexPlanes, CompositeField,
                        load_decoder, load_hexplanes, save_decoder, save_hexplanes)
from .render import render_image
from .texture import (TextureGenerator, condition_field, load_generator,
                      load_texture, save_generator, save_texture)

BALD_STYLE = "bald"


@dataclass
class Checkpoint:
    model: BilinearModel
    generator: TextureGenerator
    head_decoder: FieldDecoder
    textures: dict                      # id (str) -> (N, C) features
    hair: dict                          # style (str) -> (HexPlanes, FieldDecoder) | None
    rig: CameraRig
    render_cfg: RenderConfig
    head_resolution: int = config.PLANE_RESOLUTION
    blend_width: float = config.BLEND_WIDTH
    bbox: tuple = (config.BBOX_LO, config.BBOX_HI)
    hairstyle_of: dict = field(default_factory=dict)   # texture id -> style
    identity_codes: dict = field(default_factory=dict)  # texture id -> identity row
    report: dict = field(default_factory=dict)

    @property
    def texture_ids(self):
        return sorted(self.textures.keys())

    @property
    def styles(self):
        return sorted(self.hair.keys())

    def texture_for(self, texture_id: str):
        if texture_id not in self.textures:
            raise KeyError(f"unknown texture id {texture_id!r}")
        return self.textures[texture_id]

    def hair_field(self, style: str):
        """The hair branch for a style; None means bald (no hair branch)."""
        if style not in self.hair:
            raise KeyError(f"unknown hairstyle {style!r}")
        entry = self.hair[style]
        if entry is None:
            return None
        planes, decoder = entry
        return HexPlaneField(planes, decoder)

    def identity_code(self, texture_id: str):
        if texture_id in self.identity_codes:
            return np.asarray(self.identity_codes[texture_id], dtype=np.float64)
        raise KeyError(f"no identity code recorded for {texture_id!r}")


def head_field(ckpt: Checkpoint, s, b, features):
    """Condition the head branch on (s, b, texture). Returns (field, raster map)."""
    planes, rmap = condition_field(
        ckpt.model, s, b, features,
        resolution=ckpt.head_resolution, bbox=ckpt.bbox,
        blend_width=ckpt.blend_width)
    return HexPlaneField(planes, ckpt.head_decoder), rmap


def assemble_field(ckpt: Checkpoint, s, b, features, style: str = BALD_STYLE):
    """Full renderable field for an identity code, blend code, texture, style."""
    head, rmap = head_field(ckpt, s, b, features)
    hair = ckpt.hair_field(style)
    if hair is None:
        return head, rmap
    return CompositeField(head, hair), rmap


def render_request(ckpt: Checkpoint, camera: Camera, s, activations=None,
                   blend=None, texture_id: str | None = None, features=None,
                   style: str = BALD_STYLE, render_cfg: RenderConfig | None = None):
    """Render one view. Either activations or an explicit blend code; either a
    library texture id or explicit features."""
    if blend is None:
        acts = [] if activations is None else activations
        blend = blend_from_activations(acts, ckpt.model.n_expressions)
    if features is None:
        if texture_id is None:
            raise DimensionError("need texture_id or explicit features")
        features = ckpt.texture_for(texture_id)
    cfg = render_cfg or ckpt.render_cfg
    fieldobj, _ = assemble_field(ckpt, s, blend, features, style)
    return render_image(fieldobj, camera, cfg)


def synthesized_mesh(ckpt: Checkpoint, s, b):
    return synthesize_vertices(ckpt.model, s, b)


def save_checkpoint(out_dir, ckpt: Checkpoint, optimizer_blob: bytes | None = None):
    out = Path(out_dir)
    (out / "textures").mkdir(parents=True, exist_ok=True)
    (out / "hair").mkdir(exist_ok=True)
    save_model(out / "model.bin", ckpt.model)
    save_generator(out / "generator.bin", ckpt.generator)
    save_decoder(out / "decoder.bin", ckpt.head_decoder)
    for tid in ckpt.texture_ids:
        save_texture(out / "textures" / f"{tid}.bin", ckpt.textures[tid])
    for style in ckpt.styles:
        entry = ckpt.hair[style]
        if entry is not None:
            save_hexplanes(out / "hair" / f"{style}.bin", entry[0], entry[1])
    save_cameras_json(out / "cameras.json", ckpt.rig)
    meta = {
        "render": ckpt.render_cfg.to_dict(),
        "head_resolution": ckpt.head_resolution,
        "blend_width": ckpt.blend_width,
        "bbox": list(ckpt.bbox),
        "styles": ckpt.styles,
        "texture_ids": ckpt.texture_ids,
        "hairstyle_of": {k: ckpt.hairstyle_of[k] for k in sorted(ckpt.hairstyle_of)},
        "identity_codes": {k: list(map(float, ckpt.identity_codes[k]))
                           for k in sorted(ckpt.identity_codes)},
    }
    (out / "config.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    (out / "report.json").write_text(json.dumps(ckpt.report, indent=1, sort_keys=True))
    if optimizer_blob is not None:
        (out / "optimizer.bin").write_bytes(optimizer_blob)


def load_checkpoint(ckpt_dir) -> Checkpoint:
    root = Path(ckpt_dir)
    if not (root / "model.bin").exists():
        raise ParseError(f"{root}: not a checkpoint directory (missing model.bin)")
    try:
        meta = json.loads((root / "config.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{root}/config.json: {exc}") from exc
    bbox = tuple(meta.get("bbox", (config.BBOX_LO, config.BBOX_HI)))
    blend_width = float(meta.get("blend_width", config.BLEND_WIDTH))
    model = load_model(root / "model.bin")
    generator = load_generator(root / "generator.bin")
    head_decoder = load_decoder(root / "decoder.bin")
    textures = {p.stem: load_texture(p) for p in sorted((root / "textures").glob("*.bin"))}
    hair = {}
    for style in meta.get("styles", []):
        path = root / "hair" / f"{style}.bin"
        if path.exists():
            hair[style] = load_hexplanes(path, bbox=bbox, blend_width=blend_width)
        else:
            hair[style] = None
    if BALD_STYLE not in hair:
        hair[BALD_STYLE] = None
    rig = load_cameras_json(root / "cameras.json")
    report = {}
    if (root / "report.json").exists():
        report = json.loads((root / "report.json").read_text())
    return Checkpoint(
        model=model, generator=generator, head_decoder=head_decoder,
        textures=textures, hair=hair, rig=rig,
        render_cfg=RenderConfig.from_dict(meta.get("render", {})),
        head_resolution=int(meta.get("head_resolution", config.PLANE_RESOLUTION)),
        blend_width=blend_width, bbox=bbox,
        hairstyle_of=dict(meta.get("hairstyle_of", {})),
        identity_codes={k: np.asarray(v, dtype=np.float64)
                        for k, v in meta.get("identity_codes", {}).items()},
        report=report,
    )
