"""Adam optimization and the two-phase training pipeline.

Phase A fits per-identity textures plus the shared head decoder against bald
renders, round-robin over identities so the decoder sees everyone. Phase B
freezes the head branch and fits per-style hair planes plus a shared hair
decoder against full renders, drawing a configurable fraction of each ray
batch from the hair visibility mask. The whole run is one flat deterministic
schedule driven by a single seeded generator, which is what makes bit-exact
resume possible: optimizer.bin stores parameters, Adam moments, the RNG state,
and the global step.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import config
from .bilinear import build_bilinear_model, load_model
from .checkpoint import BALD_STYLE, Checkpoint, save_checkpoint
from .config import RenderConfig
from .dataset import DatasetIndex
from .errors import DimensionError, GradientError, TrainingDiverged
from .geometry import pixel_ray_grid
from .gradients import (BranchState, accumulate, density_smoothness,
                        render_loss_and_grads)
from .hexplanes import FieldDecoder, HexPlanes, init_decoder, zero_planes
from .imageops import psnr
from .render import render_image
from .texture import fit_generator, init_texture, planes_from_features, \
    rasterize_to_planes

OPT_MAGIC = b"H360OPT\x00"

_A_KEYS = ("texture", "head.decoder.weight", "head.decoder.bias")
_B_KEYS = ("hair.planes", "hair.decoder.weight", "hair.decoder.bias")


@dataclass
class AdamState:
    """Bias-corrected Adam over named parameter arrays, one step count per name."""

    lr: float = config.LEARNING_RATE
    beta1: float = config.ADAM_BETAS[0]
    beta2: float = config.ADAM_BETAS[1]
    eps: float = config.ADAM_EPS
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)
    lr_scale: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict):
        for key, g in grads.items():
            p = params[key]
            if p.shape != np.shape(g):
                raise DimensionError(f"gradient shape mismatch for {key!r}")
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            t = self.t.get(key, 0) + 1
            self.t[key] = t
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            lr = self.lr * self.lr_scale.get(key, 1.0)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    """Training knobs. Learning-rate scales multiply the Adam base rate."""

    steps_head: int = 1500          # phase A Adam steps per identity
    steps_hair: int = 1000          # phase B Adam steps per hairstyle
    rays_per_step: int = 512
    samples_per_ray: int = 40
    near: float = 1.95              # tight band around the head for training
    far: float = 3.45
    background: tuple = config.BACKGROUND
    head_resolution: int = config.PLANE_RESOLUTION
    hair_resolution: int = 64
    channels: int = config.FEATURE_CHANNELS
    blend_width: float = config.BLEND_WIDTH
    bbox: tuple = (config.BBOX_LO, config.BBOX_HI)
    lr: float = config.LEARNING_RATE
    lr_scale_texture: float = 24.0
    lr_scale_planes: float = 24.0
    lr_scale_decoder: float = 4.0
    loss: str = "l1"
    lambda_density: float = config.LAMBDA_DENSITY
    density_every: int = 10         # 0 disables the smoothness term
    density_points: int = 256
    density_rho: float = 0.05
    foreground_fraction: float = 0.5
    mask_fraction: float = 0.5
    texture_init_scale: float = 0.1
    rank: int | None = None
    train_views: tuple | None = None   # camera indices; None = all rig views
    seed: int = 0
    full_supervision: bool = False      # ablation: phase A sees full images, no phase B
    stop_after: int | None = None       # halt after N global steps (resumable)
    snapshot_every: int = 250
    log_every: int = 50
    eval_views: int = 3

    def to_dict(self):
        d = asdict(self)
        for k in ("background", "bbox"):
            d[k] = list(d[k])
        if d["train_views"] is not None:
            d["train_views"] = list(d["train_views"])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        for k in ("background", "bbox"):
            if k in known and known[k] is not None:
                known[k] = tuple(known[k])
        if known.get("train_views") is not None:
            known["train_views"] = tuple(known["train_views"])
        return cls(**known)

    def render_config(self) -> RenderConfig:
        return RenderConfig(samples_per_ray=self.samples_per_ray, near=self.near,
                            far=self.far, background=tuple(self.background))


def _scale_for(key: str, cfg: TrainConfig) -> float:
    if key.startswith("texture/"):
        return cfg.lr_scale_texture
    if ".planes" in key:
        return cfg.lr_scale_planes
    if ".decoder." in key:
        return cfg.lr_scale_decoder
    return 1.0


# ---------------------------------------------------------------------------
# Optimizer-state serialization (deterministic byte layout)
# ---------------------------------------------------------------------------

def serialize_state(gstep: int, params: dict, adam: AdamState,
                    rng: np.random.Generator) -> bytes:
    arrays = []
    blobs = []
    for name in sorted(params):
        arrays.append({"key": name, "shape": list(params[name].shape)})
        blobs.append(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    for prefix, table in (("m", adam.m), ("v", adam.v)):
        for name in sorted(table):
            arrays.append({"key": f"{prefix}/{name}", "shape": list(table[name].shape)})
            blobs.append(np.ascontiguousarray(table[name], dtype="<f8").tobytes())
    header = {
        "gstep": gstep,
        "arrays": arrays,
        "adam_t": {k: adam.t[k] for k in sorted(adam.t)},
        "rng": rng.bit_generator.state,
    }
    hj = json.dumps(header, sort_keys=True).encode()
    return OPT_MAGIC + struct.pack("<I", len(hj)) + hj + b"".join(blobs)


def deserialize_state(blob: bytes):
    if blob[:8] != OPT_MAGIC:
        raise DimensionError("not an optimizer state blob")
    hlen = struct.unpack("<I", blob[8:12])[0]
    header = json.loads(blob[12:12 + hlen].decode())
    offset = 12 + hlen
    values = {}
    for rec in header["arrays"]:
        size = int(np.prod(rec["shape"])) if rec["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).copy()
        values[rec["key"]] = arr.reshape(rec["shape"])
        offset += size * 8
    return header, values


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _foreground_pixels(img_flat):
    """Indices of pixels that are not pure background white."""
    return np.nonzero(np.any(img_flat < 1.0, axis=1))[0]


class _Run:
    """Mutable state for one training run over a dataset."""

    def __init__(self, idx: DatasetIndex, cfg: TrainConfig, identities):
        self.idx = idx
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.ids = list(identities) if identities else idx.identity_ids
        for i in self.ids:
            if i not in idx.identity_ids:
                raise DimensionError(f"identity {i!r} not in dataset")
        self.E = idx.spec.expressions
        self.rig = idx.rig
        self.views = list(cfg.train_views) if cfg.train_views else list(range(len(self.rig)))
        self.HW = self.rig[0].width * self.rig[0].height

        tensor = idx.build_tensor()
        rank = cfg.rank or tensor.n_identities
        self.model = build_bilinear_model(tensor, rank)
        self.codes = {ident: self.model.identity_factor[k]
                      for k, ident in enumerate(idx.identity_ids)}

        # Per-view ray grids and flattened supervision targets.
        self.origins = {}
        self.dirs = {}
        for c in self.views:
            o, d = pixel_ray_grid(self.rig[c])
            self.origins[c] = o
            self.dirs[c] = d
        self.bald = {}
        self.full = {}
        self.fg = {}
        self.hairpix = {}
        for ident in self.ids:
            for e in range(self.E):
                for c in self.views:
                    bald = idx.bald_image(ident, e, c).reshape(-1, 3)
                    full = idx.full_image(ident, e, c).reshape(-1, 3)
                    self.bald[ident, e, c] = bald
                    self.full[ident, e, c] = full
                    src = full if cfg.full_supervision else bald
                    self.fg[ident, e, c] = _foreground_pixels(src)
                    self.hairpix[ident, e, c] = np.nonzero(
                        idx.hair_mask(ident, e, c).reshape(-1))[0]

        # Conditioning raster maps per (identity, expression), via the model's
        # own reconstruction so training matches the deployment path.
        self.rmaps = {}
        for ident in self.ids:
            s = self.codes[ident]
            for e in range(self.E):
                b = np.zeros(self.E)
                b[e] = 1.0
                verts = (self.model.core @ b @ s).reshape(-1, 3)
                self.rmaps[ident, e] = rasterize_to_planes(
                    verts, self.model.faces, resolution=cfg.head_resolution,
                    bbox=cfg.bbox)

        # Trainable parameters.
        self.textures = {ident: init_texture(self.model.n_vertices, cfg.channels,
                                             self.rng, cfg.texture_init_scale)
                         for ident in self.ids}
        self.head_decoder = init_decoder(cfg.channels, self.rng)
        self.styles = [s for s in idx.styles
                       if s != BALD_STYLE and any(i in self.ids for i in idx.wearers(s))]
        if cfg.full_supervision:
            self.styles = []
        self.hair_planes = {}
        self.hair_decoder = None

        self.total_a = cfg.steps_head * len(self.ids)
        self.total_b = cfg.steps_hair * len(self.styles)
        self.losses_a = {ident: [] for ident in self.ids}
        self.losses_b = {s: [] for s in self.styles}
        self.adam = AdamState(lr=cfg.lr)
        self.snapshot = None
        self.generator = None

    # -- parameter table -----------------------------------------------------
    def params(self) -> dict:
        out = {f"texture/{ident}": self.textures[ident] for ident in self.ids}
        out["head.decoder.weight"] = self.head_decoder.weight
        out["head.decoder.bias"] = self.head_decoder.bias
        for s, planes in self.hair_planes.items():
            out[f"hair.planes/{s}"] = planes.planes
        if self.hair_decoder is not None:
            out["hair.decoder.weight"] = self.hair_decoder.weight
            out["hair.decoder.bias"] = self.hair_decoder.bias
        return out

    def enter_phase_b(self):
        """Phase transition: freeze textures, derive generator, set up hair."""
        self.generator = fit_generator([self.textures[i] for i in self.ids])
        if not self.styles:
            return
        cfg = self.cfg
        self.hair_decoder = init_decoder(cfg.channels, self.rng)
        for s in self.styles:
            self.hair_planes[s] = zero_planes(cfg.hair_resolution, cfg.channels,
                                              bbox=cfg.bbox, blend_width=cfg.blend_width)
        self.static_head = {}
        for (ident, e), rmap in self.rmaps.items():
            self.static_head[ident, e] = planes_from_features(
                rmap, self.textures[ident], bbox=cfg.bbox, blend_width=cfg.blend_width)

    # -- one global step -----------------------------------------------------
    def run_step(self, gstep: int, rcfg: RenderConfig):
        cfg = self.cfg
        rng = self.rng
        if gstep < self.total_a:
            ident = self.ids[gstep % len(self.ids)]
            e = int(rng.integers(self.E))
            c = self.views[int(rng.integers(len(self.views)))]
            n_fg = int(round(cfg.rays_per_step * cfg.foreground_fraction))
            fg = self.fg[ident, e, c]
            if len(fg):
                pix_a = fg[rng.integers(len(fg), size=n_fg)]
            else:
                pix_a = rng.integers(self.HW, size=n_fg)
            pix_b = rng.integers(self.HW, size=cfg.rays_per_step - n_fg)
            pix = np.concatenate([pix_a, pix_b])
            source = self.full if cfg.full_supervision else self.bald
            target = source[ident, e, c][pix]
            planes = planes_from_features(self.rmaps[ident, e], self.textures[ident],
                                          bbox=cfg.bbox, blend_width=cfg.blend_width)
            branch = BranchState(planes, self.head_decoder,
                                 rmap=self.rmaps[ident, e],
                                 features=self.textures[ident])
            loss, _, tape = render_loss_and_grads(
                branch, None, self.origins[c][pix], self.dirs[c][pix], target,
                rcfg, trainable=_A_KEYS, loss=cfg.loss)
            if cfg.lambda_density > 0 and cfg.density_every \
                    and gstep % cfg.density_every == 0:
                _, dtape = density_smoothness(
                    branch, rng, cfg.density_points, cfg.density_rho, cfg.bbox,
                    trainable=_A_KEYS, prefix="head")
                accumulate(tape, dtape, cfg.lambda_density)
            grads = {}
            for key, val in tape.items():
                grads[f"texture/{ident}" if key == "texture" else key] = val
            self.losses_a[ident].append(loss)
        else:
            style = self.styles[(gstep - self.total_a) % len(self.styles)]
            wearers = [i for i in self.idx.wearers(style) if i in self.ids]
            ident = wearers[int(rng.integers(len(wearers)))]
            e = int(rng.integers(self.E))
            c = self.views[int(rng.integers(len(self.views)))]
            n_m = int(round(cfg.rays_per_step * cfg.mask_fraction))
            hp = self.hairpix[ident, e, c]
            if len(hp):
                pix_a = hp[rng.integers(len(hp), size=n_m)]
            else:
                pix_a = rng.integers(self.HW, size=n_m)
            pix_b = rng.integers(self.HW, size=cfg.rays_per_step - n_m)
            pix = np.concatenate([pix_a, pix_b])
            target = self.full[ident, e, c][pix]
            head = BranchState(self.static_head[ident, e], self.head_decoder)
            hair = BranchState(self.hair_planes[style], self.hair_decoder)
            loss, _, tape = render_loss_and_grads(
                head, hair, self.origins[c][pix], self.dirs[c][pix], target,
                rcfg, trainable=_B_KEYS, loss=cfg.loss)
            if cfg.lambda_density > 0 and cfg.density_every \
                    and gstep % cfg.density_every == 0:
                _, dtape = density_smoothness(
                    hair, rng, cfg.density_points, cfg.density_rho, cfg.bbox,
                    trainable=_B_KEYS, prefix="hair")
                accumulate(tape, dtape, cfg.lambda_density)
            grads = {}
            for key, val in tape.items():
                grads[f"hair.planes/{style}" if key == "hair.planes" else key] = val
            self.losses_b[style].append(loss)

        if not np.isfinite(loss):
            raise GradientError("non-finite training loss")
        params = self.params()
        self.adam.lr_scale = {k: _scale_for(k, cfg) for k in grads}
        self.adam.step(params, grads)
        return loss


def train_head_library(dataset_dir, out_dir, cfg: TrainConfig,
                       identities=None, resume: bool = False) -> dict:
    """Run the two-phase pipeline and write a checkpoint directory.

    With resume=True, continues a stop_after-interrupted run bit-exactly from
    out_dir/optimizer.bin under the identical config.
    """
    idx = dataset_dir if isinstance(dataset_dir, DatasetIndex) else DatasetIndex(dataset_dir)
    out = Path(out_dir)
    run = _Run(idx, cfg, identities)
    rcfg = cfg.render_config()
    total = run.total_a + run.total_b
    start = 0

    if resume:
        blob_path = out / "optimizer.bin"
        if not blob_path.exists():
            raise DimensionError(f"{out}: nothing to resume (no optimizer.bin)")
        header, values = deserialize_state(blob_path.read_bytes())
        start = int(header["gstep"])
        if start > run.total_a and run.styles:
            run.enter_phase_b()
        for key, arr in values.items():
            if key.startswith(("m/", "v/")):
                table = run.adam.m if key[0] == "m" else run.adam.v
                table[key[2:]] = arr.copy()
            else:
                _assign_param(run, key, arr)
        run.adam.t = {k: int(v) for k, v in header["adam_t"].items()}
        run.rng.bit_generator.state = header["rng"]
        # Rebuild phase B derived state from the restored textures.
        if start > run.total_a and run.styles:
            run.generator = fit_generator([run.textures[i] for i in run.ids])
            for (ident, e), rmap in run.rmaps.items():
                run.static_head[ident, e] = planes_from_features(
                    rmap, run.textures[ident], bbox=cfg.bbox,
                    blend_width=cfg.blend_width)

    stop_at = total if cfg.stop_after is None else min(total, cfg.stop_after)
    gstep = start
    try:
        while gstep < stop_at:
            if gstep == run.total_a and run.styles and run.hair_decoder is None:
                run.enter_phase_b()
            run.run_step(gstep, rcfg)
            gstep += 1
            if cfg.snapshot_every and gstep % cfg.snapshot_every == 0:
                run.snapshot = (gstep, {k: v.copy() for k, v in run.params().items()})
    except GradientError as exc:
        if run.snapshot is not None:
            _restore_snapshot(run)
        _write_checkpoint(run, out, gstep, finished=False)
        raise TrainingDiverged(
            f"training diverged at step {gstep}: {exc}", checkpoint_dir=str(out)) from exc

    if run.generator is None:
        run.generator = fit_generator([run.textures[i] for i in run.ids])
    report = _write_checkpoint(run, out, gstep, finished=gstep >= total)
    return report


def _assign_param(run: _Run, key: str, arr):
    params = run.params()
    if key not in params:
        raise DimensionError(f"optimizer state references unknown parameter {key!r}")
    params[key][...] = arr


def _restore_snapshot(run: _Run):
    _, snap = run.snapshot
    params = run.params()
    for k, v in snap.items():
        if k in params:
            params[k][...] = v


def _write_checkpoint(run: _Run, out: Path, gstep: int, finished: bool) -> dict:
    cfg = run.cfg
    idx = run.idx
    hair = {BALD_STYLE: None}
    for s in run.styles:
        if s in run.hair_planes and run.hair_decoder is not None:
            hair[s] = (run.hair_planes[s], run.hair_decoder)
    report = {
        "finished": finished,
        "global_step": gstep,
        "phase_a_steps": run.total_a,
        "phase_b_steps": run.total_b,
        "train_config": cfg.to_dict(),
        "identities": run.ids,
        "styles": [BALD_STYLE] + run.styles,
        "loss_head": {i: _downsample(run.losses_a[i], cfg.log_every) for i in run.ids},
        "loss_hair": {s: _downsample(run.losses_b[s], cfg.log_every) for s in run.styles},
    }
    ckpt = Checkpoint(
        model=run.model,
        generator=run.generator or fit_generator([run.textures[i] for i in run.ids]),
        head_decoder=run.head_decoder,
        textures=dict(run.textures),
        hair=hair,
        rig=run.rig,
        render_cfg=run.cfg.render_config(),
        head_resolution=cfg.head_resolution,
        blend_width=cfg.blend_width,
        bbox=tuple(cfg.bbox),
        hairstyle_of={i: idx.style_of(i) for i in run.ids},
        identity_codes={i: run.codes[i] for i in run.ids},
        report=report,
    )
    if finished:
        report["train_psnr"] = _train_psnr(run, ckpt)
        ckpt.report = report
    blob = serialize_state(gstep, run.params(), run.adam, run.rng)
    save_checkpoint(out, ckpt, optimizer_blob=blob)
    return report


def _downsample(vals, every):
    if not vals:
        return []
    every = max(1, every)
    out = [float(np.mean(vals[k:k + every])) for k in range(0, len(vals), every)]
    return [round(v, 6) for v in out]


def _train_psnr(run: _Run, ckpt: Checkpoint) -> dict:
    """Composite train-view PSNR per identity on a few evenly spaced views."""
    from .checkpoint import assemble_field  # local to avoid cycles at import time

    cfg = run.cfg
    rcfg = cfg.render_config()
    n_eval = min(cfg.eval_views, len(run.views))
    if n_eval == 0:
        return {}
    pick = [run.views[int(k)] for k in
            np.linspace(0, len(run.views) - 1, n_eval).round()]
    out = {}
    b = np.zeros(run.E)
    b[0] = 1.0
    for ident in run.ids:
        style = run.idx.style_of(ident)
        if style not in run.styles:
            style = BALD_STYLE  # untrained or ablation: head branch only
        fieldobj, _ = assemble_field(ckpt, run.codes[ident], b,
                                     run.textures[ident], style)
        scores = []
        for c in pick:
            rgb, _ = render_image(fieldobj, run.rig[c], rcfg)
            scores.append(psnr(rgb.reshape(-1, 3), run.full[ident, 0, c]))
        out[ident] = round(float(np.mean(scores)), 3)
    return out
