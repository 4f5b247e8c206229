"""Hex-plane feature fields: six axis-aligned feature grids and a linear decoder.

Each world axis has a positive and a negative plane of shape (R, R, C). A point
is featurized per axis by dropping that coordinate, bilinearly sampling both
planes at the remaining two (align-corners grid mapping), and blending the pair
with a weight that moves from the negative to the positive plane across a band
of width 2*delta around the axis midplane. The three axis contributions sum.
Points outside the bounding box contribute zero features and receive no
gradient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import config
from .errors import DimensionError, ParseError

HEX_MAGIC = b"H360HEX\x00"
DEC_MAGIC = b"H360DEC\x00"
PLANE_ORDER = ("+x", "-x", "+y", "-y", "+z", "-z")
# uv axes per world axis (the dropped axis is the key).
_UV = ((1, 2), (0, 2), (0, 1))


@dataclass
class HexPlanes:
    planes: np.ndarray
    bbox: tuple = (config.BBOX_LO, config.BBOX_HI)
    blend_width: float = config.BLEND_WIDTH

    def __post_init__(self):
        p = np.asarray(self.planes, dtype=np.float64)
        if p.ndim != 4 or p.shape[0] != 6 or p.shape[1] != p.shape[2]:
            raise DimensionError(f"planes must be (6, R, R, C), got {p.shape}")
        if p.shape[1] < 2:
            raise DimensionError("plane resolution must be at least 2")
        if not np.all(np.isfinite(p)):
            raise DimensionError("plane features must be finite")
        lo, hi = self.bbox
        if not lo < hi:
            raise DimensionError("bbox must satisfy lo < hi")
        if not 0.0 < self.blend_width < (hi - lo) / 2.0:
            raise DimensionError("blend width must be positive and below the half extent")
        self.planes = p
        self.bbox = (float(lo), float(hi))
        self.blend_width = float(self.blend_width)

    @property
    def resolution(self):
        return self.planes.shape[1]

    @property
    def channels(self):
        return self.planes.shape[3]


def zero_planes(resolution: int = config.PLANE_RESOLUTION,
                channels: int = config.FEATURE_CHANNELS,
                bbox=(config.BBOX_LO, config.BBOX_HI),
                blend_width: float = config.BLEND_WIDTH) -> HexPlanes:
    return HexPlanes(np.zeros((6, resolution, resolution, channels)),
                     bbox=bbox, blend_width=blend_width)


@dataclass
class SampleCache:
    """Everything the plane-sampling backward pass needs to scatter gradients."""

    inside: np.ndarray      # (S,) bool
    corner_idx: np.ndarray  # (3, S, 4) flat texel index within one R*R plane
    corner_w: np.ndarray    # (3, S, 4) bilinear weights, zeroed outside bbox
    blend_w: np.ndarray     # (3, S) weight of the positive plane
    resolution: int
    channels: int


def sample_features(hexplanes: HexPlanes, points, with_cache: bool = False):
    """Featurize points (S, 3). Returns (S, C) or (features, SampleCache)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise DimensionError("sample points must be finite")
    S = pts.shape[0]
    R, C = hexplanes.resolution, hexplanes.channels
    lo, hi = hexplanes.bbox
    delta = hexplanes.blend_width
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)

    features = np.zeros((S, C))
    corner_idx = np.zeros((3, S, 4), dtype=np.int64)
    corner_w = np.zeros((3, S, 4))
    blend_w = np.zeros((3, S))
    scale = (R - 1) / (hi - lo)
    flat = hexplanes.planes.reshape(6, R * R, C)

    for axis in range(3):
        ua, va = _UV[axis]
        gu = np.clip((pts[:, ua] - lo) * scale, 0.0, R - 1.0)
        gv = np.clip((pts[:, va] - lo) * scale, 0.0, R - 1.0)
        i0 = np.minimum(np.floor(gu), R - 2).astype(np.int64)
        j0 = np.minimum(np.floor(gv), R - 2).astype(np.int64)
        fu = gu - i0
        fv = gv - j0
        w = np.stack([(1 - fu) * (1 - fv), (1 - fu) * fv, fu * (1 - fv), fu * fv], axis=1)
        w *= inside[:, None]
        idx = np.stack([i0 * R + j0, i0 * R + j0 + 1,
                        (i0 + 1) * R + j0, (i0 + 1) * R + j0 + 1], axis=1)
        wp = np.clip(0.5 + pts[:, axis] / (2.0 * delta), 0.0, 1.0)

        f_plus = np.einsum("sk,skc->sc", w, flat[2 * axis][idx], optimize=True)
        f_minus = np.einsum("sk,skc->sc", w, flat[2 * axis + 1][idx], optimize=True)
        features += wp[:, None] * f_plus + (1.0 - wp)[:, None] * f_minus

        corner_idx[axis] = idx
        corner_w[axis] = w
        blend_w[axis] = wp

    if not with_cache:
        return features
    cache = SampleCache(inside=inside, corner_idx=corner_idx, corner_w=corner_w,
                        blend_w=blend_w, resolution=R, channels=C)
    return features, cache


def scatter_feature_grad(cache: SampleCache, dfeatures) -> np.ndarray:
    """Backward of sample_features: route (S, C) feature grads onto (6, R, R, C) planes."""
    df = np.asarray(dfeatures, dtype=np.float64)
    S, C = df.shape
    R = cache.resolution
    plane_size = R * R
    out = np.zeros(6 * plane_size * C)
    ch = np.arange(C, dtype=np.int64)
    for axis in range(3):
        for sign, coef_w in ((0, cache.blend_w[axis]), (1, 1.0 - cache.blend_w[axis])):
            plane = 2 * axis + sign
            coef = coef_w[:, None] * cache.corner_w[axis]          # (S, 4)
            vals = coef[:, :, None] * df[:, None, :]               # (S, 4, C)
            flat_idx = (plane * plane_size + cache.corner_idx[axis])[:, :, None] * C + ch
            out += np.bincount(flat_idx.reshape(-1), weights=vals.reshape(-1),
                               minlength=out.size)
    return out.reshape(6, R, R, C)


@dataclass
class FieldDecoder:
    """Linear decode of plane features into density logit and color logits."""

    weight: np.ndarray  # (4, C)
    bias: np.ndarray    # (4,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or w.shape[0] != 4 or b.shape[0] != 4:
            raise DimensionError(f"decoder weight must be (4, C) with bias (4,), got {w.shape}")
        self.weight = w
        self.bias = b

    @property
    def channels(self):
        return self.weight.shape[1]


def canonical_decoder(channels: int) -> FieldDecoder:
    """Identity-like decoder: zero features give sigma = ln 2 and color 0.5."""
    w = np.zeros((4, channels))
    for i in range(min(4, channels)):
        w[i, i] = 1.0
    return FieldDecoder(weight=w, bias=np.zeros(4))


def init_decoder(channels: int, rng: np.random.Generator,
                 density_bias: float = config.DENSITY_BIAS,
                 weight_scale: float = 0.2) -> FieldDecoder:
    """Training init: small random weights, density biased far negative so the
    field starts empty everywhere the features are zero."""
    w = rng.normal(0.0, weight_scale, size=(4, channels))
    b = np.array([density_bias, 0.0, 0.0, 0.0])
    return FieldDecoder(weight=w, bias=b)


def softplus(x):
    return np.logaddexp(0.0, x)


def decode_features(decoder: FieldDecoder, features, with_logits: bool = False):
    """Map features (S, C) to (sigma (S,), color (S, 3))."""
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != decoder.channels:
        raise DimensionError(
            f"feature channels {f.shape[-1]} do not match decoder {decoder.channels}")
    z = f @ decoder.weight.T + decoder.bias
    sigma = softplus(z[..., 0])
    color = expit(z[..., 1:4])
    if with_logits:
        return sigma, color, z
    return sigma, color


class HexPlaneField:
    """A sampleable radiance field: hex planes plus a decoder."""

    def __init__(self, planes: HexPlanes, decoder: FieldDecoder):
        if planes.channels != decoder.channels:
            raise DimensionError("plane and decoder channel counts differ")
        self.planes = planes
        self.decoder = decoder

    def sample(self, points):
        features = sample_features(self.planes, points)
        return decode_features(self.decoder, features)


def composite_sigma_color(sigma_a, color_a, sigma_b, color_b):
    """Density-weighted mix of two fields at the same points.

    Total density is the sum; color is the density-weighted average, defined as
    black where the total density vanishes (the weight there is zero anyway).
    """
    total = sigma_a + sigma_b
    safe = np.where(total > 1e-12, total, 1.0)
    mixed = (sigma_a[..., None] * color_a + sigma_b[..., None] * color_b) / safe[..., None]
    mixed = np.where((total > 1e-12)[..., None], mixed, 0.0)
    return total, mixed


class CompositeField:
    """Head plus hair rendered as one emission-absorption medium."""

    def __init__(self, *fields):
        if not fields:
            raise DimensionError("composite needs at least one field")
        self.fields = fields

    def sample(self, points):
        sigma, color = self.fields[0].sample(points)
        for f in self.fields[1:]:
            s2, c2 = f.sample(points)
            sigma, color = composite_sigma_color(sigma, color, s2, c2)
        return sigma, color


def save_hexplanes(path, planes: HexPlanes, decoder: FieldDecoder):
    """Checkpoint: magic, u32 R and C, f32 plane stack (+x,-x,+y,-y,+z,-z), f32 decoder."""
    if planes.channels != decoder.channels:
        raise DimensionError("plane and decoder channel counts differ")
    with open(path, "wb") as fh:
        fh.write(HEX_MAGIC)
        fh.write(struct.pack("<2I", planes.resolution, planes.channels))
        fh.write(np.ascontiguousarray(planes.planes, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(decoder.weight, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(decoder.bias, dtype="<f4").tobytes())


def save_decoder(path, decoder: FieldDecoder):
    """Standalone decoder file: magic, u32 C, f32 weight then bias."""
    with open(path, "wb") as fh:
        fh.write(DEC_MAGIC)
        fh.write(struct.pack("<I", decoder.channels))
        fh.write(np.ascontiguousarray(decoder.weight, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(decoder.bias, dtype="<f4").tobytes())


def load_decoder(path) -> FieldDecoder:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != DEC_MAGIC:
        raise ParseError(f"{path}: not a decoder file")
    c = struct.unpack("<I", raw[8:12])[0]
    body = np.frombuffer(raw[12:], dtype="<f4")
    if body.size != 4 * c + 4:
        raise ParseError(f"{path}: payload size does not match header")
    return FieldDecoder(weight=body[:4 * c].astype(np.float64).reshape(4, c),
                        bias=body[4 * c:].astype(np.float64))


def load_hexplanes(path, bbox=(config.BBOX_LO, config.BBOX_HI),
                   blend_width: float = config.BLEND_WIDTH):
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != HEX_MAGIC:
        raise ParseError(f"{path}: not a hex-plane checkpoint")
    r, c = struct.unpack("<2I", raw[8:16])
    body = np.frombuffer(raw[16:], dtype="<f4")
    n_planes = 6 * r * r * c
    if body.size != n_planes + 4 * c + 4:
        raise ParseError(f"{path}: payload size does not match header")
    planes = body[:n_planes].astype(np.float64).reshape(6, r, r, c)
    weight = body[n_planes:n_planes + 4 * c].astype(np.float64).reshape(4, c)
    bias = body[n_planes + 4 * c:].astype(np.float64)
    return (HexPlanes(planes, bbox=bbox, blend_width=blend_width),
            FieldDecoder(weight=weight, bias=bias))
