"""Emission-absorption volume rendering with uniform midpoint quadrature.

Rays are sampled at segment midpoints between near and far. Opacity per
segment is alpha_i = 1 - exp(-sigma_i * delta); transmittance accumulates as a
running product, per-sample weights are w_i = T_i * alpha_i, and the residual
background transmittance is defined as T_bg = 1 - sum(w_i) so the energy
partition sum(w) + T_bg = 1 holds to rounding no matter how long the ray is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RenderConfig
from .errors import DimensionError
from .geometry import Camera, pixel_ray_grid


@dataclass
class QuadratureResult:
    rgb: np.ndarray        # (B, 3)
    alpha: np.ndarray      # (B,)
    weights: np.ndarray    # (B, n)
    trans: np.ndarray      # (B, n)  T_i entering segment i
    seg_alpha: np.ndarray  # (B, n)
    t_bg: np.ndarray       # (B,)


def segment_midpoints(cfg: RenderConfig, n_rays: int | None = None,
                      rng: np.random.Generator | None = None):
    """Midpoint (or jittered) sample depths and the uniform segment length."""
    n = cfg.samples_per_ray
    if n < 1:
        raise DimensionError("need at least one sample per ray")
    delta = (cfg.far - cfg.near) / n
    if cfg.jitter:
        if rng is None or n_rays is None:
            raise DimensionError("jittered sampling needs an rng and the ray count")
        offs = rng.uniform(size=(n_rays, n))
        t = cfg.near + (np.arange(n) + offs) * delta
    else:
        t = cfg.near + (np.arange(n) + 0.5) * delta
    return t, delta


def quadrature(sigma, color, delta: float, background) -> QuadratureResult:
    """Composite per-segment density/color along rays.

    sigma is (B, n) non-negative, color (B, n, 3), background (3,).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    if sigma.ndim != 2 or color.shape != sigma.shape + (3,):
        raise DimensionError("sigma must be (B, n) with color (B, n, 3)")
    tau = sigma * delta
    alpha = -np.expm1(-tau)
    keep = 1.0 - alpha
    prod = np.cumprod(keep, axis=1)
    trans = np.concatenate([np.ones((sigma.shape[0], 1)), prod[:, :-1]], axis=1)
    weights = trans * alpha
    wsum = weights.sum(axis=1)
    t_bg = np.maximum(0.0, 1.0 - wsum)
    rgb = np.einsum("bn,bnc->bc", weights, color, optimize=True) + t_bg[:, None] * bg
    return QuadratureResult(rgb=rgb, alpha=1.0 - t_bg, weights=weights,
                            trans=trans, seg_alpha=alpha, t_bg=t_bg)


def render_rays(field, origins, dirs, cfg: RenderConfig,
                rng: np.random.Generator | None = None):
    """Render a batch of rays through a sampleable field. Returns (rgb, alpha)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    if origins.shape != dirs.shape:
        raise DimensionError("origins and directions must match")
    B = origins.shape[0]
    t, delta = segment_midpoints(cfg, n_rays=B, rng=rng)
    if t.ndim == 1:
        pts = origins[:, None, :] + t[None, :, None] * dirs[:, None, :]
    else:
        pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    n = cfg.samples_per_ray
    sigma, color = field.sample(pts.reshape(-1, 3))
    res = quadrature(sigma.reshape(B, n), color.reshape(B, n, 3), delta, cfg.background)
    return res.rgb, res.alpha


def render_ray(field, ray, cfg: RenderConfig | None = None):
    """Single-ray convenience wrapper honoring the ray's own near/far."""
    cfg = cfg or RenderConfig()
    local = RenderConfig(samples_per_ray=cfg.samples_per_ray, near=ray.near,
                         far=ray.far, background=cfg.background,
                         jitter=cfg.jitter, seed=cfg.seed)
    rgb, alpha = render_rays(field, ray.origin[None], ray.direction[None], local)
    return rgb[0], alpha[0]


def render_image(field, camera: Camera, cfg: RenderConfig | None = None,
                 rows_per_chunk: int = 8):
    """Render a full frame. Returns (H, W, 3) rgb and (H, W) alpha."""
    cfg = cfg or RenderConfig()
    H, W = camera.height, camera.width
    origins, dirs = pixel_ray_grid(camera)
    rgb = np.empty((H * W, 3))
    alpha = np.empty(H * W)
    rng = np.random.default_rng(cfg.seed) if cfg.jitter else None
    step = max(1, rows_per_chunk) * W
    for start in range(0, H * W, step):
        sl = slice(start, min(start + step, H * W))
        rgb[sl], alpha[sl] = render_rays(field, origins[sl], dirs[sl], cfg, rng=rng)
    return rgb.reshape(H, W, 3), alpha.reshape(H, W)
