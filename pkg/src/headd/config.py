"""Shared defaults for fields, rendering, and the camera rig.

Values chosen so a unit-scale head (max radius ~0.6) orbited at radius 2.7
with a 30 degree vertical FOV fills the frame without clipping.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

# Field / scene box. All geometry lives inside this cube.
BBOX_LO = -1.0
BBOX_HI = 1.0

# Hex-plane defaults.
PLANE_RESOLUTION = 128
FEATURE_CHANNELS = 8
BLEND_WIDTH = 0.1
DENSITY_BIAS = -10.0

# Rendering defaults.
SAMPLES_PER_RAY = 96
NEAR = 1.2
FAR = 4.2
BACKGROUND = (1.0, 1.0, 1.0)

# Rig defaults.
FOV_DEG = 30.0
RIG_RADIUS = 2.7
YAW_COUNT = 24
PITCH_ANGLES = (-15.0, 0.0, 15.0)

# Optimizer defaults. lambda_density is uncalibrated; treat as order of magnitude.
LEARNING_RATE = 0.0025
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LAMBDA_DENSITY = 0.25


@dataclass
class RenderConfig:
    """Quadrature and framing parameters for volume rendering."""

    samples_per_ray: int = SAMPLES_PER_RAY
    near: float = NEAR
    far: float = FAR
    background: tuple = BACKGROUND
    jitter: bool = False
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "background" in known:
            known["background"] = tuple(known["background"])
        return cls(**known)
