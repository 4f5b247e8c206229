"""Parametric full-head toolkit.

Bilinear mesh model over a registered corpus, dual hex-plane radiance fields
conditioned by rasterized per-vertex neural textures, an analytic-gradient
photometric optimizer, single-image fitting, a procedural stand-in dataset,
and a CLI plus HTTP service around all of it.
"""

__version__ = "0.1.0"
