"""Paired image/mask augmentations.

All transforms are pure functions of their arguments; the composer draws
parameters from an explicit rng, one derived stream per sample. Geometric
transforms use bilinear interpolation for images, nearest for masks, and
constant-zero fill. Pixel-denominated elastic parameters are interpreted at
the 400px reference resolution and scaled to the working size, matching how
the morphology radius is scaled.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from segxplain.imageops import sample_bilinear, sample_nearest

REFERENCE_SIZE = 400


@dataclass
class PairedSample:
    image: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise ValueError(f"mask shape {self.mask.shape} != image shape "
                             f"{self.image.shape}")


@dataclass
class AugmentationConfig:
    flip_probability: float = 0.5
    shift_scale_rotate_probability: float = 0.5
    elastic_probability: float = 0.5
    brightness_probability: float = 0.5
    contrast_probability: float = 0.5
    gamma_probability: float = 0.5
    shift_limit: float = 0.0625
    scale_limit: float = 0.1
    rotate_limit: float = 45.0
    elastic_alpha: float = 1.0
    elastic_sigma: float = 50.0
    elastic_alpha_affine: float = 50.0
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    gamma_range: tuple = (80.0, 120.0)

    def __post_init__(self):
        for name in ("flip", "shift_scale_rotate", "elastic", "brightness",
                     "contrast", "gamma"):
            p = getattr(self, f"{name}_probability")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}_probability must be in [0,1], got {p}")
        for name in ("shift_limit", "scale_limit", "rotate_limit",
                     "elastic_alpha", "elastic_sigma", "elastic_alpha_affine",
                     "brightness_limit", "contrast_limit"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        lo, hi = self.gamma_range
        if lo <= 0 or hi <= 0:
            raise ValueError("gamma_range must be positive")

    @classmethod
    def segmentation(cls, **overrides):
        return cls(shift_limit=0.0625, scale_limit=0.1, rotate_limit=45,
                   elastic_alpha=1, elastic_sigma=50, elastic_alpha_affine=50,
                   **overrides)

    @classmethod
    def classification(cls, **overrides):
        return cls(shift_limit=0.05, scale_limit=0.05, rotate_limit=15,
                   elastic_alpha=1, elastic_sigma=20, elastic_alpha_affine=20,
                   **overrides)

    @classmethod
    def disabled(cls):
        return cls(flip_probability=0, shift_scale_rotate_probability=0,
                   elastic_probability=0, brightness_probability=0,
                   contrast_probability=0, gamma_probability=0)


def horizontal_flip(sample: PairedSample) -> PairedSample:
    mask = None if sample.mask is None else sample.mask[:, ::-1].copy()
    return PairedSample(sample.image[:, ::-1].copy(), mask)


def _warp(sample, ys, xs):
    image = sample_bilinear(sample.image, ys, xs, fill=0.0)
    mask = None
    if sample.mask is not None:
        mask = sample_nearest(sample.mask, ys, xs, fill=0)
    return PairedSample(image, mask)


def shift_scale_rotate(sample: PairedSample, shift: float, scale: float,
                       angle: float) -> PairedSample:
    """Affine map about the image center: translate by ``shift`` (fraction of
    each dimension), scale by the multiplier ``scale``, rotate by ``angle``
    degrees. Out-of-frame pixels are zero-filled."""
    h, w = sample.image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    out_y, out_x = np.mgrid[0:h, 0:w].astype(np.float64)
    # invert: undo shift, then rotation, then scale
    dy = out_y - cy - shift * h
    dx = out_x - cx - shift * w
    src_y = (sin_t * dx + cos_t * dy) / scale + cy
    src_x = (cos_t * dx - sin_t * dy) / scale + cx
    return _warp(sample, src_y, src_x)


def elastic_transform(sample: PairedSample, alpha: float, sigma: float,
                      alpha_affine: float, rng) -> PairedSample:
    """Random affine jitter (corner points moved by up to ``alpha_affine``
    pixels) composed with a Gaussian-smoothed displacement field."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = sample.image.shape
    cy, cx = h // 2, w // 2
    third = min(h, w) // 3
    src_pts = np.float64([[cx + third, cy + third],
                          [cx + third, cy - third],
                          [cx - third, cy - third]])
    dst_pts = src_pts + rng.uniform(-alpha_affine, alpha_affine,
                                    size=src_pts.shape)
    # affine taking dst->src so output pixels sample from the source frame
    A = np.column_stack([dst_pts, np.ones(3)])
    coeffs = np.linalg.solve(A, src_pts)  # (3,2): columns are x, y maps
    field_y = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    field_x = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    out_y, out_x = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = (out_x * coeffs[0, 0] + out_y * coeffs[1, 0] + coeffs[2, 0])
    src_y = (out_x * coeffs[0, 1] + out_y * coeffs[1, 1] + coeffs[2, 1])
    return _warp(sample, src_y + field_y, src_x + field_x)


def photometric(image: np.ndarray, brightness_delta: float,
                contrast_delta: float, gamma: float) -> np.ndarray:
    """Brightness is additive, contrast multiplies about the mean, gamma
    exponentiates; output clamped to [0,1]. Masks are never touched."""
    out = image + brightness_delta
    mean = out.mean()
    out = (out - mean) * (1.0 + contrast_delta) + mean
    out = np.clip(out, 0.0, 1.0) ** gamma
    return np.clip(out, 0.0, 1.0)


def scaled_elastic_params(config: AugmentationConfig, size: int):
    """Elastic parameters scaled from the 400px reference to ``size``."""
    f = size / REFERENCE_SIZE
    return (config.elastic_alpha * f,
            max(config.elastic_sigma * f, 1e-6),
            config.elastic_alpha_affine * f)


def draw_plan(config: AugmentationConfig, rng, size: int):
    """Sample which transforms fire and with what parameters.

    Applied in the fixed order: flip, shift/scale/rotate, elastic,
    brightness, contrast, gamma.
    """
    plan = []
    if rng.random() < config.flip_probability:
        plan.append(("flip", ()))
    if rng.random() < config.shift_scale_rotate_probability:
        shift = rng.uniform(-config.shift_limit, config.shift_limit)
        scale = 1.0 + rng.uniform(-config.scale_limit, config.scale_limit)
        angle = rng.uniform(-config.rotate_limit, config.rotate_limit)
        plan.append(("shift_scale_rotate", (shift, scale, angle)))
    if rng.random() < config.elastic_probability:
        plan.append(("elastic", scaled_elastic_params(config, size)))
    if rng.random() < config.brightness_probability:
        plan.append(("brightness",
                     (rng.uniform(-config.brightness_limit,
                                  config.brightness_limit),)))
    if rng.random() < config.contrast_probability:
        plan.append(("contrast",
                     (rng.uniform(-config.contrast_limit,
                                  config.contrast_limit),)))
    if rng.random() < config.gamma_probability:
        lo, hi = config.gamma_range
        plan.append(("gamma", (rng.uniform(lo, hi) / 100.0,)))
    return plan


def augment(sample: PairedSample, config: AugmentationConfig,
            rng) -> PairedSample:
    plan = draw_plan(config, rng, sample.image.shape[0])
    out = sample
    for name, params in plan:
        if name == "flip":
            out = horizontal_flip(out)
        elif name == "shift_scale_rotate":
            out = shift_scale_rotate(out, *params)
        elif name == "elastic":
            out = elastic_transform(out, *params, rng)
        elif name == "brightness":
            out = PairedSample(photometric(out.image, params[0], 0.0, 1.0),
                               out.mask)
        elif name == "contrast":
            out = PairedSample(photometric(out.image, 0.0, params[0], 1.0),
                               out.mask)
        elif name == "gamma":
            out = PairedSample(photometric(out.image, 0.0, 0.0, params[0]),
                               out.mask)
    return out
