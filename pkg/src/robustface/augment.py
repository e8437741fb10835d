"""Stochastic view sampling: random crop-resize, brightness/contrast jitter, Gaussian blur.

All functions take and return float32 images of shape [H x W x C] in [0, 1]
and draw randomness only from the generator passed in.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_min: float = 0.7
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2
    blur_sigma_max: float = 1.0
    blur_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.crop_scale_min <= 1:
            raise ConfigError("/crop_scale_min", "must lie in (0, 1]")
        for name in ("jitter_brightness", "jitter_contrast", "blur_sigma_max"):
            if getattr(self, name) < 0:
                raise ConfigError(f"/{name}", "must be >= 0")
        if not 0 <= self.blur_probability <= 1:
            raise ConfigError("/blur_probability", "must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


IDENTITY = AugmentConfig(1.0, 0.0, 0.0, 0.0, 0.0)


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3:
        raise ValueError(f"expected an [H x W x C] image, got shape {img.shape}")
    return img


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize; output stays inside the input's value range."""
    h, w = img.shape[:2]

    def axis_weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(np.float32)

    r0, r1, fr = axis_weights(h, height)
    c0, c1, fc = axis_weights(w, width)
    # v0 + f*(v1 - v0) keeps constants exact
    rows = img[r0] + fr[:, None, None] * (img[r1] - img[r0])
    out = rows[:, c0] + fc[None, :, None] * (rows[:, c1] - rows[:, c0])
    return np.clip(out, img.min(), img.max()).astype(np.float32)


def random_crop_resize(img, rng: np.random.Generator, crop_scale_min: float = 0.7) -> np.ndarray:
    img = _check_image(img)
    h, w = img.shape[:2]
    if h < 2 or w < 2:
        raise ValueError(f"image must be at least 2x2, got {h}x{w}")
    short = min(h, w)
    side = int(rng.integers(max(1, math.ceil(crop_scale_min * short)), short + 1))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    crop = img[top:top + side, left:left + side]
    if crop.shape[:2] == (h, w):
        return crop.copy()
    return resize_bilinear(crop, h, w)


def color_jitter(img, rng: np.random.Generator, brightness: float = 0.2, contrast: float = 0.2) -> np.ndarray:
    """``clamp(c*(img - mean) + mean + b, 0, 1)`` with b ~ U(-brightness, brightness), c ~ U(1-contrast, 1+contrast)."""
    img = _check_image(img)
    b = np.float32(rng.uniform(-brightness, brightness))
    c = np.float32(rng.uniform(1 - contrast, 1 + contrast))
    mu = img.mean(axis=(0, 1), keepdims=True)
    # written as img + (c-1)(img-mean) + b so c=1, b=0 is an exact identity
    return np.clip(img + (c - 1) * (img - mu) + b, 0, 1).astype(np.float32)


def gaussian_kernel(sigma: float) -> np.ndarray:
    size = math.ceil(6 * sigma)
    if size % 2 == 0:
        size += 1
    r = size // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    return (k / k.sum()).astype(np.float32)


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with half-sample symmetric padding (preserves the image mean)."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    if r == 0:
        return img.copy()
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            acc += kv * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return np.clip(out, 0, 1).astype(np.float32)


def gaussian_blur(img, rng: np.random.Generator, sigma_max: float = 1.0, probability: float = 0.5) -> np.ndarray:
    img = _check_image(img)
    if rng.uniform() >= probability:
        return img.copy()
    sigma = float(rng.uniform(0.1, max(0.1, sigma_max)))
    return blur(img, sigma)


def sample_view(img, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Crop-resize, then colour jitter, then blur."""
    out = random_crop_resize(img, rng, config.crop_scale_min)
    out = color_jitter(out, rng, config.jitter_brightness, config.jitter_contrast)
    return gaussian_blur(out, rng, config.blur_sigma_max, config.blur_probability)
