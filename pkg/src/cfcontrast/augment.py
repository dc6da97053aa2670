"""Stochastic view-generation pipeline applied before the contrastive loss.

Every view is produced by one draw from an explicit numpy generator, so the
pipeline is a pure function of (image, policy, stream state) and trivially
parallelisable. Paired views must be given disjoint substreams; the
pretraining loop derives them per (seed, step, position, view) via
``Generator.spawn``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .synthdata import ConfigError

_BLUR_SIGMA_RANGE = (0.2, 1.0)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Strengths for the view pipeline: crop, flip, intensity jitter, blur.

    ``crop_scale_range`` is an area fraction interval; ``intensity_jitter``
    holds (max multiplicative gain delta, max additive offset delta). The
    zero-strength policy (crop range (1, 1), probabilities 0, deltas 0) is
    the identity when output_shape matches the input.
    """

    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    hflip_prob: float = 0.5
    intensity_jitter: tuple[float, float] = (0.2, 0.1)
    blur_prob: float = 0.1
    output_shape: tuple[int, int] = (32, 32)

    def __post_init__(self) -> None:
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        gain_delta, offset_delta = self.intensity_jitter
        if gain_delta < 0 or offset_delta < 0:
            raise ConfigError(f"intensity_jitter deltas must be >= 0, got {self.intensity_jitter}")
        if not 0.0 <= self.blur_prob <= 1.0:
            raise ConfigError(f"blur_prob must be in [0, 1], got {self.blur_prob}")

    def is_zero_strength(self) -> bool:
        return (
            self.crop_scale_range == (1.0, 1.0)
            and self.hflip_prob == 0.0
            and self.intensity_jitter == (0.0, 0.0)
            and self.blur_prob == 0.0
        )


def bilinear_resize(image: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Resize with bilinear interpolation (half-pixel centers, edge clamped)."""
    h, w = image.shape
    oh, ow = out_shape
    if (h, w) == (oh, ow):
        return image.copy()
    sy = h / oh
    sx = w / ow
    ys = np.clip((np.arange(oh, dtype=np.float32) + 0.5) * sy - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(ow, dtype=np.float32) + 0.5) * sx - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None]
    wx = (xs - x0).astype(np.float32)[None, :]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def sample_view(
    image: np.ndarray,
    policy: AugmentationPolicy,
    rng_stream: np.random.Generator,
) -> np.ndarray:
    """Draw one random view: resized crop, hflip, intensity jitter, blur.

    Deterministic given the stream state; output clamped to [0, 1] with
    shape ``policy.output_shape``. Identity-parameter steps are skipped so
    the zero-strength policy returns the input exactly.
    """
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("sample_view expects image values in [0, 1]")
    h, w = image.shape
    x = image

    lo, hi = policy.crop_scale_range
    if (lo, hi) == (1.0, 1.0):
        if (h, w) != tuple(policy.output_shape):
            x = bilinear_resize(x, policy.output_shape)
        else:
            x = x.copy()
    else:
        area = rng_stream.uniform(lo, hi)
        side = np.sqrt(area)
        ch = max(4, int(round(h * side)))
        cw = max(4, int(round(w * side)))
        top = int(rng_stream.integers(0, h - ch + 1))
        left = int(rng_stream.integers(0, w - cw + 1))
        x = bilinear_resize(x[top : top + ch, left : left + cw], policy.output_shape)

    if policy.hflip_prob > 0.0 and rng_stream.random() < policy.hflip_prob:
        x = x[:, ::-1]

    gain_delta, offset_delta = policy.intensity_jitter
    if gain_delta > 0.0 or offset_delta > 0.0:
        gain = np.float32(1.0 + rng_stream.uniform(-gain_delta, gain_delta))
        offset = np.float32(rng_stream.uniform(-offset_delta, offset_delta))
        x = (x - np.float32(0.5)) * gain + np.float32(0.5) + offset

    if policy.blur_prob > 0.0 and rng_stream.random() < policy.blur_prob:
        sigma = rng_stream.uniform(*_BLUR_SIGMA_RANGE)
        x = ndimage.gaussian_filter(np.ascontiguousarray(x), sigma=sigma, mode="nearest")

    return np.clip(x, 0.0, 1.0).astype(np.float32)


def sample_view_batch(
    images: np.ndarray,
    policy: AugmentationPolicy,
    streams: list[np.random.Generator],
) -> np.ndarray:
    """Augment a stack of images, one pre-derived stream per image."""
    if len(streams) != images.shape[0]:
        raise ValueError(f"need one stream per image, got {len(streams)} for {images.shape[0]}")
    out = np.empty((images.shape[0], *policy.output_shape), dtype=np.float32)
    for i in range(images.shape[0]):
        out[i] = sample_view(images[i], policy, streams[i])
    return out
