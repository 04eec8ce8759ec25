"""Stochastic image augmentation and the two training views.

Images are (H, W, 3) float64 arrays with values in [0, 1]. All operations
preserve shape and range, take an explicit numpy Generator, and are
deterministic given (image, config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])  # ITU-R BT.601 luminance

VIEW_MODES = ("gray", "jitter", "plain")


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    crop_pad: int = 2
    erase_prob: float = 0.5
    erase_area_range: tuple[float, float] = (0.1, 0.3)
    jitter_strength: float = 0.4

    def validate(self, height: int, width: int) -> None:
        for name in ("flip_prob", "erase_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.crop_pad >= min(height, width):
            raise ValueError(
                f"crop_pad {self.crop_pad} must be smaller than min(H, W) = {min(height, width)}"
            )
        lo, hi = self.erase_area_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"erase_area_range must satisfy 0 < lo <= hi < 1, got {lo}, {hi}")


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def pad_crop(img: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by `pad` on every side, then crop back to the original size."""
    if pad == 0:
        return img.copy()
    h, w, _ = img.shape
    padded = np.zeros((h + 2 * pad, w + 2 * pad, 3))
    padded[pad : pad + h, pad : pad + w] = img
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    return padded[top : top + h, left : left + w].copy()


def random_erase(
    img: np.ndarray, area_range: tuple[float, float], rng: np.random.Generator
) -> np.ndarray:
    """Overwrite one axis-aligned rectangle with uniform noise.

    The rectangle's area fraction is guaranteed to fall inside
    ``area_range``: the height is drawn first, then a width range compatible
    with the fraction bounds is derived from it (resampling the height when
    the range is empty).
    """
    h, w, _ = img.shape
    lo, hi = area_range
    total = h * w
    out = img.copy()
    for _ in range(100):
        eh = int(rng.integers(1, h + 1))
        w_min = int(np.ceil(lo * total / eh))
        w_max = min(w, int(np.floor(hi * total / eh)))
        if w_min > w_max or eh * w_min > hi * total:
            continue
        ew = int(rng.integers(w_min, w_max + 1))
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        out[top : top + eh, left : left + ew] = rng.random((eh, ew, 3))
        return out
    return out


def apply_basic(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Flip, pad-and-crop, then erase, each with its configured probability."""
    h, w, _ = img.shape
    cfg.validate(h, w)
    out = img
    if rng.random() < cfg.flip_prob:
        out = horizontal_flip(out)
    out = pad_crop(out, cfg.crop_pad, rng)
    if rng.random() < cfg.erase_prob:
        out = random_erase(out, cfg.erase_area_range, rng)
    return out


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luminance replicated into all 3 channels.

    Already-gray inputs are returned unchanged, which makes the transform
    exactly idempotent (the weights do not sum to 1.0 in float64).
    """
    if np.array_equal(img[..., 0], img[..., 1]) and np.array_equal(img[..., 1], img[..., 2]):
        return img.copy()
    y = img @ GRAY_WEIGHTS
    return np.repeat(y[..., None], 3, axis=2)


def color_jitter(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Per-channel affine perturbation: gain in 1 +/- strength, shift in +/- strength."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"jitter strength must be in [0, 1], got {strength}")
    gain = 1.0 + rng.uniform(-strength, strength, size=3)
    shift = rng.uniform(-strength, strength, size=3)
    return np.clip(img * gain + shift, 0.0, 1.0)


def make_views(
    img: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    mode: str = "gray",
) -> tuple[np.ndarray, np.ndarray]:
    """Build the two training views with independent random draws.

    The first view is the basic augmentation. The second applies an
    independently drawn basic augmentation followed by the configured
    color transform: grayscale (default), color jitter, or nothing.
    """
    if mode not in VIEW_MODES:
        raise ValueError(f"unknown view mode {mode!r}; expected one of {VIEW_MODES}")
    first = apply_basic(img, cfg, rng)
    second = apply_basic(img, cfg, rng)
    if mode == "gray":
        second = to_grayscale(second)
    elif mode == "jitter":
        second = color_jitter(second, cfg.jitter_strength, rng)
    return first, second


def second_view_base(img: np.ndarray, mode: str) -> np.ndarray:
    """Deterministic part of the second view (used for bank initialization)."""
    if mode == "gray":
        return to_grayscale(img)
    return img.copy()
