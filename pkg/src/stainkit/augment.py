"""Tile augmentations for contrastive training.

Color-preserving transforms rearrange pixels without touching their values
(flips, right-angle rotations, crop-and-resize with nearest-neighbor
sampling). Structure-preserving transforms jitter each channel with an
affine map while leaving the geometry alone.
"""

from __future__ import annotations

import numpy as np

CONTRAST_RANGE = (0.7, 1.3)
BRIGHTNESS_RANGE = (-0.15, 0.15)
MIN_CROP_FRACTION = 0.75


def _check_tile(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected uint8 (h, w, 3) tile, got {img.dtype} {img.shape}")
    return img


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.int64)
    return img[rows][:, cols]


def apply_color_preserving(img: np.ndarray, flip_h: bool, flip_v: bool, rot_quarters: int,
                           crop: tuple[int, int, int, int] | None) -> np.ndarray:
    """Deterministic application with explicit parameters; exposed for tests."""
    img = _check_tile(img)
    h, w = img.shape[:2]
    out = img
    if flip_h:
        out = out[:, ::-1]
    if flip_v:
        out = out[::-1]
    out = np.rot90(out, k=rot_quarters % 4)
    if crop is not None:
        top, left, ch, cw = crop
        if ch < 1 or cw < 1 or top < 0 or left < 0 or top + ch > out.shape[0] or left + cw > out.shape[1]:
            raise ValueError(f"crop {crop} outside {out.shape[:2]}")
        out = resize_nearest(out[top:top + ch, left:left + cw], h, w)
    return np.ascontiguousarray(out)


def augment_color_preserving(img: np.ndarray, seed: int) -> np.ndarray:
    """Random flip / rotation / crop-resize; the pixel-value set is unchanged
    (nearest-neighbor resampling never invents colors)."""
    img = _check_tile(img)
    rng = np.random.default_rng(seed)
    h, w = img.shape[:2]
    flip_h = bool(rng.integers(0, 2))
    flip_v = bool(rng.integers(0, 2))
    rot = int(rng.integers(0, 4))
    frac = rng.uniform(MIN_CROP_FRACTION, 1.0)
    ch = max(1, int(round(h * frac)))
    cw = max(1, int(round(w * frac)))
    # rot90 may swap extents; draw offsets against the post-rotation shape
    rh, rw = (w, h) if rot % 2 else (h, w)
    ch, cw = min(ch, rh), min(cw, rw)
    top = int(rng.integers(0, rh - ch + 1))
    left = int(rng.integers(0, rw - cw + 1))
    return apply_color_preserving(img, flip_h, flip_v, rot, (top, left, ch, cw))


def apply_channel_affine(img: np.ndarray, gains: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Per-channel v01 * gain + offset on the unit scale, clipped to [0, 1]."""
    img = _check_tile(img)
    v = img.astype(np.float64) / 255.0
    v = v * np.asarray(gains).reshape(1, 1, 3) + np.asarray(offsets).reshape(1, 1, 3)
    return np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)


def augment_structure_preserving(img: np.ndarray, seed: int) -> np.ndarray:
    """Random per-channel contrast/brightness jitter; geometry untouched."""
    rng = np.random.default_rng(seed)
    gains = rng.uniform(*CONTRAST_RANGE, size=3)
    offsets = rng.uniform(*BRIGHTNESS_RANGE, size=3)
    return apply_channel_affine(img, gains, offsets)
