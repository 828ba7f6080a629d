"""Full-reference image quality metrics: SSIM, MS-SSIM, UQI.

All three run on the luminance plane (ITU-R BT.601 weights) of uint8 RGB
or grayscale inputs, with statistics computed in float64 over valid-mode
sliding windows.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 255.0
UQI_WINDOW = 8
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_LUMA = np.array([0.299, 0.587, 0.114])


class MetricError(ValueError):
    """Metric inputs violate a precondition."""


def _luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise MetricError(f"expected uint8 image, got dtype {img.dtype}")
    if img.ndim == 2:
        return img.astype(np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img.astype(np.float64) @ _LUMA
    raise MetricError(f"expected (h, w) or (h, w, 3) image, got shape {img.shape}")


def _check_pair(a: np.ndarray, b: np.ndarray, min_dim: int):
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < min_dim:
        raise MetricError(f"image min dimension {min(a.shape[:2])} below window size {min_dim}")


def _gaussian_window(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a symmetric 1-D kernel."""
    tmp = sliding_window_view(img, len(k1d), axis=0) @ k1d
    return sliding_window_view(tmp, len(k1d), axis=1) @ k1d


def _ssim_maps(x: np.ndarray, y: np.ndarray, k1d: np.ndarray):
    """Per-window luminance and contrast-structure terms."""
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2
    mu_x = _filter_valid(x, k1d)
    mu_y = _filter_valid(y, k1d)
    var_x = _filter_valid(x * x, k1d) - mu_x * mu_x
    var_y = _filter_valid(y * y, k1d) - mu_y * mu_y
    cov = _filter_valid(x * y, k1d) - mu_x * mu_y
    lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2.0 * cov + c2) / (var_x + var_y + c2)
    return lum, cs


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity with an 11-tap Gaussian window."""
    x = _luminance(a)
    y = _luminance(b)
    _check_pair(x, y, SSIM_WINDOW)
    lum, cs = _ssim_maps(x, y, _gaussian_window())
    return float((lum * cs).mean())


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    v = img[:h, :w]
    return (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2]) / 4.0


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale SSIM over up to 5 dyadic scales.

    Contrast-structure terms (clamped at zero) enter at every scale; the
    luminance term only at the coarsest. When the image is too small for
    5 scales the count is reduced and the weights renormalized, which is
    logged as a warning since values across different scale counts are not
    strictly comparable.
    """
    x = _luminance(a)
    y = _luminance(b)
    _check_pair(x, y, SSIM_WINDOW)
    min_dim = min(x.shape)
    scales = len(MS_SSIM_WEIGHTS)
    while scales > 1 and min_dim < SSIM_WINDOW * 2 ** (scales - 1):
        scales -= 1
    if scales < len(MS_SSIM_WEIGHTS):
        logger.warning("ms_ssim reduced to %d scales for %dx%d input; "
                       "weights renormalized", scales, x.shape[0], x.shape[1])
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales], dtype=np.float64)
    weights = weights / weights.sum()
    k1d = _gaussian_window()
    value = 1.0
    for level in range(scales):
        lum, cs = _ssim_maps(x, y, k1d)
        cs_mean = max(float(cs.mean()), 0.0)
        if level == scales - 1:
            lum_mean = max(float(lum.mean()), 0.0)
            value *= (lum_mean * cs_mean) ** weights[level]
        else:
            value *= cs_mean ** weights[level]
            x = _downsample2(x)
            y = _downsample2(y)
    return float(value)


def uqi(a: np.ndarray, b: np.ndarray) -> float:
    """Universal quality index: SSIM with both stabilizers at zero, 8x8 uniform window.

    Windows where a factor's denominator vanishes are skipped and counted;
    an all-degenerate pair raises MetricError.
    """
    x = _luminance(a)
    y = _luminance(b)
    _check_pair(x, y, UQI_WINDOW)
    k1d = np.full(UQI_WINDOW, 1.0 / UQI_WINDOW)
    mu_x = _filter_valid(x, k1d)
    mu_y = _filter_valid(y, k1d)
    var_x = _filter_valid(x * x, k1d) - mu_x * mu_x
    var_y = _filter_valid(y * y, k1d) - mu_y * mu_y
    cov = _filter_valid(x * y, k1d) - mu_x * mu_y
    denom_s = var_x + var_y
    denom_m = mu_x * mu_x + mu_y * mu_y
    # 1e-8 sits far below the variance quantum of uint8 data but above
    # the cancellation dust of the moment subtraction
    valid = (denom_s > 1e-8) & (denom_m > 1e-8)
    skipped = int(valid.size - valid.sum())
    if skipped:
        logger.warning("uqi skipped %d degenerate windows of %d", skipped, valid.size)
    if not valid.any():
        raise MetricError("all windows degenerate (constant inputs); UQI undefined")
    q = (2.0 * cov[valid] / denom_s[valid]) * (2.0 * mu_x[valid] * mu_y[valid] / denom_m[valid])
    return float(q.mean())


# --- reporting ---------------------------------------------------------------

_METRIC_FUNCS = {"ssim": ssim, "ms_ssim": ms_ssim, "uqi": uqi}


@dataclass
class MetricReport:
    """Per-image metric rows plus their means."""

    names: tuple[str, ...] = ("ssim", "ms_ssim", "uqi")
    rows: list[dict] = field(default_factory=list)

    def add(self, image_id: str, a: np.ndarray, b: np.ndarray):
        row = {"image": image_id}
        for name in self.names:
            row[name] = _METRIC_FUNCS[name](a, b)
        self.rows.append(row)

    def means(self) -> dict[str, float]:
        if not self.rows:
            raise MetricError("no rows to average")
        return {name: float(np.mean([r[name] for r in self.rows])) for name in self.names}

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(["image", *self.names])
            for row in self.rows:
                writer.writerow([row["image"], *(repr(row[n]) for n in self.names)])
            if self.rows:
                means = self.means()
                writer.writerow(["mean", *(repr(means[n]) for n in self.names)])
