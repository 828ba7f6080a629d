"""Per-channel RGB histograms, 1-D transport distance, template selection.

Optical density uses base-10 logs with a +1 offset so a pixel value of 255
maps to OD -log10(256/256) = 0 and a value of 0 stays finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

_LEVELS = 256


class HistogramError(ValueError):
    """Histogram inputs violate a precondition."""


@dataclass
class ColorHistogram:
    """Per-channel tallies, shape (3, bins); normalized means each channel sums to 1."""

    values: np.ndarray
    normalized: bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != 3:
            raise HistogramError(f"histogram must be (3, bins), got {self.values.shape}")

    @property
    def bins(self) -> int:
        return self.values.shape[1]


def _check_rgb_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise HistogramError(f"expected uint8 image, got dtype {img.dtype}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise HistogramError(f"expected (h, w, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise HistogramError("empty image")
    return img


def compute_histogram(img: np.ndarray, bins: int = 256, normalized: bool = True) -> ColorHistogram:
    """Tally pixel values per channel into equal-width bins.

    ``bins`` must divide 256 evenly so that bin index is value // width.
    """
    img = _check_rgb_image(img)
    if bins < 2 or _LEVELS % bins != 0:
        raise HistogramError(f"bins must be >= 2 and divide {_LEVELS}, got {bins}")
    width = _LEVELS // bins
    binned = img // width
    values = np.empty((3, bins), dtype=np.float64)
    for c in range(3):
        values[c] = np.bincount(binned[:, :, c].reshape(-1), minlength=bins)
    if normalized:
        values /= img.shape[0] * img.shape[1]
    return ColorHistogram(values, normalized)


def mean_histogram(histograms: Sequence[ColorHistogram]) -> ColorHistogram:
    if not histograms:
        raise HistogramError("mean of zero histograms")
    bins = histograms[0].bins
    for h in histograms:
        if not h.normalized:
            raise HistogramError("mean_histogram needs normalized inputs")
        if h.bins != bins:
            raise HistogramError(f"bin count mismatch: {h.bins} vs {bins}")
    acc = np.zeros((3, bins), dtype=np.float64)
    for h in histograms:  # fixed order, so the float accumulation is reproducible
        acc += h.values
    return ColorHistogram(acc / len(histograms), True)


def wasserstein_1d(p: np.ndarray, q: np.ndarray) -> float:
    """Transport distance between two distributions on {0..B-1} with unit spacing.

    Equals the L1 distance between the CDFs, which is exact for 1-D
    distributions with this ground metric.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.ndim != 1 or q.ndim != 1 or p.shape != q.shape:
        raise HistogramError(f"distributions must be equal-length vectors, got {p.shape} vs {q.shape}")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise HistogramError("wasserstein_1d needs distributions normalized to sum 1")
    if (p < 0).any() or (q < 0).any():
        raise HistogramError("negative mass in distribution")
    return float(np.abs(np.cumsum(p - q)).sum())


def histogram_distance(a: ColorHistogram, b: ColorHistogram) -> float:
    """Sum of per-channel 1-D transport distances."""
    if not (a.normalized and b.normalized):
        raise HistogramError("histogram_distance needs normalized histograms")
    if a.bins != b.bins:
        raise HistogramError(f"bin count mismatch: {a.bins} vs {b.bins}")
    return float(sum(wasserstein_1d(a.values[c], b.values[c]) for c in range(3)))


def select_template(images: Sequence[np.ndarray], bins: int = 256) -> int:
    """Index of the image whose histogram sits closest to the dataset mean.

    Ties break toward the lowest index.
    """
    if not images:
        raise HistogramError("select_template needs at least one image")
    hists = [compute_histogram(img, bins=bins) for img in images]
    center = mean_histogram(hists)
    best_idx = 0
    best_dist = histogram_distance(center, hists[0])
    for i in range(1, len(hists)):
        d = histogram_distance(center, hists[i])
        if d < best_dist:
            best_idx, best_dist = i, d
    return best_idx


def save_histogram(hist: ColorHistogram, path: str | Path) -> None:
    """Write one whitespace-separated line per channel."""
    with open(path, "w") as fp:
        for c in range(3):
            fp.write(" ".join(repr(float(v)) for v in hist.values[c]) + "\n")


def load_histogram(path: str | Path, normalized: bool = True) -> ColorHistogram:
    rows = []
    with open(path) as fp:
        for line in fp:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split()])
    if len(rows) != 3:
        raise HistogramError(f"expected 3 channel rows, got {len(rows)}")
    return ColorHistogram(np.asarray(rows, dtype=np.float64), normalized)


# --- optical density -------------------------------------------------------


def rgb_to_od(img: np.ndarray) -> np.ndarray:
    """Map uint8 RGB to optical density: -log10((v + 1) / 256), float32 >= 0."""
    img = _check_rgb_image(img)
    return (-np.log10((img.astype(np.float64) + 1.0) / _LEVELS)).astype(np.float32)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    """Invert rgb_to_od, rounding to the nearest representable level."""
    od = np.asarray(od, dtype=np.float64)
    if od.ndim != 3 or od.shape[2] != 3:
        raise HistogramError(f"expected (h, w, 3) OD array, got shape {od.shape}")
    if (od < 0).any():
        raise HistogramError("optical density must be non-negative")
    v = _LEVELS * np.power(10.0, -od) - 1.0
    return np.clip(np.rint(v), 0, 255).astype(np.uint8)
