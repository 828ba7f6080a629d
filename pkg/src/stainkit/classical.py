"""Classical stain normalization: Reinhard, Macenko, and Vahadane.

All three re-render a source tile to match a template's color character.
Reinhard works in LAB statistics; the other two estimate a two-column
stain matrix in optical density, express each pixel as non-negative stain
concentrations, and recombine with the template's stains.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .colorstats import od_to_rgb, rgb_to_od

logger = logging.getLogger(__name__)

OD_TRANSPARENCY_THRESHOLD = 0.15
ANGLE_PERCENTILE = 1.0
SPARSITY_WEIGHT = 0.1
DICTIONARY_MAX_ITER = 50

# Standard hematoxylin/eosin OD directions, used only as a fallback
# dictionary seed when the data-driven initializer degenerates.
_FALLBACK_HE = np.array(
    [[0.650, 0.072],
     [0.704, 0.990],
     [0.286, 0.105]], dtype=np.float64)


class InsufficientTissueError(ValueError):
    """Too few pixels above the transparency threshold to estimate stains."""


class DegenerateStainsError(ValueError):
    """Stain directions too close to parallel to separate concentrations."""


@dataclass
class StainMatrix:
    """Two unit-norm, non-negative OD color directions as columns of (3, 2).

    Columns are ordered hematoxylin-like first: larger blue-channel component
    in column 0. The constructor canonicalizes near-misses (tiny negative
    components, slightly off-unit norms, swapped order) and rejects anything
    worse.
    """

    columns: np.ndarray

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=np.float64).copy()
        if cols.shape != (3, 2):
            raise ValueError(f"stain matrix must be (3, 2), got {cols.shape}")
        if (cols < -1e-6).any():
            raise ValueError("stain columns must be non-negative")
        cols[cols < 0] = 0.0
        norms = np.linalg.norm(cols, axis=0)
        if (norms < 1e-8).any():
            raise ValueError("stain column has zero norm")
        cols /= norms
        if cols[2, 0] < cols[2, 1]:
            cols = cols[:, ::-1]
        self.columns = cols

    def angle_degrees(self) -> float:
        cosang = float(np.clip(self.columns[:, 0] @ self.columns[:, 1], -1.0, 1.0))
        return float(np.degrees(np.arccos(cosang)))


def save_stain_matrix(sm: StainMatrix, path: str | Path) -> None:
    with open(path, "w") as fp:
        for row in sm.columns:
            fp.write(f"{float(row[0])!r} {float(row[1])!r}\n")


def load_stain_matrix(path: str | Path) -> StainMatrix:
    rows = []
    with open(path) as fp:
        for line in fp:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split()])
    return StainMatrix(np.asarray(rows, dtype=np.float64))


# --- LAB conversions (sRGB, D65 white) -------------------------------------

_RGB_TO_XYZ = np.array(
    [[0.4124564, 0.3575761, 0.1804375],
     [0.2126729, 0.7151522, 0.0721750],
     [0.0193339, 0.1191920, 0.9503041]])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE = np.array([0.95047, 1.0, 1.08883])
_LAB_DELTA = 6.0 / 29.0


def _srgb_linearize(c):
    return np.where(c > 0.04045, ((c + 0.055) / 1.055) ** 2.4, c / 12.92)


def _srgb_delinearize(c):
    return np.where(c > 0.0031308, 1.055 * np.maximum(c, 0.0) ** (1.0 / 2.4) - 0.055, 12.92 * c)


def _lab_f(t):
    return np.where(t > _LAB_DELTA ** 3, np.cbrt(t), t / (3 * _LAB_DELTA ** 2) + 4.0 / 29.0)


def _lab_f_inv(t):
    return np.where(t > _LAB_DELTA, t ** 3, 3 * _LAB_DELTA ** 2 * (t - 4.0 / 29.0))


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """uint8 sRGB image to CIELAB, float64 (h, w, 3)."""
    rgb = _srgb_linearize(np.asarray(img, dtype=np.float64) / 255.0)
    xyz = rgb @ _RGB_TO_XYZ.T / _WHITE
    f = _lab_f(xyz)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    f = np.stack([fy + lab[..., 1] / 500.0, fy, fy - lab[..., 2] / 200.0], axis=-1)
    xyz = _lab_f_inv(f) * _WHITE
    rgb = _srgb_delinearize(xyz @ _XYZ_TO_RGB.T)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


@dataclass
class LabStats:
    """Per-channel LAB mean and standard deviation of one image."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        # floor keeps downstream scale factors finite
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(3), 1e-6)


def compute_lab_stats(img: np.ndarray) -> LabStats:
    lab = rgb_to_lab(img)
    return LabStats(lab.reshape(-1, 3).mean(axis=0), lab.reshape(-1, 3).std(axis=0))


def reinhard_normalize(src: np.ndarray, target: LabStats) -> np.ndarray:
    """Shift and scale each LAB channel of ``src`` to the target statistics."""
    lab = rgb_to_lab(src)
    flat = lab.reshape(-1, 3)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    scale = np.ones(3)
    for c in range(3):
        if std[c] < 1e-6:
            warnings.warn(f"zero-variance LAB channel {c} in source; leaving its spread unchanged")
        else:
            scale[c] = target.std[c] / std[c]
    out = (flat - mean) * scale + target.mean
    return lab_to_rgb(out.reshape(lab.shape))


# --- stain separation -------------------------------------------------------


def _tissue_od_pixels(od: np.ndarray, threshold: float) -> np.ndarray:
    """Pixels whose every OD channel clears the transparency threshold."""
    px = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    return px[(px >= threshold).all(axis=1)]


def _finish_columns(v1: np.ndarray, v2: np.ndarray, method: str) -> StainMatrix:
    cols = []
    for v in (v1, v2):
        if v.sum() < 0:
            v = -v
        v = np.maximum(v, 0.0)
        n = np.linalg.norm(v)
        if n < 1e-8:
            raise DegenerateStainsError(f"{method}: estimated stain direction collapsed to zero")
        cols.append(v / n)
    sm = StainMatrix(np.stack(cols, axis=1))
    if sm.angle_degrees() < 1.0:
        warnings.warn(f"{method}: stain directions nearly parallel "
                      f"({sm.angle_degrees():.3f} deg); tile may hold a single stain")
    return sm


def macenko_estimate_stains(od: np.ndarray,
                            od_threshold: float = OD_TRANSPARENCY_THRESHOLD,
                            angle_percentile: float = ANGLE_PERCENTILE) -> StainMatrix:
    """Estimate two stain directions from the extreme angles in the OD plane.

    Projects thresholded OD pixels onto the top-2 eigenvectors of their
    covariance and takes robust percentile extremes of the projection angle.
    """
    tissue = _tissue_od_pixels(od, od_threshold)
    if tissue.shape[0] < 2:
        raise InsufficientTissueError(
            f"only {tissue.shape[0]} pixels above OD {od_threshold}; need at least 2")
    cov = np.cov(tissue.T)
    _, evecs = np.linalg.eigh(cov)
    basis = evecs[:, [2, 1]]
    for j in range(2):  # deterministic sign regardless of LAPACK's choice
        if basis[:, j].sum() < 0:
            basis[:, j] = -basis[:, j]
    proj = tissue @ basis
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [angle_percentile, 100.0 - angle_percentile])
    v1 = basis @ np.array([np.cos(lo), np.sin(lo)])
    v2 = basis @ np.array([np.cos(hi), np.sin(hi)])
    return _finish_columns(v1, v2, "macenko")


def _lasso_nnls_2var(w: np.ndarray, v: np.ndarray, lam: float) -> np.ndarray:
    """Exact per-column minimizers of ||v - w h||^2 + lam * sum(h), h >= 0.

    ``w`` is (3, 2), ``v`` is (3, n); returns (2, n). With only two variables
    the constrained optimum is one of four closed-form candidates.
    """
    g = w.T @ w
    c = w.T @ v - lam / 2.0
    n = v.shape[1]
    cands = np.zeros((4, 2, n))
    g00 = max(g[0, 0], 1e-12)
    g11 = max(g[1, 1], 1e-12)
    det = g00 * g11 - g[0, 1] ** 2
    if det > 1e-12:
        cands[0, 0] = (g11 * c[0] - g[0, 1] * c[1]) / det
        cands[0, 1] = (g00 * c[1] - g[0, 1] * c[0]) / det
        # invalid if either coordinate is negative; masked below
        cands[0][:, (cands[0] < 0).any(axis=0)] = 0.0
    cands[1, 0] = np.maximum(c[0], 0.0) / g00
    cands[2, 1] = np.maximum(c[1], 0.0) / g11
    # cands[3] stays zero
    # objective up to the constant ||v||^2: h'Gh - 2 h'c
    scores = np.einsum("kin,ij,kjn->kn", cands, g, cands) - 2.0 * np.einsum("kin,in->kn", cands, c)
    pick = scores.argmin(axis=0)
    return cands[pick, :, np.arange(n)].T


def vahadane_estimate_stains(od: np.ndarray,
                             sparsity: float = SPARSITY_WEIGHT,
                             max_iter: int = DICTIONARY_MAX_ITER,
                             od_threshold: float = OD_TRANSPARENCY_THRESHOLD,
                             tol: float = 1e-8,
                             return_objectives: bool = False):
    """Sparse dictionary learning of two non-negative OD stain directions.

    Alternates an exact two-variable lasso step for the codes with projected
    block-coordinate updates of the dictionary columns (non-negative, norm
    at most 1), so the objective ||V - WH||_F^2 + sparsity * ||H||_1 never
    increases between outer iterations.
    """
    tissue = _tissue_od_pixels(od, od_threshold)
    if tissue.shape[0] < 2:
        raise InsufficientTissueError(
            f"only {tissue.shape[0]} pixels above OD {od_threshold}; need at least 2")
    v = tissue.T
    try:
        w = macenko_estimate_stains(od, od_threshold).columns.copy()
    except (InsufficientTissueError, DegenerateStainsError):
        w = _FALLBACK_HE.copy()
        w /= np.linalg.norm(w, axis=0)
    objectives: list[float] = []
    h = None
    for it in range(max_iter):
        h = _lasso_nnls_2var(w, v, sparsity)
        a = h @ h.T
        b = v @ h.T
        for _ in range(2):
            for j in range(2):
                if a[j, j] < 1e-12:
                    continue
                wj = w[:, j] + (b[:, j] - w @ a[:, j]) / a[j, j]
                wj = np.maximum(wj, 0.0)
                norm = np.linalg.norm(wj)
                if norm < 1e-12:
                    continue  # keep the previous direction rather than collapse
                if norm > 1.0:
                    wj /= norm
                w[:, j] = wj
        resid = v - w @ h
        objectives.append(float((resid * resid).sum() + sparsity * h.sum()))
        if it > 0 and objectives[-2] - objectives[-1] < tol * max(1.0, objectives[-2]):
            break
    else:
        if len(objectives) > 1 and objectives[-2] - objectives[-1] >= tol * max(1.0, objectives[-2]):
            warnings.warn(f"dictionary learning still improving after {max_iter} iterations")
    sm = _finish_columns(w[:, 0], w[:, 1], "vahadane")
    if return_objectives:
        return sm, objectives
    return sm


def compute_concentrations(od: np.ndarray, stains: StainMatrix) -> np.ndarray:
    """Per-pixel non-negative least-squares stain concentrations, (h, w, 2).

    Solved in closed form per pixel (two variables), so the residual is the
    true constrained optimum, not an iterative approximation.
    """
    od = np.asarray(od, dtype=np.float64)
    if od.ndim != 3 or od.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) OD array, got {od.shape}")
    if stains.angle_degrees() < 1.0:
        raise DegenerateStainsError(
            f"stain directions {stains.angle_degrees():.3f} deg apart; concentrations ill-posed")
    h = _lasso_nnls_2var(stains.columns, od.reshape(-1, 3).T, 0.0)
    return h.T.reshape(od.shape[0], od.shape[1], 2)


def concentration_scale(src_conc: np.ndarray, target_conc: np.ndarray,
                        percentile: float = 99.0) -> np.ndarray:
    """Per-stain ratio of robust-maximum concentrations, guarded against zeros."""
    scale = np.ones(2)
    for j in range(2):
        s = np.percentile(src_conc[..., j], percentile)
        t = np.percentile(target_conc[..., j], percentile)
        if s <= 1e-8:
            warnings.warn(f"stain {j}: source concentration {percentile:g}th percentile is zero; "
                          "leaving its intensity unscaled")
        else:
            scale[j] = t / s
    return scale


def recombine(conc: np.ndarray, stains: StainMatrix,
              scale: np.ndarray | None = None) -> np.ndarray:
    """Render concentrations through a stain matrix back to uint8 RGB."""
    conc = np.asarray(conc, dtype=np.float64)
    if conc.ndim != 3 or conc.shape[2] != 2:
        raise ValueError(f"expected (h, w, 2) concentrations, got {conc.shape}")
    if (conc < 0).any():
        raise ValueError("concentrations must be non-negative")
    if scale is not None:
        conc = conc * np.asarray(scale, dtype=np.float64).reshape(2)
    od = conc @ stains.columns.T
    return od_to_rgb(np.maximum(od, 0.0))


def stain_normalize(src: np.ndarray, template: np.ndarray, method: str = "macenko") -> np.ndarray:
    """Re-render ``src`` with the template's stain character.

    ``method`` is one of reinhard, macenko, vahadane. The concentration
    methods match per-stain intensity via the ratio of 99th-percentile
    concentrations.
    """
    if method == "reinhard":
        return reinhard_normalize(src, compute_lab_stats(template))
    if method == "macenko":
        estimate = macenko_estimate_stains
    elif method == "vahadane":
        estimate = vahadane_estimate_stains
    else:
        raise ValueError(f"unknown normalization method {method!r}")
    src_od = rgb_to_od(src)
    tmpl_od = rgb_to_od(template)
    src_stains = estimate(src_od)
    tmpl_stains = estimate(tmpl_od)
    src_conc = compute_concentrations(src_od, src_stains)
    tmpl_conc = compute_concentrations(tmpl_od, tmpl_stains)
    scale = concentration_scale(src_conc, tmpl_conc)
    logger.debug("stain_normalize(%s): scale=%s", method, scale)
    return recombine(src_conc, tmpl_stains, scale)
