"""Cutting whole-slide crops into fixed-size tiles.

Two edge policies: ``discard`` drops partial tiles at the right/bottom
edges; ``retain`` keeps full coverage by shifting the final row/column of
origins back so the last tile ends exactly at the image border (tiles may
overlap their neighbors).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EDGE_POLICIES = ("retain", "discard")


class TileError(ValueError):
    """Tiling is impossible for this image / spec combination."""


@dataclass
class TileSpec:
    tile_size: int = 256
    edge_policy: str = "retain"

    def __post_init__(self):
        if self.tile_size < 1:
            raise TileError(f"tile_size must be positive, got {self.tile_size}")
        if self.edge_policy not in EDGE_POLICIES:
            raise TileError(f"edge_policy must be one of {EDGE_POLICIES}, got {self.edge_policy!r}")


@dataclass
class Tile:
    image: np.ndarray
    x: int
    y: int


def _origins(extent: int, ts: int, policy: str) -> list[int]:
    if policy == "discard":
        return [i * ts for i in range(extent // ts)]
    return [min(i * ts, extent - ts) for i in range(math.ceil(extent / ts))]


def tile_image(img: np.ndarray, spec: TileSpec) -> list[Tile]:
    """Cut an image into tile_size squares, row-major (x fastest)."""
    img = np.asarray(img)
    if img.ndim not in (2, 3):
        raise TileError(f"expected a 2-D or 3-D image array, got shape {img.shape}")
    h, w = img.shape[0], img.shape[1]
    ts = spec.tile_size
    if spec.edge_policy == "retain" and (h < ts or w < ts):
        raise TileError(f"image {h}x{w} smaller than tile size {ts}; "
                        "cannot shift the final tile inside the image")
    tiles = []
    for y in _origins(h, ts, spec.edge_policy):
        for x in _origins(w, ts, spec.edge_policy):
            tiles.append(Tile(np.ascontiguousarray(img[y:y + ts, x:x + ts]), x, y))
    return tiles
