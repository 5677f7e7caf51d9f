# datagen/geometry.py
from __future__ import annotations

import math
from typing import Iterable, Tuple

import numpy as np
import shapely
from shapely import affinity
from shapely.geometry import box
from shapely.geometry.base import BaseGeometry

from .scene import ViewGeometry


def displacement_px(height_m: float, view: ViewGeometry, gsd_m: float) -> float:
    """Relief displacement d = h * tan(theta) / gsd, in pixels."""
    if gsd_m <= 0:
        raise ValueError(f"gsd_m must be > 0, got {gsd_m}")
    return height_m * view.off_nadir_tan / gsd_m


def displace_footprint(footprint: BaseGeometry, height_m: float, view: ViewGeometry) -> BaseGeometry:
    """Roof outline in world meters: the footprint translated along the view azimuth."""
    dx, dy = view.offset_m(height_m)
    return affinity.translate(footprint, dx, dy)


def to_pixel_frame(geom: BaseGeometry, origin_m: Tuple[float, float], gsd_m: float) -> BaseGeometry:
    ox, oy = origin_m
    s = 1.0 / gsd_m
    return affinity.affine_transform(geom, [s, 0.0, 0.0, s, -ox * s, -oy * s])


def project_roof(
    footprint: BaseGeometry,
    height_m: float,
    view: ViewGeometry,
    gsd_m: float,
    origin_m: Tuple[float, float] = (0.0, 0.0),
) -> BaseGeometry:
    """
    Roof polygon in pixel coordinates of a tile whose top-left corner sits at
    `origin_m`.

    The shape is preserved; only a translation of h * tan(theta) / gsd pixels
    along the azimuth is applied.
    """
    if gsd_m <= 0:
        raise ValueError(f"gsd_m must be > 0, got {gsd_m}")
    return to_pixel_frame(displace_footprint(footprint, height_m, view), origin_m, gsd_m)


def pixel_centers(tile_origin: Tuple[float, float], tile_size_px: int, gsd_m: float):
    """World coordinates of pixel centers along x (columns) and y (rows)."""
    ox, oy = tile_origin
    idx = np.arange(tile_size_px, dtype=np.float64)
    return ox + (idx + 0.5) * gsd_m, oy + (idx + 0.5) * gsd_m


def rasterize_mask(
    polygons: Iterable[BaseGeometry],
    tile_origin: Tuple[float, float],
    tile_size_px: int = 256,
    gsd_m: float = 0.6,
) -> np.ndarray:
    """
    Burn polygons (world meters) into a binary tile mask.

    A pixel is 1 iff its center lies strictly inside any polygon. Polygons
    outside the tile contribute nothing.
    """
    if gsd_m <= 0:
        raise ValueError(f"gsd_m must be > 0, got {gsd_m}")
    n = int(tile_size_px)
    mask = np.zeros((n, n), dtype=np.uint8)
    ox, oy = tile_origin
    tile_box = box(ox, oy, ox + n * gsd_m, oy + n * gsd_m)
    xs, ys = pixel_centers(tile_origin, n, gsd_m)

    for poly in polygons:
        if poly is None or poly.is_empty or not poly.intersects(tile_box):
            continue
        minx, miny, maxx, maxy = poly.bounds
        c0 = max(0, int(math.floor((minx - ox) / gsd_m - 0.5)))
        c1 = min(n, int(math.ceil((maxx - ox) / gsd_m - 0.5)) + 1)
        r0 = max(0, int(math.floor((miny - oy) / gsd_m - 0.5)))
        r1 = min(n, int(math.ceil((maxy - oy) / gsd_m - 0.5)) + 1)
        if c0 >= c1 or r0 >= r1:
            continue
        X, Y = np.meshgrid(xs[c0:c1], ys[r0:r1])
        inside = shapely.contains_xy(poly, X, Y)
        mask[r0:r1, c0:c1] |= inside.astype(np.uint8)
    return mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two binary masks; two empty masks count as identical."""
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
