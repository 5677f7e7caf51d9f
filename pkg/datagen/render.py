# datagen/render.py
from __future__ import annotations

import math
from typing import Tuple

import numpy as np
from shapely import affinity
from shapely.ops import unary_union

from .geometry import displace_footprint, rasterize_mask
from .scene import Scene, ViewGeometry

FACADE_SHADE = 0.55
SHADOW_SHADE = 0.5


def ground_texture(scene: Scene, tile_origin, gsd_m: float, size: int) -> np.ndarray:
    """Low-frequency blotches plus fine grain around the scene's ground color."""
    ox, oy = tile_origin
    rng = np.random.default_rng(
        [scene.texture_seed, int(round(ox * 100)) & 0xFFFFFFFF, int(round(oy * 100)) & 0xFFFFFFFF]
    )
    cell = 8
    coarse_n = size // cell + 1
    coarse = rng.normal(0.0, 0.05, size=(coarse_n, coarse_n, 1))
    coarse = np.kron(coarse, np.ones((cell, cell, 1)))[:size, :size]
    fine = rng.normal(0.0, 0.02, size=(size, size, 3))
    base = np.asarray(scene.ground_rgb, dtype=np.float64)[None, None, :]
    return np.clip(base + coarse + fine, 0.0, 1.0)


def sweep_polygon(footprint, roof):
    """Area swept by the footprint moving to the roof position (the visible facade band)."""
    return unary_union([footprint, roof]).convex_hull


def render_tile(
    scene: Scene,
    view: ViewGeometry,
    gsd_m: float,
    tile_origin: Tuple[float, float] = (0.0, 0.0),
    tile_size_px: int = 256,
) -> np.ndarray:
    """
    Render an RGB tile (float, [0, 1]) of the scene seen off-nadir.

    Drawing order: textured ground, cast shadows, then per building (lowest
    first) the facade band and the flat roof at its displaced position.
    """
    n = int(tile_size_px)
    img = ground_texture(scene, tile_origin, gsd_m, n)

    sx = math.cos(scene.sun_azimuth_rad)
    sy = math.sin(scene.sun_azimuth_rad)
    shadows = []
    for b in scene.buildings:
        length = b.height_m * scene.shadow_tan
        cast = affinity.translate(b.footprint, length * sx, length * sy)
        shadows.append(sweep_polygon(b.footprint, cast))
    shadow_mask = rasterize_mask(shadows, tile_origin, n, gsd_m).astype(bool)
    img[shadow_mask] *= SHADOW_SHADE

    for b in sorted(scene.buildings, key=lambda item: item.height_m):
        albedo = np.asarray(b.roof_albedo, dtype=np.float64)
        roof = displace_footprint(b.footprint, b.height_m, view)
        facade = rasterize_mask([sweep_polygon(b.footprint, roof)], tile_origin, n, gsd_m).astype(bool)
        img[facade] = albedo * FACADE_SHADE
        roof_mask = rasterize_mask([roof], tile_origin, n, gsd_m).astype(bool)
        img[roof_mask] = albedo

    return img.astype(np.float32)
