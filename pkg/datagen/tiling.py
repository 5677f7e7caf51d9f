# datagen/tiling.py
"""
Tile a user raster and a polygon file into the dataset layout.

The raster's own pixel grid defines the tiles; polygons are mapped into that
grid and burned with the same pixel-center rule as the synthetic generator.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import List, Optional

import geopandas as gpd
import numpy as np
import rasterio
from rasterio.errors import RasterioIOError
from rasterio.windows import Window
from shapely import affinity
from shapely.geometry import box
from shapely.strtree import STRtree
from tqdm import tqdm

from utils.hashing import file_sha256
from utils.logger import get_logger

from .dataset import LABEL_KINDS, DatasetManifest, TileRecord, save_image, save_mask
from .geometry import rasterize_mask
from .scene import stratum_for_height

log = get_logger(__name__)


class FrameMismatchError(ValueError):
    """Raster and polygons are not in the same coordinate frame."""


def to_tile_frame(geoms, transform, gsd_m: float) -> List:
    """
    Map geometries from the raster's CRS into the tiling frame: raster pixel
    coordinates scaled by gsd, x to the right and y down the rows.
    """
    inv = ~transform
    m = [inv.a * gsd_m, inv.b * gsd_m, inv.d * gsd_m, inv.e * gsd_m, inv.c * gsd_m, inv.f * gsd_m]
    return [affinity.affine_transform(g, m) for g in geoms]


def _check_frames(src, gdf) -> None:
    if len(gdf) == 0:
        return
    if (src.crs is None) != (gdf.crs is None):
        raise FrameMismatchError(
            f"raster CRS {src.crs} vs polygon CRS {gdf.crs}: one side is unreferenced"
        )
    if src.crs is not None and not gdf.crs.equals(src.crs.to_wkt()):
        raise FrameMismatchError(f"raster CRS {src.crs} differs from polygon CRS {gdf.crs}")


def _stretch_bounds(src, bands):
    step = max(1, int(math.ceil(max(src.width, src.height) / 1024)))
    sample = src.read(bands, out_shape=(len(bands), max(1, src.height // step), max(1, src.width // step)))
    lo, hi = np.percentile(sample, [2, 98])
    if hi <= lo:
        hi = lo + 1
    return float(lo), float(hi)


def tile_raster(
    raster_path,
    polygon_file,
    gsd_m: float,
    out_dir,
    *,
    tile_size: int = 256,
    split: str = "train",
    label_kind: str = "noisy",
    height_field: Optional[str] = None,
    force: bool = False,
) -> DatasetManifest:
    if label_kind not in LABEL_KINDS:
        raise ValueError(f"unknown label_kind {label_kind}")
    if gsd_m <= 0:
        raise ValueError(f"gsd_m must be > 0, got {gsd_m}")
    out = Path(out_dir)
    if (out / "manifest.json").exists() and not force:
        raise FileExistsError(f"{out / 'manifest.json'} exists; use --force to overwrite")

    try:
        src = rasterio.open(raster_path)
    except RasterioIOError as e:
        raise OSError(f"cannot read raster {raster_path}: {e}") from e

    with src:
        gdf = gpd.read_file(polygon_file)
        if len(gdf) == 0:
            log.warning("Polygon file %s has no features; masks will be empty", polygon_file)
        _check_frames(src, gdf)
        transform = src.transform
        if transform.b != 0 or transform.d != 0:
            raise ValueError("rotated raster transforms are not supported")
        if height_field is not None and len(gdf) and height_field not in gdf.columns:
            raise ValueError(f"height field '{height_field}' not in {list(gdf.columns)}")

        geoms = [g for g in gdf.geometry if g is not None and not g.is_empty]
        framed = to_tile_frame(geoms, transform, gsd_m)
        heights = None
        if height_field is not None and len(gdf):
            heights = [float(h) for g, h in zip(gdf.geometry, gdf[height_field]) if g is not None and not g.is_empty]
        raster_box = box(0, 0, src.width * gsd_m, src.height * gsd_m)
        if framed and not any(g.intersects(raster_box) for g in framed):
            log.warning("No polygon intersects the raster extent; check the inputs' frames")
        tree = STRtree(framed) if framed else None

        bands = [1, 2, 3] if src.count >= 3 else [1, 1, 1]
        lo, hi = _stretch_bounds(src, bands)

        records: List[TileRecord] = []
        stem = Path(raster_path).stem
        positions = [
            (row, col)
            for row in range(0, src.height - tile_size + 1, tile_size)
            for col in range(0, src.width - tile_size + 1, tile_size)
        ]
        for row, col in tqdm(positions, desc="tiles", leave=False, disable=None):
            data = src.read(bands, window=Window(col, row, tile_size, tile_size)).astype(np.float64)
            image = np.clip((data - lo) / (hi - lo), 0.0, 1.0).transpose(1, 2, 0)
            origin = (col * gsd_m, row * gsd_m)
            tile_box = box(origin[0], origin[1], origin[0] + tile_size * gsd_m, origin[1] + tile_size * gsd_m)
            hits = [] if tree is None else sorted(int(i) for i in tree.query(tile_box))
            mask = rasterize_mask([framed[i] for i in hits], origin, tile_size, gsd_m)

            max_h = stratum = None
            if heights is not None:
                inside = [heights[i] for i in hits if framed[i].intersects(tile_box)]
                if inside:
                    max_h = round(max(inside), 3)
                    stratum = stratum_for_height(max_h)

            tile_id = f"{stem}_{row}_{col}"
            save_image(out / split / "images" / f"{tile_id}.png", image)
            save_mask(out / split / "masks" / f"{tile_id}.png", mask)
            records.append(
                TileRecord(
                    id=tile_id,
                    split=split,
                    stratum=stratum,
                    max_height_m=max_h,
                    label_kind=label_kind,
                    gsd_cm=int(round(gsd_m * 100)),
                )
            )

    manifest = DatasetManifest(
        root=out,
        role="custom",
        label_kind=label_kind,
        tile_size=tile_size,
        splits={split: [r.id for r in records]},
        tiles=records,
        generator={
            "seed": None,
            "config_hash": None,
            "raster": Path(raster_path).name,
            "raster_sha256": file_sha256(raster_path),
            "polygons_sha256": file_sha256(polygon_file),
        },
    )
    manifest.write(force=True)
    log.info("Tiled %s into %d tiles", raster_path, len(records))
    return manifest
