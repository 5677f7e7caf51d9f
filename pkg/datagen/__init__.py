from .scene import (
    STRATA,
    STRATUM_THRESHOLDS_M,
    BuildingSpec,
    PlacementError,
    Scene,
    SceneSpec,
    ViewGeometry,
    generate_scene,
    stratum_for_height,
)
from .geometry import mask_iou, project_roof, rasterize_mask
from .render import render_tile
from .dataset import (
    DatagenConfig,
    DatasetManifest,
    SettingError,
    TilePair,
    TileRecord,
    build_dataset,
    load_tile,
)
from .tiling import FrameMismatchError, tile_raster
from .stats import MisalignmentRow, misalignment_stats

__all__ = [
    "STRATA",
    "STRATUM_THRESHOLDS_M",
    "BuildingSpec",
    "PlacementError",
    "Scene",
    "SceneSpec",
    "ViewGeometry",
    "generate_scene",
    "stratum_for_height",
    "mask_iou",
    "project_roof",
    "rasterize_mask",
    "render_tile",
    "DatagenConfig",
    "DatasetManifest",
    "SettingError",
    "TilePair",
    "TileRecord",
    "build_dataset",
    "load_tile",
    "FrameMismatchError",
    "tile_raster",
    "MisalignmentRow",
    "misalignment_stats",
]
