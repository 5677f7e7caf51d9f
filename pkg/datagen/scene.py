# datagen/scene.py
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from shapely import affinity
from shapely.geometry import Polygon, box

from utils.logger import get_logger

log = get_logger(__name__)


# ---- Strata -----------------------------------------------------------------

STRATA = ("low", "mid", "high", "sky")

# Upper bounds are inclusive: low <= 12 m, mid (12, 30], high (30, 100], sky > 100.
STRATUM_THRESHOLDS_M = {"low": 12.0, "mid": 30.0, "high": 100.0}

# Sampling ranges (lo, hi] per stratum.
STRATUM_HEIGHT_RANGE_M = {
    "low": (3.0, 12.0),
    "mid": (12.0, 30.0),
    "high": (30.0, 100.0),
    "sky": (100.0, 200.0),
}

DEFAULT_FOOTPRINT_SIDE_M = {
    "low": (8.0, 20.0),
    "mid": (10.0, 25.0),
    "high": (15.0, 35.0),
    "sky": (20.0, 45.0),
}

GROUND_RGB = (0.36, 0.39, 0.31)


def stratum_for_height(height_m: float) -> str:
    if height_m <= STRATUM_THRESHOLDS_M["low"]:
        return "low"
    if height_m <= STRATUM_THRESHOLDS_M["mid"]:
        return "mid"
    if height_m <= STRATUM_THRESHOLDS_M["high"]:
        return "high"
    return "sky"


class PlacementError(ValueError):
    """Raised when non-overlapping placement is infeasible for a scene spec."""


# ---- Types ------------------------------------------------------------------


@dataclass(frozen=True)
class BuildingSpec:
    footprint: Polygon          # world meters, y grows downwards like image rows
    height_m: float
    roof_albedo: Tuple[float, float, float]

    def __post_init__(self):
        fp = self.footprint
        if fp.is_empty or not fp.is_valid or fp.area <= 0:
            raise ValueError("footprint must be a valid simple polygon with positive area")
        if not math.isfinite(self.height_m) or self.height_m < 0:
            raise ValueError(f"height_m must be finite and >= 0, got {self.height_m}")
        if len(self.roof_albedo) != 3 or not all(0.0 <= c <= 1.0 for c in self.roof_albedo):
            raise ValueError(f"roof_albedo must be an RGB triple in [0, 1], got {self.roof_albedo}")

    @property
    def stratum(self) -> str:
        return stratum_for_height(self.height_m)


@dataclass(frozen=True)
class ViewGeometry:
    off_nadir_tan: float = 0.25
    azimuth_rad: float = math.pi / 4

    def __post_init__(self):
        if not math.isfinite(self.off_nadir_tan) or self.off_nadir_tan < 0:
            raise ValueError(f"off_nadir_tan must be >= 0, got {self.off_nadir_tan}")
        if not 0.0 <= self.azimuth_rad < 2 * math.pi:
            raise ValueError(f"azimuth_rad must be in [0, 2*pi), got {self.azimuth_rad}")

    def offset_m(self, height_m: float) -> Tuple[float, float]:
        """Roof offset in world meters for a building of the given height."""
        d = height_m * self.off_nadir_tan
        return d * math.cos(self.azimuth_rad), d * math.sin(self.azimuth_rad)

    def to_dict(self) -> dict:
        return {"off_nadir_tan": self.off_nadir_tan, "azimuth_rad": self.azimuth_rad}


@dataclass(frozen=True)
class SceneSpec:
    extent_m: Tuple[float, float]
    building_count_range: Tuple[int, int] = (1, 6)
    height_distribution: Dict[str, float] = field(
        default_factory=lambda: {s: 0.25 for s in STRATA}
    )
    seed: int = 0
    footprint_side_m: Dict[str, Tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_FOOTPRINT_SIDE_M)
    )
    rotate_prob: float = 0.5
    min_gap_m: float = 1.0
    max_attempts: int = 60      # per building
    # when set, buildings are framed by their displaced roofs: every roof lies
    # inside the extent while tall footprints may fall outside it
    view: Optional[ViewGeometry] = None

    def __post_init__(self):
        w, h = self.extent_m
        if w <= 0 or h <= 0:
            raise ValueError(f"extent_m must be positive, got {self.extent_m}")
        lo, hi = self.building_count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid building_count_range {self.building_count_range}")
        unknown = set(self.height_distribution) - set(STRATA)
        if unknown:
            raise ValueError(f"unknown strata in height_distribution: {sorted(unknown)}")
        weights = [float(v) for v in self.height_distribution.values()]
        if any(v < 0 for v in weights) or abs(sum(weights) - 1.0) > 1e-6:
            raise ValueError("height_distribution weights must be >= 0 and sum to 1")
        for s, (a, b) in self.footprint_side_m.items():
            if a <= 0 or b < a:
                raise ValueError(f"invalid footprint side range for {s}: {(a, b)}")

    def stratum_weights(self) -> np.ndarray:
        w = np.array([float(self.height_distribution.get(s, 0.0)) for s in STRATA])
        return w / w.sum()


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    buildings: List[BuildingSpec]
    ground_rgb: Tuple[float, float, float]
    texture_seed: int
    sun_azimuth_rad: float
    shadow_tan: float

    def to_dict(self) -> dict:
        return {
            "buildings": [
                {
                    "footprint": [list(c) for c in b.footprint.exterior.coords],
                    "height_m": b.height_m,
                    "roof_albedo": list(b.roof_albedo),
                }
                for b in self.buildings
            ],
            "ground_rgb": list(self.ground_rgb),
            "texture_seed": self.texture_seed,
            "sun_azimuth_rad": self.sun_azimuth_rad,
            "shadow_tan": self.shadow_tan,
        }


# ---- Generation -------------------------------------------------------------


def sample_height(rng: np.random.Generator, stratum: str) -> float:
    lo, hi = STRATUM_HEIGHT_RANGE_M[stratum]
    # (lo, hi]: subtracting from hi keeps the lower bound exclusive
    return float(hi - rng.uniform(0.0, hi - lo))


def _sample_footprint(rng, spec: SceneSpec, stratum: str,
                      roof_offset_m: Tuple[float, float] = (0.0, 0.0)) -> Optional[Polygon]:
    width, height = spec.extent_m
    lo, hi = spec.footprint_side_m.get(stratum, DEFAULT_FOOTPRINT_SIDE_M[stratum])
    cap = 0.9 * min(width, height)
    a = min(float(rng.uniform(lo, hi)), cap)
    b = min(float(rng.uniform(lo, hi)), cap)
    angle = float(rng.uniform(0.0, 90.0)) if rng.random() < spec.rotate_prob else 0.0
    rect = affinity.rotate(box(-a / 2, -b / 2, a / 2, b / 2), angle, origin=(0, 0))
    minx, miny, maxx, maxy = rect.bounds
    if maxx - minx >= width or maxy - miny >= height:
        return None
    dx, dy = roof_offset_m
    cx = float(rng.uniform(-minx, width - maxx)) - dx
    cy = float(rng.uniform(-miny, height - maxy)) - dy
    return affinity.translate(rect, cx, cy)


def _roof(footprint: Polygon, offset_m: Tuple[float, float]) -> Polygon:
    return affinity.translate(footprint, *offset_m)


def generate_scene(spec: SceneSpec) -> Scene:
    """
    Place non-overlapping buildings with heights drawn from the stratum mixture.

    Deterministic for a given spec (including its seed). Raises PlacementError
    when fewer than the minimum building count fit after bounded retries.
    """
    rng = np.random.default_rng(spec.seed)
    n_min, n_max = spec.building_count_range
    target = int(rng.integers(n_min, n_max + 1))
    weights = spec.stratum_weights()

    placed: List[BuildingSpec] = []
    for _ in range(target):
        building = None
        for _attempt in range(spec.max_attempts):
            stratum = STRATA[int(rng.choice(len(STRATA), p=weights))]
            height_m = sample_height(rng, stratum)
            offset = spec.view.offset_m(height_m) if spec.view is not None else (0.0, 0.0)
            fp = _sample_footprint(rng, spec, stratum, offset)
            if fp is None:
                continue
            if any(fp.distance(b.footprint) < spec.min_gap_m for b in placed):
                continue
            if spec.view is not None and any(
                _roof(fp, offset).distance(_roof(b.footprint, spec.view.offset_m(b.height_m))) < spec.min_gap_m
                for b in placed
            ):
                continue
            albedo = tuple(float(c) for c in rng.uniform(0.55, 0.95, size=3))
            building = BuildingSpec(fp, height_m, albedo)
            break
        if building is None:
            break
        placed.append(building)

    if len(placed) < n_min:
        raise PlacementError(
            f"placed {len(placed)} of at least {n_min} buildings in "
            f"{spec.extent_m} m after {spec.max_attempts} attempts each"
        )
    if len(placed) < target:
        log.debug("Scene seed %s: placed %d of %d buildings", spec.seed, len(placed), target)

    jitter = rng.uniform(-0.04, 0.04, size=3)
    ground = tuple(float(np.clip(c + j, 0.0, 1.0)) for c, j in zip(GROUND_RGB, jitter))
    return Scene(
        spec=spec,
        buildings=placed,
        ground_rgb=ground,
        texture_seed=int(rng.integers(0, 2**31 - 1)),
        sun_azimuth_rad=float(rng.uniform(0.0, 2 * math.pi)),
        shadow_tan=float(rng.uniform(0.2, 0.5)),
    )
