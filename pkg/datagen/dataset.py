# datagen/dataset.py
"""
Synthetic T / S / Ev dataset builder.

- T: large dataset labelled with footprints (noisy, misaligned with roofs)
- S: small dataset labelled with projected roofs (clean)
- Ev: validation-only clean dataset, stratified by building type

Every tile also stores the other label kind as its counterpart mask, so the
label misalignment can be measured on any of the three datasets.
"""

from __future__ import annotations

import json
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image
from tqdm import tqdm

import config as _cfg
from utils.hashing import config_hash
from utils.logger import get_logger

from .geometry import displace_footprint, rasterize_mask
from .render import render_tile
from .scene import STRATA, STRATUM_THRESHOLDS_M, SceneSpec, ViewGeometry, generate_scene

log = get_logger(__name__)

SCHEMA_VERSION = 1
STANDARD_GSDS_M = (0.30, 0.60, 1.20)
LABEL_KINDS = ("noisy", "clean")
ROLES = ("T", "S", "Ev")
ROLE_LABEL_KIND = {"T": "noisy", "S": "clean", "Ev": "clean"}
SPLITS = ("train", "val")

DEFAULT_SPLIT_COUNTS = {
    "T": {"train": 600, "val": 60},
    "S": {"train": 120, "val": 40},
    "Ev": {"train": 0, "val": 60},
}

# Footprint sides in pixels at the default 256 px tile; scaled with tile size.
# Framing buildings at a comparable pixel size across resolutions makes the
# pixel displacement (and thus the misalignment) grow at finer gsd.
FOOTPRINT_SIDE_PX = {
    "low": (24.0, 64.0),
    "mid": (32.0, 80.0),
    "high": (40.0, 96.0),
    "sky": (48.0, 112.0),
}


class SettingError(ValueError):
    """Raised when a validation-only dataset is requested for training."""


# ---- Types ------------------------------------------------------------------


@dataclass
class TilePair:
    image: np.ndarray           # H x W x 3, float in [0, 1]
    mask: np.ndarray            # H x W, {0, 1}
    gsd_m: float
    stratum: Optional[str]
    max_height_m: Optional[float]
    label_kind: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be H x W x 3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError("image and mask must share spatial dims")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"unknown label_kind {self.label_kind}")


@dataclass
class TileRecord:
    id: str
    split: str
    stratum: Optional[str]
    max_height_m: Optional[float]
    label_kind: str
    gsd_cm: int
    counterpart: bool = False

    @property
    def gsd_m(self) -> float:
        return self.gsd_cm / 100.0


@dataclass
class DatasetManifest:
    root: Path
    role: str
    label_kind: str
    tile_size: int
    splits: Dict[str, List[str]]
    tiles: List[TileRecord]
    generator: dict
    view: Optional[dict] = None
    strata_thresholds_m: dict = field(default_factory=lambda: dict(STRATUM_THRESHOLDS_M))
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.root = Path(self.root)
        self._by_id = {t.id: t for t in self.tiles}
        if len(self._by_id) != len(self.tiles):
            raise ValueError("tile ids must be unique")

    # paths
    def image_path(self, tile: TileRecord) -> Path:
        return self.root / tile.split / "images" / f"{tile.id}.png"

    def mask_path(self, tile: TileRecord) -> Path:
        return self.root / tile.split / "masks" / f"{tile.id}.png"

    def counterpart_path(self, tile: TileRecord) -> Path:
        return self.root / tile.split / "counterpart_masks" / f"{tile.id}.png"

    def tile(self, tile_id: str) -> TileRecord:
        return self._by_id[tile_id]

    def split_tiles(self, split: str) -> List[TileRecord]:
        return [self._by_id[i] for i in self.splits.get(split, [])]

    @property
    def gsd_cm(self) -> List[int]:
        return sorted({t.gsd_cm for t in self.tiles})

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "role": self.role,
            "label_kind": self.label_kind,
            "tile_size": self.tile_size,
            "gsd_cm": self.gsd_cm,
            "splits": self.splits,
            "tiles": [asdict(t) for t in self.tiles],
            "generator": self.generator,
            "view": self.view,
            "strata_thresholds_m": self.strata_thresholds_m,
        }

    @classmethod
    def from_dict(cls, data: dict, root) -> "DatasetManifest":
        return cls(
            root=Path(root),
            role=data["role"],
            label_kind=data["label_kind"],
            tile_size=int(data["tile_size"]),
            splits={k: list(v) for k, v in data["splits"].items()},
            tiles=[TileRecord(**t) for t in data["tiles"]],
            generator=data.get("generator", {}),
            view=data.get("view"),
            strata_thresholds_m=data.get("strata_thresholds_m", dict(STRATUM_THRESHOLDS_M)),
            schema_version=int(data.get("schema_version", SCHEMA_VERSION)),
        )

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        with (root / "manifest.json").open("r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f), root)

    def write(self, force: bool = False) -> Path:
        path = self.root / "manifest.json"
        if path.exists() and not force:
            raise FileExistsError(f"{path} exists; pass force to overwrite")
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
        return path


# ---- PNG I/O ----------------------------------------------------------------


def save_image(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def save_mask(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def load_tile(manifest: DatasetManifest, tile_id: str) -> TilePair:
    t = manifest.tile(tile_id)
    return TilePair(
        image=read_image(manifest.image_path(t)),
        mask=read_mask(manifest.mask_path(t)),
        gsd_m=t.gsd_m,
        stratum=t.stratum,
        max_height_m=t.max_height_m,
        label_kind=t.label_kind,
    )


# ---- Config -----------------------------------------------------------------


def _equal_weights():
    return {s: 0.25 for s in STRATA}


@dataclass
class DatagenConfig:
    seed: int = 0
    tile_size: int = 256
    gsds_m: Tuple[float, ...] = STANDARD_GSDS_M
    off_nadir_tan: float = _cfg.OFF_NADIR_TAN
    azimuth_rad: object = math.pi / 4           # float, or {role: float}
    splits: Dict[str, Dict[str, int]] = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_SPLIT_COUNTS)))
    strata_weights: Dict[str, Dict[str, float]] = field(
        default_factory=lambda: {"T": _equal_weights(), "S": _equal_weights(), "Ev": _equal_weights()}
    )
    building_count_range: Tuple[int, int] = (1, 5)
    workers: int = _cfg.WORKERS

    def __post_init__(self):
        self.gsds_m = tuple(float(g) for g in self.gsds_m)
        self.building_count_range = tuple(int(v) for v in self.building_count_range)
        if self.tile_size <= 0 or self.tile_size % 32:
            raise ValueError(f"tile_size must be a positive multiple of 32, got {self.tile_size}")
        for g in self.gsds_m:
            if g not in STANDARD_GSDS_M:
                raise ValueError(f"gsd {g} is not one of {STANDARD_GSDS_M}")
        unknown = set(self.splits) - set(ROLES)
        if unknown:
            raise ValueError(f"unknown dataset roles {sorted(unknown)}")
        if self.splits.get("Ev", {}).get("train", 0):
            raise SettingError("Ev is validation-only; its train count must be 0")
        for role, weights in self.strata_weights.items():
            total = sum(float(weights.get(s, 0.0)) for s in STRATA)
            if abs(total - 1.0) > 1e-6:
                raise ValueError(f"strata weights for {role} must sum to 1")
        if self.off_nadir_tan < 0:
            raise ValueError("off_nadir_tan must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "DatagenConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("workers")
        d["gsds_m"] = list(self.gsds_m)
        d["building_count_range"] = list(self.building_count_range)
        return d

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    def view_for(self, role: str) -> ViewGeometry:
        az = self.azimuth_rad[role] if isinstance(self.azimuth_rad, dict) else self.azimuth_rad
        return ViewGeometry(off_nadir_tan=float(self.off_nadir_tan), azimuth_rad=float(az))


# ---- Allocation -------------------------------------------------------------


def allocate(count: int, weights: Dict[str, float], keys=STRATA) -> List[str]:
    """Largest-remainder allocation of `count` items over keys, in key order."""
    w = np.array([float(weights.get(k, 0.0)) for k in keys])
    if count == 0:
        return []
    raw = w / w.sum() * count
    base = np.floor(raw).astype(int)
    rest = count - int(base.sum())
    order = sorted(range(len(keys)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    out: List[str] = []
    for k, n in zip(keys, base):
        out.extend([k] * int(n))
    return out


def _tile_plan(cfg: DatagenConfig, role: str, split: str) -> List[Tuple[str, float]]:
    count = int(cfg.splits.get(role, {}).get(split, 0))
    strata = allocate(count, cfg.strata_weights.get(role, _equal_weights()))
    plan = []
    seen: Dict[str, int] = {}
    for s in strata:
        j = seen.get(s, 0)
        seen[s] = j + 1
        plan.append((s, cfg.gsds_m[j % len(cfg.gsds_m)]))
    rng = np.random.default_rng([cfg.seed, ROLES.index(role), SPLITS.index(split), 99])
    order = rng.permutation(len(plan))
    return [plan[i] for i in order]


# ---- Tile generation --------------------------------------------------------


@dataclass(frozen=True)
class _TileJob:
    root: str
    role: str
    split: str
    index: int
    stratum: str
    gsd_m: float
    seed: int
    tile_size: int
    off_nadir_tan: float
    azimuth_rad: float
    building_count_range: Tuple[int, int]

    @property
    def tile_id(self) -> str:
        return f"{self.role.lower()}_{self.split}_{self.index:05d}"


def _make_tile(job: _TileJob) -> dict:
    # per-tile stream: identical output for any worker count
    rng = np.random.default_rng([job.seed, ROLES.index(job.role), SPLITS.index(job.split), job.index])
    extent = job.tile_size * job.gsd_m
    scale = job.tile_size / 256.0
    sides = {s: (lo * scale * job.gsd_m, hi * scale * job.gsd_m) for s, (lo, hi) in FOOTPRINT_SIDE_PX.items()}
    view = ViewGeometry(off_nadir_tan=job.off_nadir_tan, azimuth_rad=job.azimuth_rad)
    spec = SceneSpec(
        extent_m=(extent, extent),
        building_count_range=job.building_count_range,
        height_distribution={job.stratum: 1.0},
        seed=int(rng.integers(0, 2**31 - 1)),
        footprint_side_m=sides,
        min_gap_m=2.0 * job.gsd_m,
        view=view,
    )
    scene = generate_scene(spec)

    image = render_tile(scene, view, job.gsd_m, (0.0, 0.0), job.tile_size)
    footprints = [b.footprint for b in scene.buildings]
    roofs = [displace_footprint(b.footprint, b.height_m, view) for b in scene.buildings]
    noisy = rasterize_mask(footprints, (0.0, 0.0), job.tile_size, job.gsd_m)
    clean = rasterize_mask(roofs, (0.0, 0.0), job.tile_size, job.gsd_m)

    label_kind = ROLE_LABEL_KIND[job.role]
    primary, counterpart = (noisy, clean) if label_kind == "noisy" else (clean, noisy)
    root = Path(job.root)
    save_image(root / job.split / "images" / f"{job.tile_id}.png", image)
    save_mask(root / job.split / "masks" / f"{job.tile_id}.png", primary)
    save_mask(root / job.split / "counterpart_masks" / f"{job.tile_id}.png", counterpart)

    max_height = max((b.height_m for b in scene.buildings), default=0.0)
    return asdict(
        TileRecord(
            id=job.tile_id,
            split=job.split,
            stratum=job.stratum,
            max_height_m=round(float(max_height), 3),
            label_kind=label_kind,
            gsd_cm=int(round(job.gsd_m * 100)),
            counterpart=True,
        )
    )


def _run_jobs(jobs: List[_TileJob], workers: int, desc: str) -> List[dict]:
    progress = dict(total=len(jobs), desc=desc, leave=False, disable=None)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(tqdm(pool.map(_make_tile, jobs, chunksize=8), **progress))
    return [_make_tile(j) for j in tqdm(jobs, **progress)]


def build_dataset(config: DatagenConfig, out_dir, force: bool = False) -> Dict[str, DatasetManifest]:
    """
    Generate the T, S and Ev datasets under `out_dir/<role>/`.

    Refuses to overwrite an existing manifest unless `force` is set; with
    `force`, the previous dataset directory is removed first.
    """
    out = Path(out_dir)
    roles = [r for r in ROLES if r in config.splits]
    for role in roles:
        manifest_path = out / role / "manifest.json"
        if manifest_path.exists():
            if not force:
                raise FileExistsError(f"{manifest_path} exists; use --force to overwrite")
            log.warning("Removing existing dataset at %s", out / role)
            shutil.rmtree(out / role)

    manifests: Dict[str, DatasetManifest] = {}
    chash = config.config_hash()
    for role in roles:
        root = out / role
        view = config.view_for(role)
        records: List[TileRecord] = []
        splits: Dict[str, List[str]] = {}
        for split in SPLITS:
            jobs = [
                _TileJob(
                    root=str(root),
                    role=role,
                    split=split,
                    index=i,
                    stratum=stratum,
                    gsd_m=gsd,
                    seed=config.seed,
                    tile_size=config.tile_size,
                    off_nadir_tan=view.off_nadir_tan,
                    azimuth_rad=view.azimuth_rad,
                    building_count_range=config.building_count_range,
                )
                for i, (stratum, gsd) in enumerate(_tile_plan(config, role, split))
            ]
            rows = _run_jobs(jobs, config.workers, f"{role}/{split}")
            records.extend(TileRecord(**r) for r in rows)
            splits[split] = [r["id"] for r in rows]

        manifest = DatasetManifest(
            root=root,
            role=role,
            label_kind=ROLE_LABEL_KIND[role],
            tile_size=config.tile_size,
            splits=splits,
            tiles=records,
            generator={"seed": config.seed, "config_hash": chash},
            view=view.to_dict(),
        )
        manifest.write(force=True)
        log.info("Wrote %s dataset: %s", role, {k: len(v) for k, v in splits.items()})
        manifests[role] = manifest
    return manifests
