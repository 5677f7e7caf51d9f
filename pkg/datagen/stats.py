# datagen/stats.py
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import List

import numpy as np

from utils.logger import get_logger

from .dataset import DatasetManifest, read_mask
from .geometry import mask_iou
from .scene import STRATA

log = get_logger(__name__)


@dataclass(frozen=True)
class MisalignmentRow:
    gsd_cm: int
    stratum: str
    tiles: int
    mean_iou: float


def _stratum_order(s: str) -> int:
    return STRATA.index(s) if s in STRATA else len(STRATA)


def misalignment_stats(manifest: DatasetManifest) -> List[MisalignmentRow]:
    """Mean IoU between noisy and clean labels, one row per (gsd, stratum)."""
    groups = defaultdict(list)
    for tile in manifest.tiles:
        primary = manifest.mask_path(tile)
        other = manifest.counterpart_path(tile)
        if not tile.counterpart or not primary.exists() or not other.exists():
            log.warning("Tile %s has no noisy/clean pair; skipped", tile.id)
            continue
        iou = mask_iou(read_mask(primary), read_mask(other))
        groups[(tile.gsd_cm, tile.stratum or "unknown")].append(iou)

    rows = [
        MisalignmentRow(gsd_cm=g, stratum=s, tiles=len(v), mean_iou=float(np.mean(v)))
        for (g, s), v in groups.items()
    ]
    rows.sort(key=lambda r: (r.gsd_cm, _stratum_order(r.stratum)))
    return rows
