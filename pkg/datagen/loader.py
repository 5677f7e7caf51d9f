# datagen/loader.py
from __future__ import annotations

from typing import List, Optional

import numpy as np
import torch
from torch.utils.data import Dataset

from utils.logger import get_logger

from .dataset import DatasetManifest, SettingError, TileRecord, read_image, read_mask

log = get_logger(__name__)


class TileDataset(Dataset):
    """
    One split of a dataset directory as (image, mask, index) tensors.

    Images are float32 CHW in [0, 1], masks float32 1xHxW in {0, 1}. Tiles are
    decoded once and kept in memory; desk-scale datasets fit comfortably.
    """

    def __init__(self, manifest: DatasetManifest, split: str, for_training: bool = False,
                 limit: Optional[int] = None):
        if for_training and manifest.role == "Ev":
            raise SettingError(
                f"dataset role {manifest.role} has no training samples; it can only be validated on"
            )
        if split not in manifest.splits:
            raise ValueError(f"split '{split}' not in manifest ({sorted(manifest.splits)})")
        self.manifest = manifest
        self.split = split
        self.records: List[TileRecord] = manifest.split_tiles(split)
        if limit is not None:
            self.records = self.records[: int(limit)]
        self._cache = {}

    @classmethod
    def from_dir(cls, root, split: str, for_training: bool = False, limit: Optional[int] = None):
        return cls(DatasetManifest.load(root), split, for_training=for_training, limit=limit)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int):
        if idx not in self._cache:
            rec = self.records[idx]
            image = read_image(self.manifest.image_path(rec))
            mask = read_mask(self.manifest.mask_path(rec))
            self._cache[idx] = (
                torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))),
                torch.from_numpy(mask.astype(np.float32)[None]),
            )
        image, mask = self._cache[idx]
        return image, mask, idx

    @property
    def tile_size(self) -> int:
        return self.manifest.tile_size
