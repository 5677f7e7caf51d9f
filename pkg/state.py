# state.py
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from utils.hashing import config_hash

TIMING_FIELDS = ("ms_per_iter", "wall_s")


@dataclass
class PlateauState:
    """
    Learning-rate plateau tracker on validation IoU.

    A strictly higher IoU resets the counter; after `patience` epochs without
    one, lr is multiplied by `factor` and the counter restarts.
    """
    lr: float
    factor: float = 0.1
    patience: int = 10
    best: float = float("-inf")
    num_bad_epochs: int = 0
    drops: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError(f"plateau factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ValueError(f"plateau patience must be >= 1, got {self.patience}")


@dataclass
class EpochLog:
    epoch: int                                  # 0 = evaluation before any update
    train_loss: Optional[float]
    val_loss: float
    precision: float
    recall: float
    iou: float
    f1: float
    lr: float
    ms_per_iter: Optional[float] = None
    macro: Dict[str, float] = field(default_factory=dict)


@dataclass
class RunRecord:
    """
    Everything one training run produced: per-epoch history, the converging
    (best val IoU) epoch and where its checkpoint lives.
    """
    name: str
    kind: str                                   # "train", "sda", "kd", "dml"
    seed: int
    model_spec: dict
    config: dict
    optimizer: dict = field(default_factory=dict)
    params: int = 0
    epochs: List[EpochLog] = field(default_factory=list)
    best_epoch: Optional[int] = None
    checkpoint: Optional[str] = None
    ms_per_iter: Optional[float] = None
    status: str = "running"                     # "running", "ok", "diverged"
    provenance: dict = field(default_factory=dict)

    def remember_epoch(self, entry: EpochLog) -> bool:
        """Append an epoch; True when it is the new best (earliest epoch wins ties)."""
        self.epochs.append(entry)
        best = self.best
        if best is None or entry.iou > best.iou:
            self.best_epoch = entry.epoch
            return True
        return False

    @property
    def best(self) -> Optional[EpochLog]:
        for e in self.epochs:
            if e.epoch == self.best_epoch:
                return e
        return None

    @property
    def lrs(self) -> List[float]:
        return [e.lr for e in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        data = dict(data)
        data["epochs"] = [EpochLog(**e) for e in data.get("epochs", [])]
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})

    def record_hash(self) -> str:
        """Hash of the record content, excluding wall-clock timing and file locations."""
        d = self.to_dict()
        d.pop("checkpoint", None)
        for key in TIMING_FIELDS:
            d.pop(key, None)
        for e in d["epochs"]:
            for key in TIMING_FIELDS:
                e.pop(key, None)
        return config_hash(d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = self.to_dict()
        data["record_hash"] = self.record_hash()
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        with Path(path).open("r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))
