# harness/plans.py
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Tuple

import config as _cfg
from datagen.dataset import SettingError
from losses import LOSS_NAMES
from trainers.optim import OPTIMIZERS

# setting -> (train dataset role, validation dataset role)
SETTINGS = {
    "T-T": ("T", "T"),
    "T-S": ("T", "S"),
    "T-Ev": ("T", "Ev"),
    "S-S": ("S", "S"),
    "S-Ev": ("S", "Ev"),
}
METHODS = ("baseline", "sda", "kd", "dml")
TEACHER_SETTINGS = ("T-T", "T-S", "T-Ev")
VALIDATION_ONLY = ("Ev",)


def parse_setting(setting: str) -> Tuple[str, str]:
    if "-" not in setting:
        raise ValueError(f"setting must look like TRAIN-VAL, got '{setting}'")
    train_role, val_role = setting.split("-", 1)
    if train_role in VALIDATION_ONLY:
        raise SettingError(f"setting {setting}: {train_role} has no training samples")
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting '{setting}' (known: {', '.join(SETTINGS)})")
    return SETTINGS[setting]


@dataclass
class ExperimentPlan:
    """
    One harness run. Which fields matter depends on the command: `model`,
    `optimizers` and `losses` for the hyperparameter search, `roster` for the
    model benchmark, `teacher`/`students`/`methods` for the comparison.
    """
    name: str = "plan"
    settings: Tuple[str, ...] = ("S-S", "S-Ev")
    methods: Tuple[str, ...] = METHODS
    teacher: object = "teacher_vgg"
    students: Tuple[object, ...] = ("student_mbconv",)
    roster: Tuple[object, ...] = ()
    model: object = "student_mbconv"
    optimizers: Tuple[str, ...] = tuple(OPTIMIZERS)
    losses: Tuple[str, ...] = LOSS_NAMES
    datasets: Dict[str, str] = field(default_factory=lambda: {"T": "T", "S": "S", "Ev": "Ev"})
    seeds: Tuple[int, ...] = (0,)
    tile_size: int = 256
    train: dict = field(default_factory=dict)
    teacher_train: dict = field(default_factory=dict)
    distill: dict = field(default_factory=dict)
    dml: dict = field(default_factory=dict)
    init_from_baseline: bool = False

    def __post_init__(self):
        self.settings = tuple(self.settings)
        for s in self.settings:
            parse_setting(s)
        self.methods = tuple(self.methods)
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("a plan needs at least one seed")
        self.students = tuple(self.students)
        self.roster = tuple(self.roster)
        self.optimizers = tuple(self.optimizers)
        self.losses = tuple(self.losses)
        if self.tile_size <= 0 or self.tile_size % 32:
            raise ValueError(f"tile_size must be a positive multiple of 32, got {self.tile_size}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("settings", "methods", "students", "roster", "optimizers", "losses", "seeds"):
            d[key] = list(d[key])
        return d

    def dataset_root(self, role: str, data_root=None) -> Path:
        """Dataset directory for a role; relative paths resolve under the data root."""
        if role not in self.datasets:
            raise ValueError(f"plan has no dataset for role {role}")
        path = Path(self.datasets[role]).expanduser()
        if not path.is_absolute():
            path = Path(data_root or _cfg.DATA_ROOT) / path
        return path

    def setting_roots(self, setting: str, data_root=None) -> Tuple[Path, Path]:
        train_role, val_role = parse_setting(setting)
        return self.dataset_root(train_role, data_root), self.dataset_root(val_role, data_root)


def model_label(entry) -> str:
    if isinstance(entry, str):
        return entry
    if isinstance(entry, dict):
        return entry.get("name") or f"{entry.get('family', 'model')}_w{entry.get('width_multiplier', 1.0)}"
    raise ValueError(f"model entry must be a roster name or a spec object, got {type(entry).__name__}")


def model_entry(entry):
    """Strip the display name from an inline spec."""
    if isinstance(entry, dict):
        return {k: v for k, v in entry.items() if k != "name"}
    return entry


def unique_pairs(items) -> Tuple[Tuple[int, int], ...]:
    return tuple((i, j) for i in range(len(items)) for j in range(i + 1, len(items)))


__all__ = [
    "SETTINGS",
    "METHODS",
    "TEACHER_SETTINGS",
    "SettingError",
    "ExperimentPlan",
    "parse_setting",
    "model_label",
    "model_entry",
    "unique_pairs",
]
