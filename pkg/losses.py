# losses.py
"""
Segmentation losses, the feature distillation loss and the mutual-learning loss.

Every supervised loss takes (p, y): predicted probabilities and the binary
ground truth, same shape. Dice and Jaccard sum over the whole batch.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from models.base import FeaturePyramid

EPS = 1e-7
SMOOTH = 1.0

LOSS_NAMES = (
    "bce",
    "bce_dice",
    "bce_jaccard",
    "focal_dice",
    "focal_jaccard",
    "jaccard",
    "dice",
    "focal",
    "total",
)

# Words dropped when normalizing table labels ("Binary Focal Dice" -> "focal_dice")
FILLERS = {"binary", "loss", "and", "plus"}
ALIASES = {"iou": "jaccard", "ce": "bce", "crossentropy": "bce", "cross_entropy": "bce"}


def normalize_loss_name(name: str) -> str:
    text = name.strip().lower()
    if text in ALIASES:
        return ALIASES[text]
    text = re.sub(r"[^\w]+|_", " ", text)
    words = [ALIASES.get(w, w) for w in text.split() if w not in FILLERS]
    norm = "_".join(words)
    if norm not in LOSS_NAMES:
        raise ValueError(f"unknown loss '{name}' (known: {', '.join(LOSS_NAMES)})")
    return norm


def _check(p: torch.Tensor, y: torch.Tensor) -> None:
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} != target shape {tuple(y.shape)}")


# ---- Supervised losses ------------------------------------------------------


def dice_loss(p: torch.Tensor, y: torch.Tensor, smooth: float = SMOOTH) -> torch.Tensor:
    """1 - (2 sum(y p) + 1) / (sum(y) + sum(p) + 1); both maps empty gives 0."""
    _check(p, y)
    inter = (y * p).sum()
    return 1.0 - (2.0 * inter + smooth) / (y.sum() + p.sum() + smooth)


def jaccard_loss(p: torch.Tensor, y: torch.Tensor, smooth: float = SMOOTH) -> torch.Tensor:
    _check(p, y)
    inter = (y * p).sum()
    return 1.0 - (inter + smooth) / (y.sum() + p.sum() - inter + smooth)


def bce_loss(p: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    _check(p, y)
    p = p.clamp(eps, 1.0 - eps)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def binary_focal_loss(
    p: torch.Tensor,
    y: torch.Tensor,
    gamma: float = 2.0,
    alpha: float = 0.25,
    eps: float = EPS,
) -> torch.Tensor:
    _check(p, y)
    p = p.clamp(eps, 1.0 - eps)
    pos = alpha * y * (1.0 - p) ** gamma * torch.log(p)
    neg = (1.0 - alpha) * (1.0 - y) * p**gamma * torch.log(1.0 - p)
    return -(pos + neg).mean()


@dataclass(frozen=True)
class LossConfig:
    name: str = "dice"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    smooth: float = SMOOTH

    def __post_init__(self):
        object.__setattr__(self, "name", normalize_loss_name(self.name))
        if not self.focal_gamma > 0:
            raise ValueError(f"focal_gamma must be > 0, got {self.focal_gamma}")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError(f"focal_alpha must be in (0, 1), got {self.focal_alpha}")
        if self.smooth != SMOOTH:
            raise ValueError("smooth is fixed at 1")

    @classmethod
    def from_value(cls, value) -> "LossConfig":
        if isinstance(value, LossConfig):
            return value
        if isinstance(value, str):
            return cls(name=value)
        if isinstance(value, dict):
            return cls(**{k: v for k, v in value.items() if k in cls.__dataclass_fields__})
        raise ValueError(f"loss must be a name or an object, got {type(value).__name__}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "focal_gamma": self.focal_gamma,
            "focal_alpha": self.focal_alpha,
            "smooth": self.smooth,
        }


def combined_loss(cfg: LossConfig, p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Single and composite losses; composites are unweighted sums."""
    def focal():
        return binary_focal_loss(p, y, cfg.focal_gamma, cfg.focal_alpha)

    name = cfg.name
    if name == "bce":
        return bce_loss(p, y)
    if name == "dice":
        return dice_loss(p, y, cfg.smooth)
    if name == "jaccard":
        return jaccard_loss(p, y, cfg.smooth)
    if name == "focal":
        return focal()
    if name == "bce_dice":
        return bce_loss(p, y) + dice_loss(p, y, cfg.smooth)
    if name == "bce_jaccard":
        return bce_loss(p, y) + jaccard_loss(p, y, cfg.smooth)
    if name in ("focal_dice", "total"):
        return focal() + dice_loss(p, y, cfg.smooth)
    if name == "focal_jaccard":
        return focal() + jaccard_loss(p, y, cfg.smooth)
    raise ValueError(f"unknown loss '{name}'")


# ---- Distillation -----------------------------------------------------------

DEFAULT_LEVEL_WEIGHTS = (0.1, 0.15, 0.2, 0.25, 0.3)


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    level_weights: Tuple[float, ...] = DEFAULT_LEVEL_WEIGHTS
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        weights = tuple(float(w) for w in self.level_weights)
        if len(weights) != 5:
            raise ValueError(f"level_weights needs 5 entries, got {len(weights)}")
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-6:
            raise ValueError("level_weights must be non-negative and sum to 1")
        object.__setattr__(self, "level_weights", weights)

    @classmethod
    def from_dict(cls, data: dict) -> "DistillConfig":
        return cls(**{k: v for k, v in (data or {}).items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "level_weights": list(self.level_weights), "normalize": self.normalize}


class FeatureProjector(nn.Module):
    """
    Learned 1x1 maps from student to teacher channels, one per pyramid level.
    Levels whose channel counts already agree start as the identity.
    """

    def __init__(self, student_channels: Sequence[int], teacher_channels: Sequence[int]):
        super().__init__()
        if len(student_channels) != len(teacher_channels):
            raise ValueError("student and teacher pyramids have different level counts")
        convs = []
        for cs, ct in zip(student_channels, teacher_channels):
            conv = nn.Conv2d(cs, ct, kernel_size=1, bias=False)
            if cs == ct:
                with torch.no_grad():
                    conv.weight.copy_(torch.eye(cs).reshape(cs, cs, 1, 1))
            else:
                nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="linear")
            convs.append(conv)
        self.convs = nn.ModuleList(convs)

    def forward(self, level: int, features: torch.Tensor) -> torch.Tensor:
        return self.convs[level](features)


def distillation_loss(
    student_pyr: FeaturePyramid,
    teacher_pyr: FeaturePyramid,
    cfg: DistillConfig,
    projector: Optional[FeatureProjector] = None,
) -> torch.Tensor:
    """
    Weighted sum over levels of the mean squared difference between projected
    student features and teacher features, each L2-normalized across channels
    per pixel when cfg.normalize is set. Levels with weight 0 are skipped.
    """
    if len(student_pyr) != len(teacher_pyr) or len(student_pyr) != len(cfg.level_weights):
        raise ValueError(
            f"pyramid level counts differ: student {len(student_pyr)}, teacher {len(teacher_pyr)}, "
            f"weights {len(cfg.level_weights)}"
        )
    total = None
    for i, w in enumerate(cfg.level_weights):
        if w == 0:
            continue
        s, t = student_pyr[i], teacher_pyr[i]
        if projector is not None:
            s = projector(i, s)
        if s.shape != t.shape:
            raise ValueError(f"level {i}: student {tuple(s.shape)} vs teacher {tuple(t.shape)} after projection")
        if cfg.normalize:
            s = F.normalize(s, dim=1, eps=1e-12)
            t = F.normalize(t, dim=1, eps=1e-12)
        term = w * ((s - t) ** 2).mean()
        total = term if total is None else total + term
    if total is None:
        return student_pyr[0].new_zeros(())
    return total


def mutual_loss(pa: torch.Tensor, pb: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """
    Symmetric Bernoulli KL between two probability maps:
    mean over pixels of (KL(a||b) + KL(b||a)) / 2.
    """
    _check(pa, pb)
    a = pa.clamp(eps, 1.0 - eps)
    b = pb.clamp(eps, 1.0 - eps)
    # KL(a||b) + KL(b||a) = (a - b) * (logit a - logit b); swapping a, b only flips both signs
    la = torch.log(a) - torch.log(1.0 - a)
    lb = torch.log(b) - torch.log(1.0 - b)
    return 0.5 * ((a - b) * (la - lb)).mean()
