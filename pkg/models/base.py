# models/base.py
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Protocol, Sequence, Tuple

import torch
from torch import nn

NUM_STAGES = 5

FAMILIES = ("vgg_like", "inverted_residual", "mbconv", "mobilevit_like")

DEFAULT_STAGE_CHANNELS = {
    "vgg_like": (64, 128, 256, 512, 512),
    "inverted_residual": (16, 24, 32, 96, 160),
    "mbconv": (24, 48, 64, 128, 192),
    "mobilevit_like": (32, 64, 96, 128, 160),
}

TEACHER_DECODER_CHANNELS = (256, 128, 64, 32, 16)
STUDENT_DECODER_CHANNELS = (128, 64, 48, 32, 16)


def make_divisible(value: float, divisor: int = 8) -> int:
    """Round a channel count to a multiple of `divisor`, never dropping more than 10%."""
    new = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if new < 0.9 * value:
        new += divisor
    return int(new)


# ---- Specs ------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderSpec:
    family: str
    stage_channels: Optional[Tuple[int, ...]] = None
    width_multiplier: float = 1.0

    def __post_init__(self):
        # families outside FAMILIES are checked at registry lookup
        channels = self.stage_channels
        if channels is None:
            if self.family not in DEFAULT_STAGE_CHANNELS:
                raise ValueError(f"family '{self.family}' has no default stage_channels")
            channels = DEFAULT_STAGE_CHANNELS[self.family]
        channels = tuple(int(c) for c in channels)
        if len(channels) != NUM_STAGES:
            raise ValueError(f"stage_channels must have {NUM_STAGES} entries, got {len(channels)}")
        if any(c <= 0 for c in channels):
            raise ValueError(f"stage_channels must be positive, got {channels}")
        if not self.width_multiplier > 0:
            raise ValueError(f"width_multiplier must be > 0, got {self.width_multiplier}")
        object.__setattr__(self, "stage_channels", channels)
        object.__setattr__(self, "width_multiplier", float(self.width_multiplier))

    def scaled_channels(self) -> Tuple[int, ...]:
        """Channels actually built: stage_channels scaled by the width multiplier."""
        return tuple(make_divisible(c * self.width_multiplier) for c in self.stage_channels)


@dataclass(frozen=True)
class ModelSpec:
    encoder: EncoderSpec
    decoder_channels: Tuple[int, ...] = STUDENT_DECODER_CHANNELS
    use_attention: bool = True
    decoder: str = "unet"
    tile_size: int = 256
    head: str = "sigmoid"

    def __post_init__(self):
        dec = tuple(int(c) for c in self.decoder_channels)
        if len(dec) != NUM_STAGES:
            raise ValueError(f"decoder_channels must have {NUM_STAGES} entries, got {len(dec)}")
        if any(c <= 0 for c in dec):
            raise ValueError(f"decoder_channels must be positive, got {dec}")
        if self.tile_size <= 0 or self.tile_size % 2**NUM_STAGES:
            raise ValueError(f"tile_size must be a positive multiple of 32, got {self.tile_size}")
        if self.head != "sigmoid":
            raise ValueError(f"only the sigmoid head is supported, got '{self.head}'")
        object.__setattr__(self, "decoder_channels", dec)
        object.__setattr__(self, "use_attention", bool(self.use_attention))

    def to_dict(self) -> dict:
        return {
            "family": self.encoder.family,
            "stage_channels": list(self.encoder.stage_channels),
            "width_multiplier": self.encoder.width_multiplier,
            "decoder_channels": list(self.decoder_channels),
            "use_attention": self.use_attention,
            "decoder": self.decoder,
            "tile_size": self.tile_size,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        """Accepts the flat form written by `to_dict` or a nested `encoder` object."""
        enc = data.get("encoder")
        if isinstance(enc, dict):
            encoder = EncoderSpec(
                family=enc["family"],
                stage_channels=enc.get("stage_channels"),
                width_multiplier=enc.get("width_multiplier", 1.0),
            )
        else:
            encoder = EncoderSpec(
                family=data["family"],
                stage_channels=data.get("stage_channels"),
                width_multiplier=data.get("width_multiplier", 1.0),
            )
        return cls(
            encoder=encoder,
            decoder_channels=tuple(data.get("decoder_channels", STUDENT_DECODER_CHANNELS)),
            use_attention=data.get("use_attention", True),
            decoder=data.get("decoder", "unet"),
            tile_size=int(data.get("tile_size", 256)),
        )

    def with_tile_size(self, tile_size: int) -> "ModelSpec":
        return ModelSpec.from_dict({**self.to_dict(), "tile_size": int(tile_size)})


# ---- Pyramid ----------------------------------------------------------------


@dataclass
class FeaturePyramid:
    """Encoder outputs, finest first: level i has side tile_size / 2**(i+1)."""

    levels: List[torch.Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.levels[i]

    def __iter__(self) -> Iterator[torch.Tensor]:
        return iter(self.levels)

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [tuple(t.shape) for t in self.levels]

    def check(self, channels: Sequence[int], side: int) -> None:
        if len(self.levels) != len(channels):
            raise ValueError(f"pyramid has {len(self.levels)} levels, expected {len(channels)}")
        for i, (t, c) in enumerate(zip(self.levels, channels)):
            expect = side // 2 ** (i + 1)
            if t.shape[1] != c or t.shape[2] != expect or t.shape[3] != expect:
                raise ValueError(
                    f"level {i} has shape {tuple(t.shape)}, expected (*, {c}, {expect}, {expect})"
                )

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid([t.detach() for t in self.levels])


# ---- Interfaces -------------------------------------------------------------


class Encoder(Protocol):
    spec: EncoderSpec
    out_channels: Tuple[int, ...]

    def __call__(self, images: torch.Tensor) -> FeaturePyramid: ...


class SegmentationNet(Protocol):
    spec: ModelSpec
    encoder: nn.Module

    def __call__(self, images: torch.Tensor) -> torch.Tensor: ...
    def forward_features(self, images: torch.Tensor) -> Tuple[torch.Tensor, FeaturePyramid]: ...


EncoderBuilder = Callable[[EncoderSpec], nn.Module]
ModelBuilder = Callable[[ModelSpec, int], nn.Module]


@dataclass
class Registry:
    encoders: Dict[str, EncoderBuilder] = field(default_factory=dict)
    decoders: Dict[str, ModelBuilder] = field(default_factory=dict)
