# models/unet.py
from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Sequence, Tuple

import torch
from torch import nn

import config as _cfg
from utils.logger import get_logger

from .base import NUM_STAGES, FeaturePyramid, ModelSpec
from .blocks import DecoderBlock
from .encoders import build_encoder, check_images, init_weights
from .registry import decoder_builder, register_decoder

log = get_logger(__name__)


class UnetDecoder(nn.Module):
    """
    Five upsampling blocks from side S/32 back to S.

    Block i concatenates pyramid level 3 - i; the last block restores full
    resolution and has no encoder level to concatenate.
    """

    def __init__(self, encoder_channels: Sequence[int], decoder_channels: Sequence[int], use_attention: bool):
        super().__init__()
        if len(encoder_channels) != NUM_STAGES or len(decoder_channels) != NUM_STAGES:
            raise ValueError(
                f"encoder ({len(encoder_channels)}) and decoder ({len(decoder_channels)}) "
                f"must both have {NUM_STAGES} levels"
            )
        blocks = []
        in_ch = encoder_channels[-1]
        for i, out_ch in enumerate(decoder_channels):
            skip_ch = encoder_channels[NUM_STAGES - 2 - i] if i < NUM_STAGES - 1 else 0
            blocks.append(DecoderBlock(in_ch, skip_ch, out_ch, use_attention))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = decoder_channels[-1]

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        x = pyramid[NUM_STAGES - 1]
        for i, block in enumerate(self.blocks):
            skip = pyramid[NUM_STAGES - 2 - i] if i < NUM_STAGES - 1 else None
            x = block(x, skip)
        return x


class SegmentationModel(nn.Module):
    def __init__(self, spec: ModelSpec, encoder: nn.Module, decoder: nn.Module):
        super().__init__()
        self.spec = spec
        self.encoder = encoder
        self.decoder = decoder
        self.head = nn.Conv2d(decoder.out_channels, 1, kernel_size=3, padding=1)

    def forward_features(self, images: torch.Tensor) -> Tuple[torch.Tensor, FeaturePyramid]:
        """Probabilities (N, 1, S, S) together with the encoder pyramid."""
        check_images(images, self.spec.tile_size)
        pyramid = self.encoder(images)
        return torch.sigmoid(self.head(self.decoder(pyramid))), pyramid

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward_features(images)[0]

    def encode(self, images: torch.Tensor) -> FeaturePyramid:
        check_images(images, self.spec.tile_size)
        return self.encoder(images)


@register_decoder("unet")
def build_unet(spec: ModelSpec, seed: int = 0) -> SegmentationModel:
    """
    Build the U-Net for a spec. Construction is pure given (spec, seed): the
    global RNG is forked so callers' random streams are left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        encoder = build_encoder(spec.encoder, spec.tile_size)
        decoder = UnetDecoder(encoder.out_channels, spec.decoder_channels, spec.use_attention)
        model = SegmentationModel(spec, encoder, decoder)
        init_weights(model.decoder)
        init_weights(model.head)
    return model


def build_model(spec: ModelSpec, seed: int = 0) -> nn.Module:
    return decoder_builder(spec.decoder)(spec, seed)


def count_params(model: nn.Module) -> int:
    """Number of trainable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def freeze(module: nn.Module, frozen: bool = True) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(not frozen)
    return module


# ---- Checkpoints ------------------------------------------------------------


def save_checkpoint(path, model: nn.Module, seed: int, config_hash: Optional[str] = None,
                    extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model_spec": model.spec.to_dict(),
        "seed": int(seed),
        "config_hash": config_hash,
        "extra": extra or {},
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, device: Optional[str] = None) -> Tuple[nn.Module, dict]:
    """Rebuild the model from the stored spec and load its weights."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    spec = ModelSpec.from_dict(payload["model_spec"])
    model = build_model(spec, payload.get("seed", 0))
    model.load_state_dict(payload["state_dict"])
    model.to(device or _cfg.DEVICE)
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    log.debug("Loaded checkpoint %s (%s)", path, spec.encoder.family)
    return model, meta
