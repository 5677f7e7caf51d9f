# models/encoders.py
"""
The four shipped encoder families.

Every family has five stages and every stage halves the resolution with its
first layer, so a tile of side S yields features at S/2 ... S/32. There is
no classification tail: the last stage ends on a conv block.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from utils.logger import get_logger

from .base import NUM_STAGES, EncoderSpec, FeaturePyramid
from .blocks import FusedMBConv, InvertedResidual, MBConv, MobileViTBlock, conv_bn_act
from .registry import encoder_builder, register_encoder

log = get_logger(__name__)

MIN_SIDE = 2**NUM_STAGES


class StagedEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec, stages: Sequence[nn.Module], channels: Tuple[int, ...]):
        super().__init__()
        if len(stages) != NUM_STAGES or len(channels) != NUM_STAGES:
            raise ValueError(f"an encoder needs exactly {NUM_STAGES} stages")
        self.spec = spec
        self.stages = nn.ModuleList(stages)
        self.out_channels = tuple(int(c) for c in channels)
        self.tile_size: Optional[int] = None    # set by build_encoder

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        check_images(images, self.tile_size)
        levels: List[torch.Tensor] = []
        x = images
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(levels)


def check_images(images: torch.Tensor, tile_size: int = None) -> None:
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected an (N, 3, H, W) batch, got {tuple(images.shape)}")
    h, w = images.shape[2], images.shape[3]
    if h != w or h < MIN_SIDE or h % MIN_SIDE:
        raise ValueError(f"input must be square with a side that is a multiple of {MIN_SIDE}, got {h}x{w}")
    if tile_size is not None and h != tile_size:
        raise ValueError(f"input side {h} does not match the model tile size {tile_size}")


# ---- Families ---------------------------------------------------------------

VGG_CONVS = (2, 2, 3, 3, 3)


@register_encoder("vgg_like")
def build_vgg_like(spec: EncoderSpec) -> StagedEncoder:
    ch = spec.scaled_channels()
    stages, cin = [], 3
    for c, n in zip(ch, VGG_CONVS):
        layers = [conv_bn_act(cin, c, 3, stride=2)]
        layers += [conv_bn_act(c, c, 3) for _ in range(n - 1)]
        stages.append(nn.Sequential(*layers))
        cin = c
    return StagedEncoder(spec, stages, ch)


IR_DEPTHS = (1, 2, 3, 3, 2)


@register_encoder("inverted_residual")
def build_inverted_residual(spec: EncoderSpec) -> StagedEncoder:
    ch = spec.scaled_channels()
    stages = [nn.Sequential(conv_bn_act(3, ch[0], 3, stride=2, act=nn.ReLU6), InvertedResidual(ch[0], ch[0], 1, expand=1))]
    for i in range(1, NUM_STAGES):
        blocks = [InvertedResidual(ch[i - 1], ch[i], stride=2, expand=6)]
        blocks += [InvertedResidual(ch[i], ch[i], 1, expand=6) for _ in range(IR_DEPTHS[i] - 1)]
        stages.append(nn.Sequential(*blocks))
    return StagedEncoder(spec, stages, ch)


MB_DEPTHS = (1, 2, 2, 3, 3)


@register_encoder("mbconv")
def build_mbconv(spec: EncoderSpec) -> StagedEncoder:
    """Fused-MBConv in the early high-resolution stages, MBConv with SE later."""
    ch = spec.scaled_channels()
    stages = [nn.Sequential(conv_bn_act(3, ch[0], 3, stride=2, act=nn.SiLU), FusedMBConv(ch[0], ch[0], 1, expand=1))]
    for i in range(1, NUM_STAGES):
        block = FusedMBConv if i < 3 else MBConv
        blocks = [block(ch[i - 1], ch[i], stride=2, expand=4)]
        blocks += [block(ch[i], ch[i], 1, expand=4) for _ in range(MB_DEPTHS[i] - 1)]
        stages.append(nn.Sequential(*blocks))
    return StagedEncoder(spec, stages, ch)


VIT_DEPTHS = (0, 0, 2, 2, 2)


@register_encoder("mobilevit_like")
def build_mobilevit_like(spec: EncoderSpec) -> StagedEncoder:
    """MobileNetV2 blocks, with transformer blocks for global context in the last three stages."""
    ch = spec.scaled_channels()
    stages = [nn.Sequential(conv_bn_act(3, ch[0], 3, stride=2, act=nn.SiLU), InvertedResidual(ch[0], ch[0], 1, expand=2))]
    for i in range(1, NUM_STAGES):
        blocks = [InvertedResidual(ch[i - 1], ch[i], stride=2, expand=4)]
        if VIT_DEPTHS[i]:
            blocks.append(MobileViTBlock(ch[i], depth=VIT_DEPTHS[i]))
        else:
            blocks.append(InvertedResidual(ch[i], ch[i], 1, expand=4))
        stages.append(nn.Sequential(*blocks))
    return StagedEncoder(spec, stages, ch)


# ---- Entry points -----------------------------------------------------------


def init_weights(module: nn.Module) -> None:
    """Fan-in scaled init for convs and linears; unit BN/LayerNorm."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_encoder(spec: EncoderSpec, tile_size: Optional[int] = None) -> nn.Module:
    """Encoder for `spec`; with `tile_size`, inputs of any other side are rejected."""
    encoder = encoder_builder(spec.family)(spec)
    encoder.tile_size = tile_size
    init_weights(encoder)
    log.debug("Built %s encoder with channels %s", spec.family, encoder.out_channels)
    return encoder


def encoder_forward(encoder: nn.Module, images: torch.Tensor) -> FeaturePyramid:
    """Run the encoder and check the pyramid shape law against its channels."""
    check_images(images, getattr(encoder, "tile_size", None))
    pyramid = encoder(images)
    pyramid.check(encoder.out_channels, images.shape[-1])
    return pyramid
