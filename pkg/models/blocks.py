# models/blocks.py
"""
Building blocks shared by the encoder families and the U-Net decoder.
"""

from __future__ import annotations

from typing import Optional, Type

import torch
import torch.nn.functional as F
from torch import nn


def conv_bn_act(
    cin: int,
    cout: int,
    kernel: int = 3,
    stride: int = 1,
    groups: int = 1,
    act: Optional[Type[nn.Module]] = nn.ReLU,
) -> nn.Sequential:
    layers = [
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, groups=groups, bias=False),
        nn.BatchNorm2d(cout),
    ]
    if act is not None:
        layers.append(act())
    return nn.Sequential(*layers)


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduced: int):
        super().__init__()
        reduced = max(1, int(reduced))
        self.reduce = nn.Conv2d(channels, reduced, 1)
        self.expand = nn.Conv2d(reduced, channels, 1)

    def forward(self, x):
        s = F.adaptive_avg_pool2d(x, 1)
        s = torch.sigmoid(self.expand(F.silu(self.reduce(s))))
        return x * s


class InvertedResidual(nn.Module):
    """MobileNetV2 block: 1x1 expand, 3x3 depthwise, 1x1 linear projection."""

    def __init__(self, cin: int, cout: int, stride: int = 1, expand: int = 6):
        super().__init__()
        hidden = cin * expand
        layers = []
        if expand != 1:
            layers.append(conv_bn_act(cin, hidden, 1, act=nn.ReLU6))
        layers.append(conv_bn_act(hidden, hidden, 3, stride=stride, groups=hidden, act=nn.ReLU6))
        layers.append(conv_bn_act(hidden, cout, 1, act=None))
        self.body = nn.Sequential(*layers)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        y = self.body(x)
        return x + y if self.residual else y


class FusedMBConv(nn.Module):
    """3x3 expansion conv (fused with the depthwise step), SiLU, 1x1 projection."""

    def __init__(self, cin: int, cout: int, stride: int = 1, expand: int = 4, se_ratio: float = 0.0):
        super().__init__()
        hidden = cin * expand
        if expand == 1:
            layers = [conv_bn_act(cin, cout, 3, stride=stride, act=nn.SiLU)]
            if se_ratio > 0:
                layers.append(SqueezeExcite(cout, cin * se_ratio))
        else:
            layers = [conv_bn_act(cin, hidden, 3, stride=stride, act=nn.SiLU)]
            if se_ratio > 0:
                layers.append(SqueezeExcite(hidden, cin * se_ratio))
            layers.append(conv_bn_act(hidden, cout, 1, act=None))
        self.body = nn.Sequential(*layers)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        y = self.body(x)
        return x + y if self.residual else y


class MBConv(nn.Module):
    """1x1 expand, 3x3 depthwise, squeeze-excitation, 1x1 projection; SiLU activations."""

    def __init__(self, cin: int, cout: int, stride: int = 1, expand: int = 4, se_ratio: float = 0.25):
        super().__init__()
        hidden = cin * expand
        self.body = nn.Sequential(
            conv_bn_act(cin, hidden, 1, act=nn.SiLU),
            conv_bn_act(hidden, hidden, 3, stride=stride, groups=hidden, act=nn.SiLU),
            SqueezeExcite(hidden, cin * se_ratio),
            conv_bn_act(hidden, cout, 1, act=None),
        )
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        y = self.body(x)
        return x + y if self.residual else y


class MobileViTBlock(nn.Module):
    """
    Local 3x3 features followed by transformer layers over unfolded patches.

    Pixels at the same offset inside each patch x patch cell form one sequence,
    so attention mixes information across the whole feature map.
    """

    def __init__(self, channels: int, depth: int = 2, patch: int = 2, heads: int = 4):
        super().__init__()
        if channels % heads:
            heads = 1
        self.patch = patch
        self.local = nn.Sequential(
            conv_bn_act(channels, channels, 3, act=nn.SiLU),
            nn.Conv2d(channels, channels, 1, bias=False),
        )
        layer = nn.TransformerEncoderLayer(
            d_model=channels,
            nhead=heads,
            dim_feedforward=2 * channels,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, num_layers=depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(channels)
        self.project = conv_bn_act(channels, channels, 1, act=nn.SiLU)
        self.fuse = conv_bn_act(2 * channels, channels, 3, act=nn.SiLU)

    def forward(self, x):
        y = self.local(x)
        b, c, h, w = y.shape
        p = self.patch if h % self.patch == 0 and w % self.patch == 0 else 1
        hp, wp = h // p, w // p
        y = y.reshape(b, c, hp, p, wp, p).permute(0, 3, 5, 2, 4, 1).reshape(b * p * p, hp * wp, c)
        y = self.norm(self.transformer(y))
        y = y.reshape(b, p, p, hp, wp, c).permute(0, 5, 3, 1, 4, 2).reshape(b, c, h, w)
        return self.fuse(torch.cat([x, self.project(y)], dim=1))


class AttentionGate(nn.Module):
    """Additive attention on a skip path, gated by the upsampled decoder features."""

    def __init__(self, gate_ch: int, skip_ch: int, inter_ch: int):
        super().__init__()
        self.w_g = nn.Sequential(nn.Conv2d(gate_ch, inter_ch, 1, bias=False), nn.BatchNorm2d(inter_ch))
        self.w_x = nn.Sequential(nn.Conv2d(skip_ch, inter_ch, 1, bias=False), nn.BatchNorm2d(inter_ch))
        self.psi = nn.Sequential(nn.Conv2d(inter_ch, 1, 1, bias=False), nn.BatchNorm2d(1), nn.Sigmoid())

    def forward(self, gate, skip):
        return skip * self.psi(F.relu(self.w_g(gate) + self.w_x(skip)))


class DecoderBlock(nn.Module):
    """Nearest x2 upsample, optional gated skip concat, two conv-BN-ReLU layers."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, use_attention: bool = False):
        super().__init__()
        self.skip_ch = skip_ch
        self.attention = (
            AttentionGate(in_ch, skip_ch, max(skip_ch // 2, 8)) if use_attention and skip_ch else None
        )
        self.conv = nn.Sequential(
            conv_bn_act(in_ch + skip_ch, out_ch, 3),
            conv_bn_act(out_ch, out_ch, 3),
        )

    def forward(self, x, skip: Optional[torch.Tensor] = None):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.skip_ch:
            if skip is None or skip.shape[1] != self.skip_ch:
                raise ValueError(f"decoder block expects a {self.skip_ch}-channel skip")
            if self.attention is not None:
                skip = self.attention(x, skip)
            x = torch.cat([x, skip], dim=1)
        return self.conv(x)
