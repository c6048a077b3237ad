"""VGG/DRIU-style convolutional encoder.

Block map (14 convolutions, 3 max-pools)::

    stage 1  (S)    conv 1->c, conv c->c                 + fusion conv 4c->1   = 3
    pool
    stage 2  (S/2)  conv c->2c, conv 2c->2c              + side conv 2c->c     = 3
    pool
    stage 3  (S/4)  conv 2c->4c, conv 4c->4c, 4c->4c     + side conv 4c->c     = 4
    pool
    stage 4  (S/8)  conv 4c->8c, conv 8c->8c, 8c->8c     + side conv 8c->c     = 4

Each stage adds the output of its first conv to the output of its last conv
(residual). Stage 1-3 outputs leave through dropout as skip connections;
stage 4 output is the deep map handed to the graph module. Side convs
upsample their stage output bilinearly to full resolution before a 3x3 conv;
the side maps and skip 1 are concatenated and fused into a single-channel
sigmoid map (``aux_prob``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class CnnConfig:
    base_channels: int = 16
    input_size: int = 512
    dropout_p: float = 0.6

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValidationError(f"base_channels must be >= 1, got {self.base_channels}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.input_size < 8 or self.input_size % 8:
            raise ValidationError(f"input_size must be a positive multiple of 8, got {self.input_size}")


class CnnOutputs(NamedTuple):
    skips: list[torch.Tensor]  # scales 1, 1/2, 1/4
    deep: torch.Tensor  # scale 1/8
    aux_prob: torch.Tensor  # B x 1 x S x S


class ConvReluBN(nn.Sequential):
    """3x3 conv, ReLU, then batch norm (activation before normalisation)."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.ReLU(inplace=False),
            nn.BatchNorm2d(out_ch),
        )


class ResidualStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, n_convs: int):
        super().__init__()
        self.convs = nn.ModuleList(
            [ConvReluBN(in_ch if i == 0 else out_ch, out_ch) for i in range(n_convs)]
        )

    def forward(self, x):
        first = x = self.convs[0](x)
        for conv in self.convs[1:]:
            x = conv(x)
        return x + first


class CnnEncoder(nn.Module):
    def __init__(self, config: CnnConfig = CnnConfig()):
        super().__init__()
        self.config = config
        c = config.base_channels
        widths = [c, 2 * c, 4 * c, 8 * c]
        self.stages = nn.ModuleList([
            ResidualStage(1, widths[0], 2),
            ResidualStage(widths[0], widths[1], 2),
            ResidualStage(widths[1], widths[2], 3),
            ResidualStage(widths[2], widths[3], 3),
        ])
        self.pools = nn.ModuleList([nn.MaxPool2d(2) for _ in range(3)])
        self.dropout = nn.Dropout(config.dropout_p)
        self.sides = nn.ModuleList([ConvReluBN(w, c) for w in widths[1:]])
        self.fuse = nn.Conv2d(4 * c, 1, 3, padding=1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def check_input(self, x: torch.Tensor):
        if x.dim() != 4:
            raise ShapeError(f"expected a B x 1 x S x S batch, got {x.dim()} dimensions {tuple(x.shape)}")
        if x.shape[1] != 1:
            raise ShapeError(f"channel dimension must be 1, got {x.shape[1]}")
        for name, size in (("height", x.shape[2]), ("width", x.shape[3])):
            if size % 8 or size == 0:
                raise ShapeError(f"{name} {size} is not divisible by 8")

    def forward(self, x: torch.Tensor) -> CnnOutputs:
        self.check_input(x)
        size = x.shape[-2:]
        feats = []
        h = x
        for i, stage in enumerate(self.stages):
            if i:
                h = self.pools[i - 1](h)
            h = stage(h)
            feats.append(h)
        skips = [self.dropout(f) for f in feats[:3]]
        deep = feats[3]
        side_maps = [skips[0]]
        for side, f in zip(self.sides, [skips[1], skips[2], deep]):
            up = F.interpolate(f, size=size, mode="bilinear", align_corners=False)
            side_maps.append(side(up))
        aux_prob = torch.sigmoid(self.fuse(torch.cat(side_maps, dim=1)))
        return CnnOutputs(skips, deep, aux_prob)


def build_cnn(config: CnnConfig = CnnConfig(), seed: int | None = None) -> CnnEncoder:
    if seed is None:
        return CnnEncoder(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return CnnEncoder(config)


def count_layers(module: nn.Module, kind: type) -> int:
    return sum(isinstance(m, kind) for m in module.modules())


def param_count(params: nn.Module | Iterable[torch.Tensor]) -> int:
    """Number of trainable scalars."""
    if isinstance(params, nn.Module):
        params = params.parameters()
    return sum(p.numel() for p in params if p.requires_grad)


def unet_reference_param_count(base_channels: int = 64, in_channels: int = 1, out_channels: int = 1, depth: int = 4) -> int:
    """Closed-form parameter count of the classic U-Net.

    Double 3x3 convs (with bias, no batch norm) per level, 2x2 transposed
    convs for upsampling and a final 1x1 conv.
    """
    def conv(k, cin, cout):
        return k * k * cin * cout + cout

    widths = [base_channels * 2 ** i for i in range(depth + 1)]
    total = 0
    cin = in_channels
    for w in widths:
        total += conv(3, cin, w) + conv(3, w, w)
        cin = w
    for deep, shallow in zip(widths[:0:-1], widths[-2::-1]):
        total += conv(2, deep, shallow)
        total += conv(3, 2 * shallow, shallow) + conv(3, shallow, shallow)
    return total + conv(1, widths[0], out_channels)
