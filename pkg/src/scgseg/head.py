"""Fusion head: graph features back onto the grid, merged with CNN skips."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class HeadConfig:
    fuse_channels: int = 16
    dropout_p: float = 0.6
    threshold: float = 0.5

    def __post_init__(self):
        if self.fuse_channels < 1:
            raise ValidationError(f"fuse_channels must be >= 1, got {self.fuse_channels}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(f"threshold must lie in (0, 1), got {self.threshold}")


def nodes_to_grid(Z: torch.Tensor, node_grid: tuple[int, int]) -> torch.Tensor:
    """B x n x c -> B x c x h x w; inverse of the row-major node flattening."""
    gh, gw = node_grid
    b, n, c = Z.shape
    if n != gh * gw:
        raise ShapeError(f"{n} nodes cannot fill a {gh}x{gw} grid")
    return Z.transpose(1, 2).reshape(b, c, gh, gw)


class FusionStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, dropout_p: float):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.dropout = nn.Dropout(dropout_p)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = torch.relu(self.conv(torch.cat([x, skip], dim=1)))
        return self.dropout(x)


class InferenceHead(nn.Module):
    """Three upsample/concatenate/convolve stages, then 1x1 conv and sigmoid.

    ``skip_channels`` lists the CNN skip widths shallowest first; skips are
    consumed deepest first so each stage doubles the spatial size.
    """

    def __init__(self, graph_channels: int, skip_channels: list[int], config: HeadConfig = HeadConfig()):
        super().__init__()
        self.config = config
        fc = config.fuse_channels
        in_chs = [graph_channels] + [fc, fc]
        self.stages = nn.ModuleList([
            FusionStage(cin + skip, fc, config.dropout_p)
            for cin, skip in zip(in_chs, skip_channels[::-1])
        ])
        self.out = nn.Conv2d(fc, 1, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, graph_map: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        if len(skips) != len(self.stages):
            raise ShapeError(f"expected {len(self.stages)} skips, got {len(skips)}")
        deepest = skips[-1].shape[-2:]
        target = (deepest[0] // 2, deepest[1] // 2)
        if tuple(graph_map.shape[-2:]) != target:
            if graph_map.shape[-2] > target[0] or graph_map.shape[-1] > target[1]:
                raise ShapeError(
                    f"graph map {tuple(graph_map.shape[-2:])} is finer than the 1/8 scale {target}"
                )
            graph_map = F.interpolate(graph_map, size=target, mode="bilinear", align_corners=False)
        x = graph_map
        for i, (stage, skip) in enumerate(zip(self.stages, skips[::-1])):
            want = (2 * x.shape[-2], 2 * x.shape[-1])
            if tuple(skip.shape[-2:]) != want:
                raise ShapeError(f"fusion stage {i + 1}: skip size {tuple(skip.shape[-2:])} != expected {want}")
            x = stage(x, skip)
        return torch.sigmoid(self.out(x))


def predict_mask(prob_map: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Binarise a B x 1 x S x S probability map into B x S x S (prob >= threshold)."""
    mask = (prob_map >= threshold).to(torch.uint8)
    return mask[:, 0] if mask.dim() == 4 else mask
