"""Segmentation objectives, evaluation metrics and the composite loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

from .errors import ConfigError, ShapeError, ValidationError
from .scg import GraphState

OBJECTIVES = ("dice", "bce", "dice_bce", "focal_tversky")
BCE_CLAMP = 1e-7


@dataclass
class LossConfig:
    objective: str = "dice_bce"
    tversky_beta: float = 0.7
    focal_gamma: float = 4.0 / 3.0
    kl_weight: float = 1.0
    dl_weight: float = 1.0
    aux_supervision_weight: float = 0.3
    smooth: float = 1.0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if not 0.0 < self.tversky_beta < 1.0:
            raise ConfigError(f"tversky_beta must lie in (0, 1), got {self.tversky_beta}")
        if not 1.0 <= self.focal_gamma <= 3.0:
            raise ConfigError(f"focal_gamma must lie in [1, 3], got {self.focal_gamma}")
        for name in ("kl_weight", "dl_weight", "aux_supervision_weight", "smooth"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")


class LossBundle(NamedTuple):
    primary: torch.Tensor
    kl: torch.Tensor
    dl: torch.Tensor
    aux: torch.Tensor
    total: torch.Tensor


def _check(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")


def dice_coefficient(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft dice ``(2 sum(pq) + s) / (sum(p) + sum(q) + s)`` over the flattened maps."""
    _check(pred, target)
    p, q = pred.reshape(-1), target.reshape(-1).to(pred.dtype)
    return (2 * (p * q).sum() + smooth) / (p.sum() + q.sum() + smooth)


def dice_loss(pred, target, smooth: float = 1.0):
    return 1 - dice_coefficient(pred, target, smooth)


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check(pred, target)
    p = pred.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    y = target.to(pred.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def tversky_index(pred: torch.Tensor, target: torch.Tensor, beta: float = 0.7, smooth: float = 1.0) -> torch.Tensor:
    """``TP / (TP + (1-beta) FN + beta FP)`` with soft counts; beta weights false positives.

    Smoothing enters the doubled form ``(2TP + s) / (2TP + 2(1-beta)FN +
    2 beta FP + s)`` so that beta = 0.5 reproduces :func:`dice_coefficient`
    for every ``s``; at ``s = 0`` both forms agree.
    """
    if not 0.0 < beta < 1.0:
        raise ValidationError(f"beta must lie in (0, 1), got {beta}")
    _check(pred, target)
    p, y = pred.reshape(-1), target.reshape(-1).to(pred.dtype)
    tp = (p * y).sum()
    fn = ((1 - p) * y).sum()
    fp = (p * (1 - y)).sum()
    return (2 * tp + smooth) / (2 * tp + 2 * (1 - beta) * fn + 2 * beta * fp + smooth)


def focal_tversky_loss(pred, target, beta: float = 0.7, gamma: float = 4.0 / 3.0, smooth: float = 1.0):
    if not 1.0 <= gamma <= 3.0:
        raise ValidationError(f"gamma must lie in [1, 3], got {gamma}")
    ti = tversky_index(pred, target, beta, smooth)
    # rounding can leave TI a hair above 1; a negative base breaks fractional powers
    return (1 - ti).clamp_min(0) ** gamma


def hard_dice(pred_mask: torch.Tensor, target: torch.Tensor) -> float:
    """Confusion-count dice ``2TP / (2TP + FP + FN)``; 1.0 when both masks are empty."""
    _check(pred_mask, target)
    p = pred_mask.reshape(-1).bool()
    y = target.reshape(-1).bool()
    tp = (p & y).sum().item()
    fp = (p & ~y).sum().item()
    fn = (~p & y).sum().item()
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def primary_loss(pred, target, config: LossConfig) -> torch.Tensor:
    if config.objective == "dice":
        return dice_loss(pred, target, config.smooth)
    if config.objective == "bce":
        return bce_loss(pred, target)
    if config.objective == "dice_bce":
        return dice_loss(pred, target, config.smooth) + bce_loss(pred, target)
    if config.objective == "focal_tversky":
        return focal_tversky_loss(pred, target, config.tversky_beta, config.focal_gamma, config.smooth)
    raise ConfigError(f"unknown objective {config.objective!r}")


def composite_loss(prob_map, aux_prob, graph_state: GraphState | None, target, config: LossConfig) -> LossBundle:
    primary = primary_loss(prob_map, target, config)
    zero = prob_map.new_zeros(())
    kl = graph_state.kl_loss if graph_state is not None else zero
    dl = graph_state.dl_loss if graph_state is not None else zero
    aux = bce_loss(aux_prob, target) if aux_prob is not None else zero
    total = primary + config.kl_weight * kl + config.dl_weight * dl + config.aux_supervision_weight * aux
    return LossBundle(primary, kl, dl, aux, total)
