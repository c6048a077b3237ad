"""Graph convolution over a dense, learned adjacency."""

from __future__ import annotations

from typing import Callable

import torch
from torch import nn

from .errors import ShapeError, ValidationError

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": torch.relu,
    "identity": lambda x: x,
    "none": lambda x: x,
}


def normalize_adjacency(A: torch.Tensor, literal: bool = False) -> torch.Tensor:
    """Symmetric degree normalisation ``D^-1/2 (A + I) D^-1/2``.

    ``D_ii = sum_j (A + I)_ij``. With ``literal=True`` the right factor is
    ``D^+1/2`` instead, which is not symmetric and kept only for comparison.
    Works on n x n or batched ... x n x n input.
    """
    n = A.shape[-1]
    if A.shape[-2] != n:
        raise ShapeError(f"adjacency must be square, got {tuple(A.shape[-2:])}")
    if (A < 0).any():
        raise ValidationError("adjacency has negative entries")
    A_hat = A + torch.eye(n, dtype=A.dtype, device=A.device)
    deg = A_hat.sum(-1)
    left = deg.rsqrt()
    right = deg.sqrt() if literal else left
    return left[..., :, None] * A_hat * right[..., None, :]


def gcn_forward(A_norm: torch.Tensor, Z: torch.Tensor, weight: torch.Tensor,
                bias: torch.Tensor | None = None, activation="relu") -> torch.Tensor:
    """``act(A_norm @ Z @ weight + bias)``."""
    if A_norm.shape[-1] != Z.shape[-2]:
        raise ShapeError(f"adjacency size {A_norm.shape[-1]} != node count {Z.shape[-2]}")
    if Z.shape[-1] != weight.shape[0]:
        raise ShapeError(f"feature size {Z.shape[-1]} != weight rows {weight.shape[0]}")
    act = ACTIVATIONS[activation] if isinstance(activation, str) else activation
    out = A_norm @ Z @ weight
    if bias is not None:
        out = out + bias
    return act(out)


class GraphConvolution(nn.Module):
    def __init__(self, in_features: int, out_features: int, activation="relu", bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_features, out_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        if isinstance(activation, str) and activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {activation!r}")
        self.activation = activation
        nn.init.xavier_uniform_(self.weight)

    def forward(self, A_norm: torch.Tensor, Z: torch.Tensor) -> torch.Tensor:
        return gcn_forward(A_norm, Z, self.weight, self.bias, self.activation)

    def extra_repr(self):
        return f"{self.weight.shape[0]}, {self.weight.shape[1]}, activation={self.activation}"
