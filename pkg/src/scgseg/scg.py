"""Self-constructing graph: variational node embedding and learned adjacency.

The feature map is pooled to a node grid, encoded into a mean and log standard
deviation per node, sampled with the reparameterisation trick, and decoded
into a non-negative adjacency ``relu(Z Z^T)``. Two regularisers come out
alongside the graph: a KL-style term on the latent distribution and a
diagonal-log term pushing node self-similarity towards 1.

Symbols: ``noise`` is the standard-normal draw used for sampling and
``adaptive_factor`` is the scalar ``sqrt(1 + n / (trace(A) + eps))`` that
weights both the diagonal-log term and the diagonal enhancement.

The KL term keeps the squared log-sigma form ``1 + log(sigma)^2 - mu^2 -
sigma^2`` rather than the textbook ``1 + log(sigma^2) - mu^2 - sigma^2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, ValidationError

LOG_SIGMA_RANGE = (-10.0, 10.0)


@dataclass(frozen=True)
class ScgConfig:
    node_grid: tuple[int, int] = (16, 16)
    latent_dim: int = 128
    epsilon: float = 1e-7

    def __post_init__(self):
        object.__setattr__(self, "node_grid", tuple(int(v) for v in self.node_grid))
        if len(self.node_grid) != 2 or min(self.node_grid) < 1:
            raise ValidationError(f"node_grid must be two positive integers, got {self.node_grid}")
        if self.latent_dim < 1:
            raise ValidationError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def n_nodes(self) -> int:
        return self.node_grid[0] * self.node_grid[1]


class GraphState(NamedTuple):
    Z: torch.Tensor  # B x n x c
    A: torch.Tensor  # B x n x n, enhanced
    kl_loss: torch.Tensor
    dl_loss: torch.Tensor
    adaptive_factor: torch.Tensor  # B
    M: torch.Tensor
    log_sigma: torch.Tensor
    A_raw: torch.Tensor


def pool_features(F_map: torch.Tensor, node_grid: tuple[int, int]) -> torch.Tensor:
    h, w = F_map.shape[-2:]
    gh, gw = node_grid
    if gh > h or gw > w:
        raise ValidationError(f"node grid {gh}x{gw} is larger than the feature map {h}x{w}")
    return F.adaptive_avg_pool2d(F_map, (gh, gw))


def grid_to_nodes(x: torch.Tensor) -> torch.Tensor:
    """B x c x h x w -> B x (h*w) x c, row-major over spatial positions."""
    b, c = x.shape[:2]
    return x.reshape(b, c, -1).transpose(1, 2)


def reparameterize(M: torch.Tensor, log_sigma: torch.Tensor, noise: torch.Tensor | None = None) -> torch.Tensor:
    """``M + exp(log_sigma) * noise``; plain ``M`` when noise is absent (eval)."""
    if M.shape != log_sigma.shape:
        raise ShapeError(f"M shape {tuple(M.shape)} != log_sigma shape {tuple(log_sigma.shape)}")
    if noise is None:
        return M
    if noise.shape != M.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(M.shape)}")
    return M + torch.exp(log_sigma) * noise


def kl_loss(M: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """-(1/2nc) sum(1 + log_sigma^2 - M^2 - sigma^2), averaged over the batch.

    Accepts n x c or B x n x c inputs.
    """
    if M.shape != log_sigma.shape:
        raise ShapeError(f"M shape {tuple(M.shape)} != log_sigma shape {tuple(log_sigma.shape)}")
    terms = 1 + log_sigma ** 2 - M ** 2 - torch.exp(2 * log_sigma)
    return -0.5 * terms.mean(dim=(-2, -1)).mean()


def build_adjacency(Z: torch.Tensor) -> torch.Tensor:
    return torch.relu(Z @ Z.transpose(-2, -1))


def diagonal_log_loss(A_raw: torch.Tensor, epsilon: float = 1e-7) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (batch-mean diagonal-log loss, per-graph adaptive factor)."""
    n = A_raw.shape[-1]
    if A_raw.shape[-2] != n:
        raise ShapeError(f"adjacency must be square, got {tuple(A_raw.shape[-2:])}")
    diag = torch.diagonal(A_raw, dim1=-2, dim2=-1)
    factor = torch.sqrt(1 + n / (diag.sum(-1) + epsilon))
    logs = torch.log(diag.clamp(0.0, 1.0) + epsilon).sum(-1)
    dl = -(factor / n ** 2) * logs
    return dl.mean(), factor


def enhance_adjacency(A_raw: torch.Tensor, adaptive_factor: torch.Tensor) -> torch.Tensor:
    """Add ``factor * diag(A_raw)``; off-diagonal entries are untouched."""
    factor = torch.as_tensor(adaptive_factor, dtype=A_raw.dtype, device=A_raw.device)
    diag = torch.diag_embed(torch.diagonal(A_raw, dim1=-2, dim2=-1))
    return A_raw + factor[..., None, None] * diag


class SelfConstructingGraph(nn.Module):
    def __init__(self, in_channels: int, config: ScgConfig = ScgConfig()):
        super().__init__()
        self.config = config
        self.in_channels = in_channels
        self.mean_conv = nn.Conv2d(in_channels, config.latent_dim, 3, padding=1)
        self.log_sigma_conv = nn.Conv2d(in_channels, config.latent_dim, 1)
        # start at unit sigma; exp() of a random-init head overflows the KL term
        nn.init.zeros_(self.log_sigma_conv.weight)
        nn.init.zeros_(self.log_sigma_conv.bias)

    def encode_latent(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if pooled.dim() != 4 or pooled.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected B x {self.in_channels} x h x w pooled features, got {tuple(pooled.shape)}"
            )
        if tuple(pooled.shape[-2:]) != self.config.node_grid:
            raise ShapeError(f"pooled grid {tuple(pooled.shape[-2:])} != node grid {self.config.node_grid}")
        M = grid_to_nodes(self.mean_conv(pooled))
        log_sigma = grid_to_nodes(self.log_sigma_conv(pooled)).clamp(*LOG_SIGMA_RANGE)
        return M, log_sigma

    def forward(self, F_map: torch.Tensor, noise_seed: int | None = None,
                generator: torch.Generator | None = None) -> GraphState:
        pooled = pool_features(F_map, self.config.node_grid)
        M, log_sigma = self.encode_latent(pooled)
        noise = None
        if self.training:
            if generator is None and noise_seed is not None:
                generator = torch.Generator(device=M.device).manual_seed(noise_seed)
            noise = torch.randn(M.shape, generator=generator, dtype=M.dtype, device=M.device)
        Z = reparameterize(M, log_sigma, noise)
        A_raw = build_adjacency(Z)
        dl, factor = diagonal_log_loss(A_raw, self.config.epsilon)
        A = enhance_adjacency(A_raw, factor)
        return GraphState(Z, A, kl_loss(M, log_sigma), dl, factor, M, log_sigma, A_raw)


def scg_forward(F_map: torch.Tensor, params: SelfConstructingGraph, config: ScgConfig | None = None,
                train_mode: bool = False, noise_seed: int | None = None) -> GraphState:
    """Functional entry point; restores the module's previous mode."""
    if config is not None and config != params.config:
        raise ValidationError("config does not match the SCG module's config")
    was_training = params.training
    params.train(train_mode)
    try:
        return params(F_map, noise_seed=noise_seed)
    finally:
        params.train(was_training)
