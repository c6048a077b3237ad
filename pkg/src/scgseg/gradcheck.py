"""Central finite differences against autograd."""

from __future__ import annotations

from typing import Callable, Sequence

import torch


def numerical_grad(f: Callable[[], torch.Tensor], x: torch.Tensor, eps: float = 1e-5,
                   indices: Sequence[int] | None = None) -> torch.Tensor:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    Returns a flat tensor over ``indices`` (all entries when omitted).
    """
    flat = x.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    out = torch.empty(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = float(f())
            flat[i] = orig - eps
            minus = float(f())
            flat[i] = orig
            out[k] = (plus - minus) / (2 * eps)
    return out


def analytic_grad(f: Callable[[], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    x.grad = None
    (g,) = torch.autograd.grad(f(), x)
    return g.reshape(-1).double()


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor, floor_ratio: float = 1e-3) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``floor_ratio`` times the largest gradient magnitude, so
    entries several orders below the peak are judged on the peak's scale.
    """
    a, n = analytic.double().reshape(-1), numeric.double().reshape(-1)
    scale = torch.maximum(a.abs(), n.abs())
    floor = max(float(scale.max()) * floor_ratio, 1e-300) if scale.numel() else 1.0
    return float(((a - n).abs() / scale.clamp_min(floor)).max()) if a.numel() else 0.0


def check_grad(f: Callable[[], torch.Tensor], x: torch.Tensor, eps: float = 1e-5) -> float:
    """Relative error between autograd and central differences for ``f`` w.r.t. ``x``."""
    return rel_error(analytic_grad(f, x), numerical_grad(f, x, eps))
