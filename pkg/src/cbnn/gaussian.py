"""Diagonal-Gaussian primitives.

Every distribution in the package -- predictive heads, variational
posteriors, priors -- is a diagonal Gaussian, so log-density, KL,
entropy and reparameterized sampling live here and everything else
delegates.

All tensors are double precision. Leading batch dimensions are allowed;
the distribution dimension is always the last axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ContractError

DTYPE = torch.float64

_LOG_2PI = math.log(2.0 * math.pi)


def as_tensor(x) -> torch.Tensor:
    """Convert array-likes to a float64 tensor without copying tensors
    that already have the right dtype."""
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True)
class DiagGaussian:
    """Mean vector plus per-dimension variance vector, shape (..., d).

    Variances must be strictly positive; positivity transforms (softplus,
    exp) are the responsibility of whoever builds the instance.
    """

    mean: torch.Tensor
    var: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "mean", as_tensor(self.mean))
        object.__setattr__(self, "var", as_tensor(self.var))
        if self.mean.shape != self.var.shape:
            raise ContractError(
                f"mean shape {tuple(self.mean.shape)} != var shape {tuple(self.var.shape)}"
            )
        if not bool((self.var > 0).all()):
            raise ContractError("all variances must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> torch.Tensor:
        return torch.sqrt(self.var)


def _check_dim(g: DiagGaussian, y: torch.Tensor, name: str = "y"):
    if y.shape[-1] != g.dim:
        raise ContractError(f"{name} has dimension {y.shape[-1]}, expected {g.dim}")


def log_density(g: DiagGaussian, y) -> torch.Tensor:
    """Log-density of ``y`` under ``g``, summed over the last axis.

    Returns a scalar for unbatched inputs, else a tensor of batch shape.
    """
    y = as_tensor(y)
    _check_dim(g, y)
    quad = (y - g.mean) ** 2 / g.var
    return -0.5 * (quad + torch.log(g.var) + _LOG_2PI).sum(dim=-1)


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over the
    last axis. Nonnegative; zero iff q == p."""
    if q.dim != p.dim:
        raise ContractError(f"dimension mismatch: q has {q.dim}, p has {p.dim}")
    ratio = q.var / p.var
    terms = ratio + (p.mean - q.mean) ** 2 / p.var - 1.0 - torch.log(ratio)
    return 0.5 * terms.sum(dim=-1)


def entropy(g: DiagGaussian) -> torch.Tensor:
    """Differential entropy, summed over the last axis."""
    return 0.5 * (torch.log(g.var) + _LOG_2PI + 1.0).sum(dim=-1)


def sample_reparam(g: DiagGaussian, eps) -> torch.Tensor:
    """Reparameterized sample mean + sqrt(var) * eps.

    ``eps`` is external standard-normal noise, so the result is a
    differentiable function of (mean, var) for fixed eps.
    """
    eps = as_tensor(eps)
    _check_dim(g, eps, "eps")
    return g.mean + torch.sqrt(g.var) * eps
