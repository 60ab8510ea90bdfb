"""Bayesian MLP with a diagonal-Gaussian output head, plus the
mean-field variational state over its weights and over the log-scale
constraint tolerances.

The network is evaluated functionally: weights arrive as a flat vector
(one reparameterized posterior draw), so the same code serves sampling,
gradient checks and deterministic evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .conditioning import ToleranceVector
from .errors import ContractError
from .gaussian import DTYPE, DiagGaussian, as_tensor, sample_reparam

VAR_HEAD_FLOOR = 1e-6
_ACTIVATIONS = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "silu": F.silu,
}


@dataclass(frozen=True)
class NetworkArchitecture:
    """MLP shape. The head emits 2 * output_dim raw values: means first,
    then pre-softplus variances."""

    input_dim: int
    output_dim: int
    hidden_layers: tuple = (64, 64)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ContractError("input_dim and output_dim must be positive")
        if any(h < 1 for h in self.hidden_layers):
            raise ContractError("hidden layer widths must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list:
        """(fan_in, fan_out) per affine layer, head included."""
        widths = [self.input_dim, *self.hidden_layers, 2 * self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_layers": list(self.hidden_layers),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkArchitecture":
        return cls(
            input_dim=int(d["input_dim"]),
            output_dim=int(d["output_dim"]),
            hidden_layers=tuple(d["hidden_layers"]),
            activation=d["activation"],
        )


def _split_layers(arch: NetworkArchitecture, theta: torch.Tensor):
    """Yield (W, b) per layer from flat theta; supports a leading draw
    axis on theta."""
    batch = theta.shape[:-1]
    idx = 0
    for fi, fo in arch.layer_dims:
        W = theta[..., idx : idx + fi * fo].reshape(*batch, fo, fi)
        idx += fi * fo
        b = theta[..., idx : idx + fo]
        idx += fo
        yield W, b


def forward(arch: NetworkArchitecture, theta, x) -> DiagGaussian:
    """Evaluate the network for one weight vector.

    ``x`` may carry leading batch dimensions; ``theta`` may carry one
    leading draw dimension (then outputs broadcast to draws x batch).
    Variance is softplus of the raw head plus a 1e-6 floor.
    """
    theta = as_tensor(theta)
    x = as_tensor(x)
    if theta.shape[-1] != arch.n_params:
        raise ContractError(
            f"theta has {theta.shape[-1]} entries, expected {arch.n_params}"
        )
    if x.shape[-1] != arch.input_dim:
        raise ContractError(
            f"x has dimension {x.shape[-1]}, expected {arch.input_dim}"
        )
    act = _ACTIVATIONS[arch.activation]
    layers = list(_split_layers(arch, theta))

    theta_batched = theta.ndim > 1
    if theta.ndim > 2:
        raise ContractError("theta supports at most one leading draw dimension")
    x_batch_shape = x.shape[:-1]
    # canonical shapes: theta (D, n_theta), x (N, n_x), hidden h (D, N, *)
    h = x.reshape(-1, arch.input_dim)
    D = theta.shape[0] if theta_batched else 1
    h = h.unsqueeze(0).expand(D, h.shape[0], -1)
    for i, (W, b) in enumerate(layers):
        W2 = W if theta_batched else W.unsqueeze(0)
        b2 = b if theta_batched else b.unsqueeze(0)
        h = torch.einsum("dof,dnf->dno", W2, h) + b2.unsqueeze(1)
        if i < len(layers) - 1:
            h = act(h)
    out_width = h.shape[-1]
    if theta_batched:
        h = h.reshape(D, *x_batch_shape, out_width)
    else:
        h = h.reshape(*x_batch_shape, out_width)
    n_y = arch.output_dim
    mean = h[..., :n_y]
    var = F.softplus(h[..., n_y:]) + VAR_HEAD_FLOOR
    return DiagGaussian(mean, var)


def _softplus_inv(v: float) -> float:
    return math.log(math.expm1(v))


@dataclass
class VariationalState:
    """Mean-field Gaussian posteriors over the flat weight vector and,
    when constraints are present, over the m log-tolerances rho.

    Variances are parameterized as softplus of unconstrained tensors so
    the optimizer works in an unconstrained space. ``rho_*`` tensors are
    None for the unconstrained (plain BNN) variant.
    """

    arch: NetworkArchitecture
    theta_mean: torch.Tensor
    theta_raw: torch.Tensor
    rho_mean: torch.Tensor | None = None
    rho_raw: torch.Tensor | None = None
    rho_prior_mean: torch.Tensor | None = None
    rho_prior_var: torch.Tensor | None = None

    @property
    def has_tolerance(self) -> bool:
        return self.rho_mean is not None

    @property
    def n_theta(self) -> int:
        return self.theta_mean.shape[0]

    @property
    def m(self) -> int:
        return 0 if self.rho_mean is None else self.rho_mean.shape[0]

    @property
    def theta_q(self) -> DiagGaussian:
        return DiagGaussian(self.theta_mean, F.softplus(self.theta_raw))

    @property
    def rho_q(self) -> DiagGaussian:
        if not self.has_tolerance:
            raise ContractError("state has no tolerance posterior")
        return DiagGaussian(self.rho_mean, F.softplus(self.rho_raw))

    @property
    def theta_prior(self) -> DiagGaussian:
        n = self.n_theta
        return DiagGaussian(torch.zeros(n, dtype=DTYPE), torch.ones(n, dtype=DTYPE))

    @property
    def rho_prior(self) -> DiagGaussian:
        if not self.has_tolerance:
            raise ContractError("state has no tolerance prior")
        return DiagGaussian(self.rho_prior_mean, self.rho_prior_var)

    def parameters(self) -> list:
        ps = [self.theta_mean, self.theta_raw]
        if self.has_tolerance:
            ps += [self.rho_mean, self.rho_raw]
        return ps

    def clone(self) -> "VariationalState":
        return VariationalState(
            arch=self.arch,
            theta_mean=self.theta_mean.detach().clone().requires_grad_(True),
            theta_raw=self.theta_raw.detach().clone().requires_grad_(True),
            rho_mean=None if self.rho_mean is None else self.rho_mean.detach().clone().requires_grad_(True),
            rho_raw=None if self.rho_raw is None else self.rho_raw.detach().clone().requires_grad_(True),
            rho_prior_mean=None if self.rho_prior_mean is None else self.rho_prior_mean.clone(),
            rho_prior_var=None if self.rho_prior_var is None else self.rho_prior_var.clone(),
        )

    def to_dict(self) -> dict:
        d = {
            "arch": self.arch.to_dict(),
            "theta_mean": self.theta_mean.detach().tolist(),
            "theta_raw": self.theta_raw.detach().tolist(),
        }
        if self.has_tolerance:
            d["rho_mean"] = self.rho_mean.detach().tolist()
            d["rho_raw"] = self.rho_raw.detach().tolist()
            d["rho_prior_mean"] = self.rho_prior_mean.tolist()
            d["rho_prior_var"] = self.rho_prior_var.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariationalState":
        has_rho = "rho_mean" in d
        return cls(
            arch=NetworkArchitecture.from_dict(d["arch"]),
            theta_mean=as_tensor(d["theta_mean"]).requires_grad_(True),
            theta_raw=as_tensor(d["theta_raw"]).requires_grad_(True),
            rho_mean=as_tensor(d["rho_mean"]).requires_grad_(True) if has_rho else None,
            rho_raw=as_tensor(d["rho_raw"]).requires_grad_(True) if has_rho else None,
            rho_prior_mean=as_tensor(d["rho_prior_mean"]) if has_rho else None,
            rho_prior_var=as_tensor(d["rho_prior_var"]) if has_rho else None,
        )


def init_variational(
    arch: NetworkArchitecture,
    seed: int,
    n_constraints: int = 0,
    rho_prior_mean: float = -2.0,
    rho_prior_var: float = 1.0,
    init_weight_var: float = 1e-4,
) -> VariationalState:
    """Fresh variational state.

    Weight means are N(0, 1/fan_in) per layer (biases zero); weight
    variational variances start at ``init_weight_var``. The tolerance
    posterior starts at its prior. Deterministic in ``seed``.
    """
    gen = torch.Generator().manual_seed(seed)
    means = []
    for fi, fo in arch.layer_dims:
        W = torch.randn(fo, fi, generator=gen, dtype=DTYPE) / math.sqrt(fi)
        means.append(W.reshape(-1))
        means.append(torch.zeros(fo, dtype=DTYPE))
    theta_mean = torch.cat(means).requires_grad_(True)
    theta_raw = torch.full(
        (arch.n_params,), _softplus_inv(init_weight_var), dtype=DTYPE
    ).requires_grad_(True)

    if n_constraints > 0:
        m = n_constraints
        rho_mean = torch.full((m,), rho_prior_mean, dtype=DTYPE).requires_grad_(True)
        rho_raw = torch.full((m,), _softplus_inv(rho_prior_var), dtype=DTYPE).requires_grad_(True)
        return VariationalState(
            arch=arch,
            theta_mean=theta_mean,
            theta_raw=theta_raw,
            rho_mean=rho_mean,
            rho_raw=rho_raw,
            rho_prior_mean=torch.full((m,), rho_prior_mean, dtype=DTYPE),
            rho_prior_var=torch.full((m,), rho_prior_var, dtype=DTYPE),
        )
    return VariationalState(arch=arch, theta_mean=theta_mean, theta_raw=theta_raw)


def sample_weights(vs: VariationalState, eps) -> torch.Tensor:
    """One reparameterized draw from q(theta)."""
    return sample_reparam(vs.theta_q, eps)


def sample_tolerance(vs: VariationalState, eps) -> ToleranceVector:
    """One reparameterized draw of r = exp(rho), rho ~ q(rho)."""
    rho = sample_reparam(vs.rho_q, eps)
    return ToleranceVector(torch.exp(rho))
