"""Probabilistic projection of a diagonal-Gaussian prediction onto a set
of linear equality constraints.

Conditioning the joint Gaussian over (prediction, constraint residual)
on a zero residual is closed form:

    S    = B diag(var_P) B^T + diag(r)
    K    = diag(var_P) B^T S^{-1}
    mu_C = mu_P + K (b - A x - B mu_P)
    var_C = var_P - diag(K S K^T)

Only the diagonal of the conditioned covariance is kept. The whole map
is differentiable in (mu_P, var_P, r), which the training objective
relies on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch

from .errors import ConditioningError, ContractError
from .gaussian import DiagGaussian, as_tensor

RANK_TOL = 1e-10
JITTER_SCALE = 1e-12
VAR_FLOOR = 1e-30


@dataclass(frozen=True)
class ConstraintSystem:
    """m linear equalities A x + B y = b over inputs x and outputs y.

    B must have full row rank, checked at construction against the
    singular-value ratio threshold ``RANK_TOL``. Immutable.
    """

    A: torch.Tensor
    B: torch.Tensor
    b: torch.Tensor

    def __post_init__(self):
        A = as_tensor(self.A)
        B = as_tensor(self.B)
        b = as_tensor(self.b)
        if A.ndim != 2 or B.ndim != 2 or b.ndim != 1:
            raise ContractError("A and B must be matrices, b a vector")
        m = B.shape[0]
        if A.shape[0] != m or b.shape[0] != m:
            raise ContractError("A, B, b must agree on the number of constraints")
        if m < 1:
            raise ContractError("at least one constraint is required")
        if m > B.shape[1]:
            raise ContractError("more constraints than outputs (m > n_y)")
        sv = torch.linalg.svdvals(B)
        if sv[-1] <= RANK_TOL * sv[0]:
            raise ContractError("B is rank deficient (full row rank required)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "b", b)

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def n_x(self) -> int:
        return self.A.shape[1]

    @property
    def n_y(self) -> int:
        return self.B.shape[1]

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "B": self.B.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSystem":
        return cls(A=d["A"], B=d["B"], b=d["b"])

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_json(cls, path) -> "ConstraintSystem":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class ToleranceVector:
    """Per-constraint residual variances r, strictly positive."""

    r: torch.Tensor

    def __post_init__(self):
        r = as_tensor(self.r)
        if r.shape[-1] < 1:
            raise ContractError("tolerance vector must be nonempty")
        if not bool((r > 0).all()):
            raise ContractError("tolerances must be strictly positive")
        object.__setattr__(self, "r", r)


@dataclass(frozen=True)
class ConditionedPrediction:
    """Result of one conditioning step.

    ``residual`` holds b - A x - B mu_P (the innovation fed through the
    gain); ``schur`` the factor S actually used (jitter included).
    """

    prior: DiagGaussian
    posterior: DiagGaussian
    gain: torch.Tensor
    schur: torch.Tensor
    residual: torch.Tensor


def residual(cs: ConstraintSystem, x, y) -> torch.Tensor:
    """Constraint residual A x + B y - b, shape (..., m)."""
    x = as_tensor(x)
    y = as_tensor(y)
    if x.shape[-1] != cs.n_x:
        raise ContractError(f"x has dimension {x.shape[-1]}, expected {cs.n_x}")
    if y.shape[-1] != cs.n_y:
        raise ContractError(f"y has dimension {y.shape[-1]}, expected {cs.n_y}")
    return (
        torch.einsum("mk,...k->...m", cs.A, x)
        + torch.einsum("mk,...k->...m", cs.B, y)
        - cs.b
    )


def violation_magnitude(cs: ConstraintSystem, x, y) -> torch.Tensor:
    """Absolute residual per constraint, shape (..., m)."""
    return residual(cs, x, y).abs()


def _factorize(S: torch.Tensor):
    """Cholesky with one jitter retry; raises ConditioningError on the
    second failure. Returns (L, S_used) where S_used includes any jitter."""
    L, info = torch.linalg.cholesky_ex(S)
    if not bool((info != 0).any()):
        return L, S
    m = S.shape[-1]
    trace = S.diagonal(dim1=-2, dim2=-1).sum(-1)
    jitter = JITTER_SCALE * trace / m
    eye = torch.eye(m, dtype=S.dtype)
    S = S + jitter[..., None, None] * eye
    L, info = torch.linalg.cholesky_ex(S)
    if bool((info != 0).any()):
        raise ConditioningError("Schur factor is numerically singular after jitter")
    return L, S


def condition(
    prior: DiagGaussian,
    cs: ConstraintSystem,
    x,
    tol: ToleranceVector,
) -> ConditionedPrediction:
    """Condition a diagonal-Gaussian prediction on zero constraint
    residual with tolerance variances ``tol``.

    Supports leading batch dimensions on ``prior`` / ``x`` / ``tol.r``
    (broadcast against each other); the constraint system is shared.
    """
    x = as_tensor(x)
    if prior.dim != cs.n_y:
        raise ContractError(f"prior has dimension {prior.dim}, expected {cs.n_y}")
    if x.shape[-1] != cs.n_x:
        raise ContractError(f"x has dimension {x.shape[-1]}, expected {cs.n_x}")
    r = tol.r
    if r.shape[-1] != cs.m:
        raise ContractError(f"tolerance has {r.shape[-1]} entries, expected {cs.m}")

    var_p = prior.var
    # C = B diag(var_P), shape (..., m, n_y)
    C = cs.B * var_p[..., None, :]
    S = C @ cs.B.transpose(0, 1) + torch.diag_embed(r)
    L, S = _factorize(S)

    # X = S^{-1} C = K^T, shape (..., m, n_y)
    X = torch.cholesky_solve(C, L)
    K = X.transpose(-1, -2)

    innov = cs.b - torch.einsum("mk,...k->...m", cs.A, x) - torch.einsum(
        "mk,...k->...m", cs.B, prior.mean
    )
    mu_c = prior.mean + torch.einsum("...ym,...m->...y", K, innov)

    # diag(K S K^T) = diag(C^T S^{-1} C) = sum_m C * X
    reduction = (C * X).sum(dim=-2)
    var_c = torch.clamp(var_p - reduction, min=VAR_FLOOR)

    return ConditionedPrediction(
        prior=prior,
        posterior=DiagGaussian(mu_c, var_c),
        gain=K,
        schur=S,
        residual=innov,
    )
