"""Posterior-predictive sampling and the five-term predictive-variance
decomposition.

Every metric here is a Monte Carlo average over joint draws from the
variational posteriors q(theta) and q(rho). For a fixed seed the draw
sequence is deterministic, and ``predict`` / ``decompose`` consume the
identical sequence so their outputs are mutually consistent.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist

import torch

from . import conditioning as cond
from . import model
from .errors import ConditioningError
from .gaussian import DTYPE, DiagGaussian, as_tensor

DEFAULT_DRAW_CHUNK = 256


@dataclass(frozen=True)
class PredictiveSamples:
    """Per-draw conditioned Gaussians for one input, plus pooled mixture
    moments (mean of means; mean variance + variance of means)."""

    mu: torch.Tensor
    var: torch.Tensor
    pooled_mean: torch.Tensor
    pooled_var: torch.Tensor
    n_failed: int


@dataclass(frozen=True)
class VarianceDecomposition:
    """Five-term split of the pooled predictive variance.

    total = aleatoric - constraint_reduction + epistemic
          + tolerance_uncertainty + interaction
    holds on the draw set up to floating-point error; ``std_error`` is
    the per-output Monte Carlo standard error of the total."""

    aleatoric: torch.Tensor
    constraint_reduction: torch.Tensor
    epistemic: torch.Tensor
    tolerance_uncertainty: torch.Tensor
    interaction: torch.Tensor
    total: torch.Tensor
    std_error: torch.Tensor

    def term_sum(self) -> torch.Tensor:
        return (
            self.aleatoric
            - self.constraint_reduction
            + self.epistemic
            + self.tolerance_uncertainty
            + self.interaction
        )


def _sample_joint(vs: model.VariationalState, n: int, generator: torch.Generator):
    """n reparameterized draws of (theta, r); r is None without a
    tolerance posterior."""
    tq = vs.theta_q
    eps_t = torch.randn(n, vs.n_theta, generator=generator, dtype=DTYPE)
    thetas = tq.mean + tq.std * eps_t
    rs = None
    if vs.has_tolerance:
        rq = vs.rho_q
        eps_r = torch.randn(n, vs.m, generator=generator, dtype=DTYPE)
        rs = torch.exp(rq.mean + rq.std * eps_r)
    return thetas, rs


def _condition_chunk(pred: DiagGaussian, cs, x, rs):
    """Condition a chunk of draws, falling back to per-draw handling so
    isolated singular instances are skipped rather than failing the
    whole chunk. Returns (posterior mean, posterior var, ok mask)."""
    n = pred.mean.shape[0]
    try:
        cp = cond.condition(pred, cs, x, cond.ToleranceVector(rs))
        return cp.posterior.mean, cp.posterior.var, torch.ones(n, dtype=torch.bool)
    except ConditioningError:
        mus, vars_, ok = [], [], []
        for i in range(n):
            one = DiagGaussian(pred.mean[i], pred.var[i])
            try:
                cp = cond.condition(one, cs, x, cond.ToleranceVector(rs[i]))
                mus.append(cp.posterior.mean)
                vars_.append(cp.posterior.var)
                ok.append(True)
            except ConditioningError:
                mus.append(pred.mean[i])
                vars_.append(pred.var[i])
                ok.append(False)
        return torch.stack(mus), torch.stack(vars_), torch.tensor(ok)


def _draw_quantities(vs, cs, x, n_samples, seed, chunk=DEFAULT_DRAW_CHUNK):
    """Per-draw (mu_p, var_p, mu_c, var_c) for one input x, with failed
    conditioning draws dropped. cs may be None (no conditioning)."""
    x = as_tensor(x)
    gen = torch.Generator().manual_seed(seed)
    out = {k: [] for k in ("mu_p", "var_p", "mu_c", "var_c")}
    n_failed = 0
    with torch.no_grad():
        remaining = n_samples
        while remaining > 0:
            n = min(chunk, remaining)
            remaining -= n
            thetas, rs = _sample_joint(vs, n, gen)
            pred = model.forward(vs.arch, thetas, x)
            if cs is None:
                mu_c, var_c = pred.mean, pred.var
                mask = torch.ones(n, dtype=torch.bool)
            else:
                mu_c, var_c, mask = _condition_chunk(pred, cs, x, rs)
            n_failed += int((~mask).sum())
            out["mu_p"].append(pred.mean[mask])
            out["var_p"].append(pred.var[mask])
            out["mu_c"].append(mu_c[mask])
            out["var_c"].append(var_c[mask])
    if n_failed > 0.01 * n_samples:
        raise ConditioningError(
            f"{n_failed}/{n_samples} posterior draws failed to condition"
        )
    return {k: torch.cat(v) for k, v in out.items()}, n_failed


def _pooled(mu: torch.Tensor, var: torch.Tensor):
    """Mixture moments over the draw axis; variance-of-means uses the
    unbiased estimator and is zero for a single draw."""
    pooled_mean = mu.mean(dim=0)
    mean_var = var.mean(dim=0)
    if mu.shape[0] > 1:
        pooled_var = mean_var + mu.var(dim=0, unbiased=True)
    else:
        pooled_var = mean_var
    return pooled_mean, pooled_var


def predict(vs, cs, x, n_samples: int, seed: int) -> PredictiveSamples:
    """Empirical posterior predictive at one input: per-draw conditioned
    Gaussians plus pooled mixture moments."""
    if n_samples < 1:
        raise ConditioningError("n_samples must be >= 1")
    q, n_failed = _draw_quantities(vs, cs, x, n_samples, seed)
    pooled_mean, pooled_var = _pooled(q["mu_c"], q["var_c"])
    return PredictiveSamples(
        mu=q["mu_c"],
        var=q["var_c"],
        pooled_mean=pooled_mean,
        pooled_var=pooled_var,
        n_failed=n_failed,
    )


def _cov(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    n = a.shape[0]
    return ((a - a.mean(0)) * (b - b.mean(0))).sum(0) / (n - 1)


def decompose(vs, cs, x, n_samples: int, seed: int) -> VarianceDecomposition:
    """Monte Carlo estimate of the five-term variance decomposition,
    all terms from a single joint draw set."""
    if n_samples < 100:
        raise ConditioningError("decompose needs n_samples >= 100")
    q, _ = _draw_quantities(vs, cs, x, n_samples, seed)
    mu_p, var_p = q["mu_p"], q["var_p"]
    mu_c, var_c = q["mu_c"], q["var_c"]
    delta = mu_c - mu_p
    reduction = var_p - var_c

    pooled_mean, pooled_var = _pooled(mu_c, var_c)
    n = mu_c.shape[0]
    # SE of the pooled variance via the per-draw contribution spread
    contrib = var_c + (mu_c - pooled_mean) ** 2
    std_error = contrib.std(dim=0, unbiased=True) / (n**0.5)

    return VarianceDecomposition(
        aleatoric=var_p.mean(0),
        constraint_reduction=reduction.mean(0),
        epistemic=mu_p.var(0, unbiased=True),
        tolerance_uncertainty=delta.var(0, unbiased=True),
        interaction=2.0 * _cov(mu_p, delta),
        total=pooled_var,
        std_error=std_error,
    )


def coverage_and_width(predictive: PredictiveSamples, y_true, level: float = 0.95):
    """Central credible interval per output from the pooled moments
    (Gaussian approximation of the mixture).

    Returns (covered boolean tensor, width tensor)."""
    y_true = as_tensor(y_true)
    z = NormalDist().inv_cdf(0.5 + level / 2.0)
    half = z * torch.sqrt(predictive.pooled_var)
    lo = predictive.pooled_mean - half
    hi = predictive.pooled_mean + half
    covered = (y_true >= lo) & (y_true <= hi)
    return covered, 2.0 * half


def interval_z(level: float = 0.95) -> float:
    """Two-sided standard-normal quantile for a central interval."""
    return NormalDist().inv_cdf(0.5 + level / 2.0)


@dataclass
class BatchPredictive:
    """Streaming evaluation over a set of inputs.

    Per-point pooled moments, per-point mean decomposition terms, and
    constraint-violation statistics over draws x points (violation of
    the per-draw predictive mean, measured against ``violation_cs``)."""

    pooled_mean: torch.Tensor
    pooled_var: torch.Tensor
    aleatoric: torch.Tensor
    constraint_reduction: torch.Tensor
    epistemic: torch.Tensor
    tolerance_uncertainty: torch.Tensor
    interaction: torch.Tensor
    violation_mean: torch.Tensor
    violation_std: torch.Tensor
    violation_samples: torch.Tensor
    violation_sample_idx: torch.Tensor
    n_samples: int


def evaluate_batch(
    vs,
    cs,
    X,
    n_samples: int,
    seed: int,
    violation_cs: cond.ConstraintSystem | None = None,
    violation_points: int = 500,
    chunk: int = 64,
) -> BatchPredictive:
    """Stream ``n_samples`` joint posterior draws over all rows of X,
    accumulating pooled predictive moments and decomposition terms per
    point.

    ``violation_cs`` (defaults to ``cs``) defines the residual used for
    the violation metric, so an unconstrained model can still be scored
    against the constraints. Violation samples are retained in full for
    a seeded subset of ``violation_points`` rows (for medians and
    histogram export); means/stds stream over every row.
    """
    X = as_tensor(X)
    N = X.shape[0]
    vcs = violation_cs if violation_cs is not None else cs
    if vcs is None:
        raise ConditioningError("a constraint system is required for violation metrics")
    gen = torch.Generator().manual_seed(seed)
    n_y = vs.arch.output_dim
    m = vcs.m

    idx_gen = torch.Generator().manual_seed(seed + 1)
    n_keep = min(violation_points, N)
    keep_idx = torch.randperm(N, generator=idx_gen)[:n_keep].sort().values

    sums = {
        k: torch.zeros(N, n_y, dtype=DTYPE)
        for k in ("mu_p", "mu_p2", "var_p", "mu_c", "mu_c2", "var_c", "delta", "delta2", "mu_p_delta")
    }
    viol_sum = torch.zeros(m, dtype=DTYPE)
    viol_sumsq = torch.zeros(m, dtype=DTYPE)
    kept = []

    with torch.no_grad():
        remaining = n_samples
        while remaining > 0:
            c = min(chunk, remaining)
            remaining -= c
            thetas, rs = _sample_joint(vs, c, gen)
            pred = model.forward(vs.arch, thetas, X)  # (c, N, n_y)
            if cs is None:
                mu_c, var_c = pred.mean, pred.var
            else:
                cp = cond.condition(
                    pred, cs, X, cond.ToleranceVector(rs[:, None, :].expand(c, N, cs.m))
                )
                mu_c, var_c = cp.posterior.mean, cp.posterior.var
            delta = mu_c - pred.mean
            sums["mu_p"] += pred.mean.sum(0)
            sums["mu_p2"] += (pred.mean**2).sum(0)
            sums["var_p"] += pred.var.sum(0)
            sums["mu_c"] += mu_c.sum(0)
            sums["mu_c2"] += (mu_c**2).sum(0)
            sums["var_c"] += var_c.sum(0)
            sums["delta"] += delta.sum(0)
            sums["delta2"] += (delta**2).sum(0)
            sums["mu_p_delta"] += (pred.mean * delta).sum(0)

            viol = cond.violation_magnitude(vcs, X, mu_c)  # (c, N, m)
            viol_sum += viol.sum(dim=(0, 1))
            viol_sumsq += (viol**2).sum(dim=(0, 1))
            kept.append(viol[:, keep_idx, :])

    n = n_samples
    mean = {k: v / n for k, v in sums.items()}
    var_mu_c = (sums["mu_c2"] - n * mean["mu_c"] ** 2) / (n - 1)
    var_mu_p = (sums["mu_p2"] - n * mean["mu_p"] ** 2) / (n - 1)
    var_delta = (sums["delta2"] - n * mean["delta"] ** 2) / (n - 1)
    cov_pd = (sums["mu_p_delta"] - n * mean["mu_p"] * mean["delta"]) / (n - 1)

    n_viol = n * N
    vmean = viol_sum / n_viol
    vstd = torch.sqrt(torch.clamp((viol_sumsq - n_viol * vmean**2) / (n_viol - 1), min=0.0))

    return BatchPredictive(
        pooled_mean=mean["mu_c"],
        pooled_var=mean["var_c"] + var_mu_c,
        aleatoric=mean["var_p"],
        constraint_reduction=mean["var_p"] - mean["var_c"],
        epistemic=var_mu_p,
        tolerance_uncertainty=var_delta,
        interaction=2.0 * cov_pd,
        violation_mean=vmean,
        violation_std=vstd,
        violation_samples=torch.cat(kept, dim=0),
        violation_sample_idx=keep_idx,
        n_samples=n_samples,
    )
