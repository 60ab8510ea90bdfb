"""Monte Carlo estimate of the negative evidence lower bound, its exact
reparameterized gradient, and the optimization loop.

The likelihood of each observed y is the constraint-conditioned Gaussian
(or the raw network head when no constraints are attached); the two KL
regularizers are closed form and sample-free.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import torch

from . import conditioning as cond
from . import gaussian, model
from .errors import ContractError, TrainingError
from .gaussian import DTYPE, as_tensor


@dataclass(frozen=True)
class ElboEstimate:
    """One objective evaluation: minibatch likelihood term rescaled to
    the full dataset, plus the two closed-form KL terms."""

    nll_term: float
    kl_theta: float
    kl_rho: float

    @property
    def total(self) -> float:
        return self.nll_term + self.kl_theta + self.kl_rho

    def as_row(self) -> list:
        return [self.nll_term, self.kl_theta, self.kl_rho, self.total]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    mc_samples_per_step: int = 4
    seed: int = 0
    kl_scaling: str = "full"
    grad_clip: float = 10.0
    # The two tolerance parameters see far noisier gradients than the
    # weights (they enter only through r = exp(rho) draws), which stalls
    # their Adam drift well short of the optimum; a larger per-group
    # learning rate compensates.
    tolerance_lr_scale: float = 10.0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.mc_samples_per_step) < 1:
            raise ContractError("epochs, batch_size, mc_samples_per_step must be positive")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.kl_scaling not in ("full", "minibatch-proportional"):
            raise ContractError(f"unknown kl_scaling {self.kl_scaling!r}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "mc_samples_per_step": self.mc_samples_per_step,
            "seed": self.seed,
            "kl_scaling": self.kl_scaling,
            "grad_clip": self.grad_clip,
            "tolerance_lr_scale": self.tolerance_lr_scale,
        }


def draw_noise(vs: model.VariationalState, n_draws: int, generator: torch.Generator):
    """Standard-normal noise for ``n_draws`` joint (theta, rho) samples.

    Returned as a list of (eps_theta, eps_rho-or-None); feeding the same
    list back in makes the estimator deterministic (common random
    numbers)."""
    draws = []
    for _ in range(n_draws):
        eps_t = torch.randn(vs.n_theta, generator=generator, dtype=DTYPE)
        eps_r = (
            torch.randn(vs.m, generator=generator, dtype=DTYPE)
            if vs.has_tolerance
            else None
        )
        draws.append((eps_t, eps_r))
    return draws


def elbo_terms(
    vs: model.VariationalState,
    X,
    Y,
    cs: cond.ConstraintSystem | None,
    n_total: int,
    noise_draws,
    kl_scale: float = 1.0,
):
    """Differentiable (nll, kl_theta, kl_rho) torch scalars.

    ``n_total`` is the full-dataset size used to rescale the minibatch
    likelihood. Raises TrainingError on non-finite terms.
    """
    X = as_tensor(X)
    Y = as_tensor(Y)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0] or X.shape[0] == 0:
        raise ContractError("X and Y must be nonempty matrices with matching rows")
    batch = X.shape[0]

    logp_sum = torch.zeros((), dtype=DTYPE)
    for eps_t, eps_r in noise_draws:
        theta = model.sample_weights(vs, eps_t)
        pred = model.forward(vs.arch, theta, X)
        if cs is not None:
            if not vs.has_tolerance:
                raise ContractError("constrained objective needs a tolerance posterior")
            tol = model.sample_tolerance(vs, eps_r)
            pred = cond.condition(pred, cs, X, tol).posterior
        logp_sum = logp_sum + gaussian.log_density(pred, Y).sum()

    n_draws = len(noise_draws)
    nll = -(n_total / batch) * logp_sum / n_draws

    kl_theta = kl_scale * gaussian.kl_divergence(vs.theta_q, vs.theta_prior)
    if vs.has_tolerance:
        kl_rho = kl_scale * gaussian.kl_divergence(vs.rho_q, vs.rho_prior)
    else:
        kl_rho = torch.zeros((), dtype=DTYPE)

    total = nll + kl_theta + kl_rho
    if not torch.isfinite(total):
        raise TrainingError(
            "non-finite objective",
            diagnostics={
                "nll": float(nll),
                "kl_theta": float(kl_theta),
                "kl_rho": float(kl_rho),
            },
        )
    return nll, kl_theta, kl_rho


def _kl_scale(config: TrainConfig, batch: int, n_total: int) -> float:
    return 1.0 if config.kl_scaling == "full" else batch / n_total


def elbo_estimate(
    vs: model.VariationalState,
    batch,
    cs: cond.ConstraintSystem | None,
    config: TrainConfig,
    n_total: int | None = None,
    noise_draws=None,
) -> ElboEstimate:
    """Monte Carlo negative-ELBO estimate on one minibatch.

    ``batch`` is (X, Y). Noise is drawn from ``config.seed`` unless
    explicit ``noise_draws`` are supplied."""
    X, Y = batch
    X = as_tensor(X)
    n_total = X.shape[0] if n_total is None else n_total
    if noise_draws is None:
        gen = torch.Generator().manual_seed(config.seed)
        noise_draws = draw_noise(vs, config.mc_samples_per_step, gen)
    with torch.no_grad():
        nll, kl_t, kl_r = elbo_terms(
            vs, X, Y, cs, n_total, noise_draws, _kl_scale(config, X.shape[0], n_total)
        )
    return ElboEstimate(float(nll), float(kl_t), float(kl_r))


def grad_elbo(
    vs: model.VariationalState,
    batch,
    cs: cond.ConstraintSystem | None,
    config: TrainConfig,
    noise_draws,
    n_total: int | None = None,
) -> torch.Tensor:
    """Exact gradient of the sampled objective with respect to all
    variational parameters, flattened in the order (theta_mean,
    theta_raw, rho_mean, rho_raw)."""
    X, Y = batch
    X = as_tensor(X)
    n_total = X.shape[0] if n_total is None else n_total
    nll, kl_t, kl_r = elbo_terms(
        vs, X, Y, cs, n_total, noise_draws, _kl_scale(config, X.shape[0], n_total)
    )
    grads = torch.autograd.grad(nll + kl_t + kl_r, vs.parameters(), allow_unused=True)
    flat = [
        g.reshape(-1) if g is not None else torch.zeros_like(p).reshape(-1)
        for g, p in zip(grads, vs.parameters())
    ]
    return torch.cat(flat)


def train(
    vs: model.VariationalState,
    train_xy,
    cs: cond.ConstraintSystem | None,
    config: TrainConfig,
):
    """Optimize the variational state with Adam; returns (state, trace).

    ``train_xy`` is (X, Y) for the training split. The trace has one
    ElboEstimate per epoch (mean of the step estimates). Fully
    deterministic in ``config.seed``. On a non-finite objective the
    parameters are rolled back to the last finished epoch and a
    TrainingError carrying that state is raised.
    """
    X, Y = train_xy
    X = as_tensor(X)
    Y = as_tensor(Y)
    n_total = X.shape[0]
    params = vs.parameters()
    groups = [{"params": params[:2], "lr": config.learning_rate}]
    if vs.has_tolerance:
        groups.append(
            {"params": params[2:], "lr": config.learning_rate * config.tolerance_lr_scale}
        )
    opt = torch.optim.Adam(groups)
    gen = torch.Generator().manual_seed(config.seed)

    trace: list[ElboEstimate] = []
    snapshot = vs.clone()
    for _epoch in range(config.epochs):
        perm = torch.randperm(n_total, generator=gen)
        sums = [0.0, 0.0, 0.0]
        n_steps = 0
        for start in range(0, n_total, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb, yb = X[idx], Y[idx]
            noise = draw_noise(vs, config.mc_samples_per_step, gen)
            try:
                nll, kl_t, kl_r = elbo_terms(
                    vs, xb, yb, cs, n_total, noise,
                    _kl_scale(config, xb.shape[0], n_total),
                )
            except TrainingError as exc:
                raise TrainingError(
                    f"aborting at epoch {_epoch}: {exc}",
                    last_state=snapshot,
                    trace=trace,
                    diagnostics=exc.diagnostics,
                ) from exc
            opt.zero_grad()
            (nll + kl_t + kl_r).backward()
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            sums[0] += float(nll.detach())
            sums[1] += float(kl_t.detach())
            sums[2] += float(kl_r.detach())
            n_steps += 1
        trace.append(ElboEstimate(*(s / n_steps for s in sums)))
        snapshot = vs.clone()
    return vs, trace


def write_trace_csv(trace, path):
    """Per-epoch objective trace: epoch, nll_term, kl_theta, kl_rho, total."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "nll_term", "kl_theta", "kl_rho", "total"])
        for i, est in enumerate(trace):
            w.writerow([i] + [repr(v) for v in est.as_row()])
