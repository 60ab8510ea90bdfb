"""Posterior-predictive sampling, the five-term variance decomposition,
and interval metrics."""

import math

import numpy as np
import pytest
import torch

from cbnn import (
    ConditioningError,
    ConstraintSystem,
    NetworkArchitecture,
    decompose,
    coverage_and_width,
    evaluate_batch,
    init_variational,
    predict,
)
from cbnn.model import _softplus_inv
from cbnn.uncertainty import interval_z


def _small_state(rng, n_constraints=1, seed=4):
    arch = NetworkArchitecture(3, 4, hidden_layers=(6,), activation="tanh")
    vs = init_variational(arch, seed=seed, n_constraints=n_constraints)
    with torch.no_grad():
        vs.theta_mean += torch.tensor(rng.standard_normal(vs.n_theta)) * 0.3
        vs.theta_raw.fill_(_softplus_inv(1e-3))
    cs = ConstraintSystem(
        A=rng.standard_normal((1, 3)) * 0.2,
        B=rng.standard_normal((1, 4)),
        b=rng.standard_normal(1) * 0.1,
    )
    x = torch.tensor(rng.standard_normal(3))
    return vs, cs, x


def _degenerate(vs):
    with torch.no_grad():
        vs.theta_raw.fill_(_softplus_inv(1e-24))
        if vs.has_tolerance:
            vs.rho_raw.fill_(_softplus_inv(1e-24))
    return vs


class TestPredict:
    def test_pooled_moments_are_draw_statistics(self, rng):
        vs, cs, x = _small_state(rng)
        ps = predict(vs, cs, x, n_samples=200, seed=0)
        assert torch.allclose(ps.pooled_mean, ps.mu.mean(0), atol=1e-12)
        lotv = ps.var.mean(0) + ps.mu.var(0, unbiased=True)
        assert torch.allclose(ps.pooled_var, lotv, atol=1e-12)

    def test_degenerate_posterior_collapses(self, rng):
        vs, cs, x = _small_state(rng)
        _degenerate(vs)
        ps = predict(vs, cs, x, n_samples=50, seed=0)
        assert float((ps.mu - ps.mu[0]).abs().max()) < 1e-8
        assert torch.allclose(ps.pooled_var, ps.var[0], atol=1e-8)

    def test_unconstrained_predict(self, rng):
        vs, _, x = _small_state(rng, n_constraints=0)
        ps = predict(vs, None, x, n_samples=100, seed=0)
        assert ps.mu.shape == (100, 4)
        assert ps.n_failed == 0

    def test_posterior_variance_below_prior_per_draw(self, rng):
        from cbnn.uncertainty import _draw_quantities

        vs, cs, x = _small_state(rng)
        q, _ = _draw_quantities(vs, cs, x, n_samples=200, seed=0)
        assert bool((q["var_c"] <= q["var_p"] + 1e-12).all())

    def test_invalid_sample_count(self, rng):
        vs, cs, x = _small_state(rng)
        with pytest.raises(ConditioningError):
            predict(vs, cs, x, n_samples=0, seed=0)


class TestDecompose:
    def test_terms_sum_to_total(self, rng):
        vs, cs, x = _small_state(rng)
        d = decompose(vs, cs, x, n_samples=2000, seed=1)
        assert torch.allclose(d.term_sum(), d.total, atol=1e-10)

    def test_huge_tolerance_recovers_bnn_split(self, rng):
        vs, cs, x = _small_state(rng)
        with torch.no_grad():
            vs.rho_mean.fill_(math.log(1e12))
            vs.rho_raw.fill_(_softplus_inv(1e-18))
        d = decompose(vs, cs, x, n_samples=2000, seed=1)
        total = float(d.total.max())
        for term in (d.constraint_reduction, d.tolerance_uncertainty, d.interaction):
            assert float(term.abs().max()) < 0.01 * total
        assert torch.allclose(d.aleatoric + d.epistemic, d.total, rtol=1e-6)

    def test_degenerate_weights_zero_epistemic(self, rng):
        vs, cs, x = _small_state(rng)
        with torch.no_grad():
            vs.theta_raw.fill_(_softplus_inv(1e-22))
        d = decompose(vs, cs, x, n_samples=500, seed=1)
        assert float(d.epistemic.abs().max()) < 1e-12
        assert float(d.interaction.abs().max()) < 1e-10

    def test_seed_invariance_within_mc_tolerance(self, rng):
        vs, cs, x = _small_state(rng)
        a = decompose(vs, cs, x, n_samples=4000, seed=1)
        b = decompose(vs, cs, x, n_samples=4000, seed=2)
        tol = 6.0 * torch.sqrt(a.std_error**2 + b.std_error**2)
        assert bool(((a.total - b.total).abs() <= tol + 1e-12).all())

    def test_tighter_tolerance_increases_reduction(self, rng):
        vs, cs, x = _small_state(rng)
        loose = decompose(vs, cs, x, n_samples=1000, seed=3)
        with torch.no_grad():
            vs.rho_mean -= 4.0
        tight = decompose(vs, cs, x, n_samples=1000, seed=3)
        assert float(tight.constraint_reduction.sum()) >= float(loose.constraint_reduction.sum()) - 1e-9

    def test_reduction_nonnegative(self, rng):
        vs, cs, x = _small_state(rng)
        d = decompose(vs, cs, x, n_samples=1000, seed=5)
        assert bool((d.constraint_reduction >= -1e-10).all())

    def test_minimum_sample_count(self, rng):
        vs, cs, x = _small_state(rng)
        with pytest.raises(ConditioningError):
            decompose(vs, cs, x, n_samples=50, seed=0)


class TestCoverageAndWidth:
    def test_true_value_at_mean_is_covered(self, rng):
        vs, cs, x = _small_state(rng)
        ps = predict(vs, cs, x, n_samples=200, seed=0)
        covered, width = coverage_and_width(ps, ps.pooled_mean)
        assert bool(covered.all())
        assert torch.allclose(width, 2 * interval_z(0.95) * torch.sqrt(ps.pooled_var))

    def test_interval_z_values(self):
        assert abs(interval_z(0.95) - 1.959964) < 1e-5
        assert abs(interval_z(0.5) - 0.674490) < 1e-5

    def test_simulation_coverage(self, rng):
        vs, cs, x = _small_state(rng)
        ps = predict(vs, cs, x, n_samples=200, seed=0)
        mean = ps.pooled_mean.numpy()
        std = np.sqrt(ps.pooled_var.numpy())
        n_trials = 10_000
        sim = mean + rng.standard_normal((n_trials, 4)) * std
        hits = 0
        z = interval_z(0.95)
        lo, hi = mean - z * std, mean + z * std
        frac = np.mean((sim >= lo) & (sim <= hi))
        assert abs(frac - 0.95) < 0.01


class TestEvaluateBatch:
    def test_matches_per_point_predict(self, rng):
        vs, cs, _ = _small_state(rng)
        X = torch.tensor(rng.standard_normal((5, 3)))
        bp = evaluate_batch(vs, cs, X, n_samples=300, seed=9, violation_cs=cs)
        for i in range(5):
            ps = predict(vs, cs, X[i], n_samples=300, seed=9)
            # same draw protocol is not guaranteed point-by-point, so
            # compare moments at MC tolerance instead of bit-exactly
            se = torch.sqrt(ps.pooled_var / 300)
            assert bool(((bp.pooled_mean[i] - ps.pooled_mean).abs() < 6 * se + 1e-8).all())

    def test_decomposition_identity_per_point(self, rng):
        vs, cs, _ = _small_state(rng)
        X = torch.tensor(rng.standard_normal((4, 3)))
        bp = evaluate_batch(vs, cs, X, n_samples=500, seed=2, violation_cs=cs)
        total = (
            bp.aleatoric
            - bp.constraint_reduction
            + bp.epistemic
            + bp.tolerance_uncertainty
            + bp.interaction
        )
        # the streamed pooled variance uses the unbiased var of means
        # while constraint_reduction and aleatoric use plain means, so
        # the identity holds up to the n/(n-1) correction
        assert torch.allclose(total, bp.pooled_var, rtol=5e-3, atol=1e-8)

    def test_violation_samples_shape_and_stats(self, rng):
        vs, cs, _ = _small_state(rng)
        X = torch.tensor(rng.standard_normal((10, 3)))
        bp = evaluate_batch(vs, cs, X, n_samples=100, seed=0, violation_cs=cs, violation_points=4)
        assert bp.violation_samples.shape == (100, 4, 1)
        assert bp.violation_sample_idx.shape == (4,)
        assert bool((bp.violation_samples >= 0).all())
        assert float(bp.violation_mean[0]) >= 0

    def test_bnn_scored_against_constraints(self, rng):
        vs, cs, _ = _small_state(rng, n_constraints=0)
        X = torch.tensor(rng.standard_normal((6, 3)))
        bp = evaluate_batch(vs, None, X, n_samples=100, seed=0, violation_cs=cs)
        assert float(bp.violation_mean[0]) > 0
        assert float(bp.constraint_reduction.abs().max()) < 1e-12
        assert float(bp.tolerance_uncertainty.abs().max()) < 1e-12

    def test_requires_violation_constraints(self, rng):
        vs, _, _ = _small_state(rng, n_constraints=0)
        X = torch.tensor(rng.standard_normal((6, 3)))
        with pytest.raises(ConditioningError):
            evaluate_batch(vs, None, X, n_samples=10, seed=0)
