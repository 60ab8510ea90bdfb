"""Shared oracles and instance generators for the test suite.

The conditioning oracle here is deliberately independent of the library
implementation: it builds the full joint Gaussian over the stacked
vector (y, z) with numpy and conditions on z = 0 by explicit Schur
complement, off-diagonals and all.
"""

import numpy as np
import pytest


def joint_conditioning_oracle(mu_p, var_p, A, B, b, x, r):
    """Condition y ~ N(mu_p, diag(var_p)) on z = A x + B y - b + eps = 0
    with eps ~ N(0, diag(r)), via the dense joint Gaussian.

    Returns (mu_c, full conditional covariance). The library keeps only
    the diagonal of the covariance.
    """
    mu_p = np.asarray(mu_p, dtype=float)
    var_p = np.asarray(var_p, dtype=float)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    b = np.asarray(b, dtype=float)
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)

    cov_yy = np.diag(var_p)
    cov_yz = cov_yy @ B.T
    cov_zz = B @ cov_yy @ B.T + np.diag(r)
    mean_z = A @ x + B @ mu_p - b

    k = cov_yz @ np.linalg.inv(cov_zz)
    mu_c = mu_p + k @ (0.0 - mean_z)
    cov_c = cov_yy - k @ cov_yz.T
    return mu_c, cov_c


def random_constraint_instance(rng, m, n_y, n_x=3, r_low=1e-6, r_high=1e2):
    """One random full-row-rank conditioning problem.

    Returns a dict with keys A, B, b, x, mu_p, var_p, r (numpy arrays).
    B is resampled until its smallest singular value is comfortably away
    from the rank threshold.
    """
    while True:
        B = rng.standard_normal((m, n_y))
        if np.linalg.svd(B, compute_uv=False)[-1] > 1e-3:
            break
    return {
        "A": rng.standard_normal((m, n_x)),
        "B": B,
        "b": rng.standard_normal(m),
        "x": rng.standard_normal(n_x),
        "mu_p": rng.standard_normal(n_y),
        "var_p": np.exp(rng.uniform(np.log(1e-3), np.log(1e1), size=n_y)),
        "r": np.exp(rng.uniform(np.log(r_low), np.log(r_high), size=m)),
    }


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def tiny_dataset():
    """A small surrogate dataset (2 currents x 2 temperatures x 60 SOC
    points) for fast training tests."""
    from cbnn import synthdata

    spec = synthdata.SurrogateSpec(
        currents=(1.0, 2.5),
        temperatures=(283.0, 303.0),
        soc_points=60,
        voltage_noise=0.003,
        thermal_noise=40.0,
        seed=3,
    )
    return synthdata.generate(spec)
