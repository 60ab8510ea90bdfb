"""Bayesian neural networks with embedded linear equality constraints.

Diagonal-Gaussian predictions are conditioned on linear constraints in
closed form, with a learnable per-constraint tolerance, and the whole
model is trained by mean-field variational inference.
"""

from .conditioning import (
    ConditionedPrediction,
    ConstraintSystem,
    ToleranceVector,
    condition,
    residual,
    violation_magnitude,
)
from .errors import (
    CbnnError,
    ConditioningError,
    ConfigError,
    ContractError,
    TrainingError,
)
from .gaussian import DiagGaussian, entropy, kl_divergence, log_density, sample_reparam
from .model import (
    NetworkArchitecture,
    VariationalState,
    forward,
    init_variational,
    sample_tolerance,
    sample_weights,
)
from .objective import ElboEstimate, TrainConfig, elbo_estimate, grad_elbo, train
from .uncertainty import (
    PredictiveSamples,
    VarianceDecomposition,
    coverage_and_width,
    decompose,
    evaluate_batch,
    predict,
)

__version__ = "0.1.0"
