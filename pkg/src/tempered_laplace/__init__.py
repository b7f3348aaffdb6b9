"""Tempered Laplace posteriors, test metrics and PAC-Bayes bounds for small MLPs."""

from .nn import (
    Dataset,
    LossKind,
    MlpArchitecture,
    ModelParams,
    forward,
    grad_loss,
    loss,
    per_sample_jacobian,
)
from .training import MapEstimate, TrainConfig, seed_farm, train_map
from .laplace import (
    CurvatureSummary,
    TemperedPosterior,
    fit_tempered_posterior,
    gaussian_kl,
    ggn_trace,
    kfac_factors,
    sample_weights,
    select_prior_variance,
)
from .metrics import (
    MetricTriple,
    PredictiveResult,
    evaluate,
    posterior_predictive,
    predictive_relative_entropy,
)
from .bounds import (
    BoundReport,
    SyntheticWorld,
    alquier_bound,
    catoni_bound,
    evaluate_bound_pipeline,
    generate_world_data,
    mc_true_risk,
    proposition_bound,
)

__version__ = "0.1.0"
