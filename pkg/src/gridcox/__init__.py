"""Log-Gaussian Cox process fitting on gridded point-pattern data.

Latent Gaussian models with sparse Markov-random-field priors over a
pixel grid nested in slope units, fitted by a Laplace-approximation
engine over a deterministic hyperparameter grid, with posterior
sampling, predictive scoring, k-fold cross-validation, and built-in
synthetic-data and brute-force verification oracles.
"""

from gridcox.domain import (
    DataError,
    SlopeUnitGraph,
    SpatialDomain,
    build_domain,
    load_domain,
)
from gridcox.inference import (
    GaussianObservation,
    InferenceError,
    InferenceSettings,
    PoissonObservation,
    PosteriorFit,
    fit,
    gaussian_approximation,
    poisson_loglik,
)
from gridcox.models import (
    INTERCEPT_ONLY,
    MODEL_IDS,
    LatentModel,
    ModelError,
    PriorSettings,
    assemble,
)
from gridcox.sampling import PosteriorSampleSet, sample_posterior
from gridcox.scoring import (
    ScoreReport,
    ScoringError,
    auc,
    crps_counts,
    cross_validate,
    dic_waic,
    score,
)
from gridcox.structures import (
    PCPrior,
    SparsePrecision,
    besag_structure,
    iid_structure,
    pc_prior_log_density,
    rw1_structure,
    scaling_constant,
)
from gridcox.synthetic import (
    OracleGrid,
    TruthConfig,
    dense_posterior_oracle,
    mcmc_oracle,
    simulate_dataset,
    write_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "DataError", "SlopeUnitGraph", "SpatialDomain", "build_domain",
    "load_domain",
    "GaussianObservation", "InferenceError", "InferenceSettings",
    "PoissonObservation", "PosteriorFit", "fit", "gaussian_approximation",
    "poisson_loglik",
    "INTERCEPT_ONLY", "MODEL_IDS", "LatentModel", "ModelError",
    "PriorSettings", "assemble",
    "PosteriorSampleSet", "sample_posterior",
    "ScoreReport", "ScoringError", "auc", "crps_counts", "cross_validate",
    "dic_waic", "score",
    "PCPrior", "SparsePrecision", "besag_structure", "iid_structure",
    "pc_prior_log_density", "rw1_structure", "scaling_constant",
    "OracleGrid", "TruthConfig", "dense_posterior_oracle", "mcmc_oracle",
    "simulate_dataset", "write_dataset",
    "__version__",
]
