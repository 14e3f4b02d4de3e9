"""Fixed-effect selection and post-selection inference for linear mixed models."""

from .data import (
    ClusteredDataset,
    MarginalCovariance,
    VarianceParams,
    assemble_sigma,
    random_intercept_dataset,
)
from .lmm import (
    LmmFit,
    conditional_loglik,
    gls_beta,
    hat_trace,
    marginal_loglik,
    reml_fit,
    restricted_loglik,
    wald_inference,
)
from .report import CoefficientResult, InferenceReport

__version__ = "0.1.0"
