"""Safe multi-task Bayesian optimization with LMC kernels under correlation uncertainty."""

from .kernels import (
    CorrelationMatrix,
    LMCKernel,
    SEKernelParams,
    TaskedDataset,
    assemble_gram,
    cross_gram,
    lmc_eval,
    se_eval,
)
from .gp import NumericalError, PosteriorModel, Prediction, fit, log_marginal_likelihood, predict
from .bounds import (
    RegularityBudget,
    RobustBound,
    beta,
    compute_robust_bound,
    gamma,
    gamma_per_feature,
    grid_cardinality,
    nu_max,
    nu_single,
    psi,
    robust_beta,
)
from .correlation import (
    CorrelationSet,
    FixedPrior,
    LKJPrior,
    PriorSpec,
    build_confidence_set,
    lkj_log_density,
    mh_sample,
)
from .synthesis import SyntheticFunction, expressiveness_demo, sample_function
from .bo import BOConfig, BOHistory, MCMCSettings, run

__version__ = "0.1.0"
