"""Cluster-weighted shared-frailty survival mixtures for right-censored
hierarchical data: CEM/SEM estimation, BIC selection, frailty posteriors,
curve export and a simulation harness."""

from .baselines import Exponential, Gompertz, Lognormal, Weibull, family_from_name
from .covariates import GaussianParams, MultinomialParams
from .data import (
    DataError,
    Dataset,
    DesignMatrices,
    Observation,
    VariableSpec,
    load_dataset,
    save_dataset,
    split_covariates,
)
from .em import (
    ClusterParams,
    ModelFit,
    ModelParams,
    c_step,
    classification_loglik,
    e_step,
    kprototypes_init,
    m_step,
    run_cem,
    run_sem,
    s_step,
)
from .frailty import THETA_MIN, log_laplace_deriv, posterior_frailty
from .selection import (
    ModelConfig,
    bic,
    count_parameters,
    frailty_estimates,
    grid_search,
    hazard_curve,
    survival_curve,
)
from .simulate import (
    DGPConfig,
    ari,
    default_dgp,
    misclassification_rate,
    replicate_study,
    simulate_dataset,
)
from .survival import (
    SurvivalFitResult,
    SurvivalParams,
    cluster_survival_loglik,
    fit_survival_mle,
    group_cluster_loglik,
    obs_marginal_logdensity,
    wald_tests,
)

__version__ = "0.1.0"
