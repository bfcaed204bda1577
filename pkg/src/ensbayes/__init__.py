"""Fully Bayesian ensemble updating.

Treats the parameters of the assumed model as random, samples them per
ensemble member conditioned on the other members and the new observation,
and updates each member through a map that reproduces the assumed
posterior exactly.  Linear-Gaussian models get closed-form Kalman algebra
with an optimal square-root map; binary Markov chains get coupling
policies that preserve all adjacent pair marginals of the posterior chain.
"""

__version__ = "0.1.0"

from .distributions import (
    RngStream,
    dirichlet_sample,
    inv_wishart_sample,
    mvn_sample,
    student_t_cdf,
    student_t_quantile,
)
from .gaussian import (
    GaussianParams,
    LikelihoodSpec,
    MahalanobisSpec,
    PosteriorGaussian,
    RankDeficiencyError,
    UpdateMap,
    apply_update_map,
    conditional_independence_map,
    enkf_equivalent_map,
    kalman_gain,
    optimal_sqrt_map,
    posterior_moments,
    stochastic_update,
    theorem1_solve,
    trace_objective,
)
from .gaussian_bayes import (
    Ensemble,
    NIWHyper,
    empirical_estimate,
    gibbs_theta_excluding,
    niw_posterior,
    sample_theta_all_members,
)
from .hmm import (
    ChainPosterior,
    DirichletHyper,
    MarkovChainParams,
    SiteLikelihood,
    ZeroLikelihoodError,
    chain_sample,
    dirichlet_posterior,
    estimate_theta_hmm,
    forward_backward,
    gibbs_theta_hmm,
)
from .hmm_update import (
    JointTable,
    PolicyError,
    TransitionPolicy,
    apply_policy,
    conditional_independence_policy,
    expected_matches,
    optimal_policy,
    propagate_joints,
    verify_bivariate_constraint,
)
from .linalg import DegenerateCovarianceError
