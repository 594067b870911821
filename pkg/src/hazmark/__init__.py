"""Joint areal modeling of natural-hazard counts and sizes.

Poisson occurrence counts and extreme-value-motivated size distributions
(generalized Pareto, extended GP, spliced gamma/GP) are linked over a
slope-unit adjacency graph through shared intrinsic-CAR fields, fitted with
an adaptive Metropolis-within-Gibbs sampler, and summarized into posterior
susceptibility / size-exceedance / combined-hazard surfaces.
"""

from .distributions import (
    EgpParams,
    GpParams,
    SizeFamily,
    SplitParams,
    egp_cdf,
    egp_logpdf,
    egp_quantile,
    gp_cdf,
    gp_logpdf,
    gp_quantile,
    poisson_logpmf,
    size_sample,
    split_cdf,
    split_logpdf,
    split_quantile,
)
from .errors import (
    ContractError,
    ConvergenceGateError,
    IngestionError,
    InitializationError,
    ParameterError,
)
from .graph import (
    CovariateMatrix,
    IcarField,
    SlopeUnitGraph,
    build_covariates,
    build_graph,
    center_by_component,
    icar_logdensity,
    icar_quadform,
    simulate_icar,
)
from .mcmc import (
    Diagnostics,
    PosteriorSamples,
    SamplerConfig,
    adapt_step,
    diagnostics,
    local_delta,
    run_chain,
)
from .model import (
    Inventory,
    LatentState,
    ModelConfig,
    Priors,
    count_linpred,
    loglik,
    logposterior,
    logprior,
    simulate_inventory,
    size_linpred,
)

__version__ = "0.1.0"
