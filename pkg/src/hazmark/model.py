"""Joint hierarchical model for per-unit event counts and event sizes.

Counts are Poisson with log link; sizes follow one of the three families in
:mod:`hazmark.distributions` with a log link on the family scale.  Both linear
predictors combine fixed effects with intrinsic-CAR fields on the slope-unit
graph; four latent structures control how the fields are shared:

* ``fixed_only``   -- covariates only, no latent fields.
* ``shared``       -- one field ``w1``; the size predictor borrows it scaled
  by the sharing coefficient ``gamma``.
* ``independent``  -- separate fields ``w1`` (counts) and ``w2`` (sizes).
* ``shared_plus``  -- ``gamma * w1 + w2`` in the size predictor.

Shape-type parameters (``xi``, ``kappa``, split extras) are global; only the
scale varies by unit.  Out-of-support states yield a ``-inf`` log-posterior
sentinel rather than an exception so samplers can reject proposals.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import gammaln, ndtr

from .distributions import (
    _egp_cdf,
    _egp_logpdf,
    _egp_quantile,
    _gp_cdf,
    _gp_logpdf,
    _gp_quantile,
    _split_cdf,
    _split_logpdf,
    _split_quantile,
)
from .errors import ContractError, ParameterError
from .graph import CovariateMatrix, IcarField, SlopeUnitGraph, center_by_component, icar_logdensity

__all__ = [
    "FAMILIES",
    "STRUCTURES",
    "Priors",
    "ModelConfig",
    "LatentState",
    "Inventory",
    "count_linpred",
    "size_linpred",
    "loglik",
    "logprior",
    "logposterior",
    "simulate_inventory",
    "size_logpdf",
    "size_cdf",
    "size_quantile",
    "scalar_param_names",
    "state_scalars",
    "resolve_split_threshold",
]

FAMILIES = ("gp", "egp", "split")
STRUCTURES = ("fixed_only", "shared", "independent", "shared_plus")


@dataclass(frozen=True)
class Priors:
    """Hyperparameters of the weakly-informative priors.

    Fixed effects and the sharing coefficient get mean-zero Gaussians; the
    iCAR precisions get Gamma(shape, rate); the tail shape gets a Gaussian
    truncated to (xi_lo, xi_hi) which keeps the size mean finite; kappa and
    the split bulk parameters get Gammas; the tail weight is Uniform(0, 1).
    """

    beta_sd: float = 10.0
    gamma_sd: float = 1.0
    tau_shape: float = 1.0
    tau_rate: float = 0.01
    xi_sd: float = 0.25
    xi_lo: float = -0.49
    xi_hi: float = 0.99
    kappa_shape: float = 1.0
    kappa_rate: float = 0.1
    bulk_shape_shape: float = 1.0
    bulk_shape_rate: float = 1.0
    bulk_rate_shape: float = 1.0
    bulk_rate_rate: float = 1.0


@dataclass(frozen=True)
class ModelConfig:
    """Family + latent structure + priors; fully determines the parameter set."""

    family: str = "gp"
    structure: str = "shared_plus"
    priors: Priors = field(default_factory=Priors)
    threshold_quantile: float = 0.90
    split_threshold: Optional[float] = None
    offset_column: Optional[str] = None
    fix_tau1: Optional[float] = None
    fix_tau2: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.structure not in STRUCTURES:
            raise ParameterError(
                f"unknown structure {self.structure!r}; expected one of {STRUCTURES}"
            )
        if not (0.0 < self.threshold_quantile < 1.0):
            raise ParameterError("threshold_quantile must lie in (0, 1)")

    @property
    def has_w1(self):
        return self.structure != "fixed_only"

    @property
    def has_w2(self):
        return self.structure in ("independent", "shared_plus")

    @property
    def has_gamma(self):
        return self.structure in ("shared", "shared_plus")


@dataclass
class LatentState:
    """All unknowns of the joint model for one configuration.

    Field and parameter presence is gated by the configuration: ``w1``/``tau1``
    exist unless the structure is fixed_only, ``w2``/``tau2`` only for
    independent / shared_plus, ``gamma`` only for shared / shared_plus,
    ``kappa`` only for the egp family and the split extras only for split.
    """

    beta_count: np.ndarray
    beta_size: np.ndarray
    xi: float = 0.1
    w1: Optional[np.ndarray] = None
    w2: Optional[np.ndarray] = None
    tau1: Optional[float] = None
    tau2: Optional[float] = None
    gamma: Optional[float] = None
    kappa: Optional[float] = None
    bulk_shape: Optional[float] = None
    bulk_rate: Optional[float] = None
    tail_weight: Optional[float] = None

    def copy(self):
        return LatentState(
            beta_count=self.beta_count.copy(),
            beta_size=self.beta_size.copy(),
            xi=self.xi,
            w1=None if self.w1 is None else self.w1.copy(),
            w2=None if self.w2 is None else self.w2.copy(),
            tau1=self.tau1,
            tau2=self.tau2,
            gamma=self.gamma,
            kappa=self.kappa,
            bulk_shape=self.bulk_shape,
            bulk_rate=self.bulk_rate,
            tail_weight=self.tail_weight,
        )


def validate_state(state: LatentState, graph: SlopeUnitGraph, covariates: CovariateMatrix,
                   config: ModelConfig, check_centering=True):
    """Check structural consistency of a state; raises ContractError."""
    p = covariates.p
    if state.beta_count.shape != (p,) or state.beta_size.shape != (p,):
        raise ContractError("fixed-effect vectors do not match covariate count")
    for name, active, value in (
        ("w1", config.has_w1, state.w1),
        ("w2", config.has_w2, state.w2),
    ):
        if active:
            if value is None or value.shape != (graph.n,):
                raise ContractError(f"structure {config.structure!r} requires field {name} of length {graph.n}")
            if check_centering:
                centered = center_by_component(value, graph)
                if graph.n and np.max(np.abs(centered - value)) > 1e-8:
                    raise ContractError(f"field {name} is not centered per component")
        elif value is not None:
            raise ContractError(f"structure {config.structure!r} does not use field {name}")
    if config.has_gamma and state.gamma is None:
        raise ContractError(f"structure {config.structure!r} requires gamma")
    if config.family == "egp" and state.kappa is None:
        raise ContractError("egp family requires kappa")
    if config.family == "split":
        for name in ("bulk_shape", "bulk_rate", "tail_weight"):
            if getattr(state, name) is None:
                raise ContractError(f"split family requires {name}")
        if config.split_threshold is None:
            raise ContractError("split family requires a resolved split_threshold in the config")


# ---------------------------------------------------------------------------
# linear predictors


def count_linpred(state: LatentState, covariates: CovariateMatrix):
    """Log Poisson rate per unit: x'beta_count (+ log offset) (+ w1)."""
    eta = covariates.values @ state.beta_count
    if covariates.log_offset is not None:
        eta = eta + covariates.log_offset
    if state.w1 is not None:
        if state.w1.shape != eta.shape:
            raise ContractError("w1 length does not match unit count")
        eta = eta + state.w1
    return eta


def size_linpred(state: LatentState, covariates: CovariateMatrix, structure: str):
    """Log size-family scale per unit: x'beta_size (+ gamma*w1) (+ w2)."""
    if structure not in STRUCTURES:
        raise ParameterError(f"unknown structure {structure!r}")
    eta = covariates.values @ state.beta_size
    if structure in ("shared", "shared_plus"):
        if state.w1 is None or state.gamma is None:
            raise ContractError(f"structure {structure!r} requires w1 and gamma")
        eta = eta + state.gamma * state.w1
    if structure in ("independent", "shared_plus"):
        if state.w2 is None:
            raise ContractError(f"structure {structure!r} requires w2")
        eta = eta + state.w2
    return eta


# ---------------------------------------------------------------------------
# size-family dispatch with per-unit scales


def _family_args(state: LatentState, config: ModelConfig):
    if config.family == "split" and config.split_threshold is None:
        raise ContractError("split family requires a resolved split_threshold")
    return config.family


def size_logpdf(x, sigma, state: LatentState, config: ModelConfig):
    """Family log-density at sizes ``x`` with per-element scales ``sigma``."""
    fam = _family_args(state, config)
    sigma = np.asarray(sigma, dtype=float)
    bad = ~np.isfinite(sigma) | (sigma <= 0.0)
    safe = np.where(bad, 1.0, sigma)
    if fam == "gp":
        out = _gp_logpdf(x, safe, state.xi)
    elif fam == "egp":
        out = _egp_logpdf(x, safe, state.xi, state.kappa)
    else:
        out = _split_logpdf(x, state.bulk_shape, state.bulk_rate, config.split_threshold,
                            state.tail_weight, safe, state.xi)
    return np.where(bad, -np.inf, out)


def size_cdf(x, sigma, state: LatentState, config: ModelConfig):
    fam = _family_args(state, config)
    if fam == "gp":
        return _gp_cdf(x, sigma, state.xi)
    if fam == "egp":
        return _egp_cdf(x, sigma, state.xi, state.kappa)
    return _split_cdf(x, state.bulk_shape, state.bulk_rate, config.split_threshold,
                      state.tail_weight, sigma, state.xi)


def size_quantile(prob, sigma, state: LatentState, config: ModelConfig):
    fam = _family_args(state, config)
    if fam == "gp":
        return _gp_quantile(prob, sigma, state.xi)
    if fam == "egp":
        return _egp_quantile(prob, sigma, state.xi, state.kappa)
    return _split_quantile(prob, state.bulk_shape, state.bulk_rate, config.split_threshold,
                           state.tail_weight, sigma, state.xi)


# ---------------------------------------------------------------------------
# inventory


@dataclass
class Inventory:
    """Per-unit event counts and the observed sizes in each unit."""

    counts: np.ndarray  # (n,) int64
    sizes: list  # list of (N_i,) float arrays
    size_unit: np.ndarray = field(init=False)  # (m,) unit index per observation
    size_value: np.ndarray = field(init=False)  # (m,) observed sizes, flat

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or np.any(self.counts < 0):
            raise ContractError("counts must be a 1-d array of nonnegative integers")
        if len(self.sizes) != self.counts.shape[0]:
            raise ContractError("sizes list length does not match unit count")
        self.sizes = [np.asarray(s, dtype=float) for s in self.sizes]
        units = []
        for i, s in enumerate(self.sizes):
            if s.shape[0] != self.counts[i]:
                raise ContractError(
                    f"unit {i} lists {s.shape[0]} sizes but has count {self.counts[i]}"
                )
            if np.any(~np.isfinite(s)) or np.any(s <= 0.0):
                raise ContractError(f"unit {i} has a nonpositive or non-finite size")
            units.append(np.full(s.shape[0], i, dtype=np.int64))
        self.size_unit = np.concatenate(units) if units else np.empty(0, dtype=np.int64)
        self.size_value = np.concatenate(self.sizes) if self.sizes else np.empty(0)

    @property
    def n(self):
        return self.counts.shape[0]

    @property
    def n_events(self):
        return int(self.size_value.shape[0])

    @classmethod
    def empty(cls, n):
        return cls(np.zeros(n, dtype=np.int64), [np.empty(0) for _ in range(n)])

    @classmethod
    def from_events(cls, unit_idx, values, n):
        """Build from flat (unit index, size) event pairs."""
        unit_idx = np.asarray(unit_idx, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        counts = np.bincount(unit_idx, minlength=n).astype(np.int64)
        sizes = [values[unit_idx == i] for i in range(n)]
        return cls(counts, sizes)


# ---------------------------------------------------------------------------
# likelihood, priors, posterior


def _count_loglik_from_eta(counts, eta):
    # Poisson log-pmf written in terms of eta = log(lambda); stays a -inf
    # sentinel under exp overflow instead of raising.
    with np.errstate(over="ignore"):
        lam = np.exp(eta)
    terms = counts * eta - lam - gammaln(counts + 1.0)
    return float(np.sum(terms)) if terms.size else 0.0


def loglik(inventory: Inventory, state: LatentState, covariates: CovariateMatrix,
           config: ModelConfig):
    """Joint log-likelihood: Poisson counts plus size densities, -inf on
    any out-of-support size."""
    if inventory.n != covariates.n:
        raise ContractError("inventory and covariates disagree on unit count")
    eta1 = count_linpred(state, covariates)
    total = _count_loglik_from_eta(inventory.counts, eta1)
    if inventory.n_events:
        eta2 = size_linpred(state, covariates, config.structure)
        with np.errstate(over="ignore"):
            sigma = np.exp(eta2[inventory.size_unit])
        contrib = size_logpdf(inventory.size_value, sigma, state, config)
        total = total + float(np.sum(contrib))
    if np.isnan(total):
        return -np.inf
    return total


def _normal_logpdf(x, sd):
    return -0.5 * np.log(2.0 * np.pi * sd * sd) - 0.5 * (x / sd) ** 2


def _gamma_logpdf(x, shape, rate):
    if x <= 0.0 or not np.isfinite(x):
        return -np.inf
    return shape * np.log(rate) + (shape - 1.0) * np.log(x) - rate * x - gammaln(shape)


def _truncnorm_logpdf(x, sd, lo, hi):
    if not (lo < x < hi):
        return -np.inf
    z = ndtr(hi / sd) - ndtr(lo / sd)
    return _normal_logpdf(x, sd) - np.log(z)


def logprior(state: LatentState, graph: SlopeUnitGraph, config: ModelConfig):
    """Sum of log prior densities over the active components of the state."""
    pr = config.priors
    total = float(np.sum(_normal_logpdf(state.beta_count, pr.beta_sd)))
    total += float(np.sum(_normal_logpdf(state.beta_size, pr.beta_sd)))
    if config.has_gamma:
        total += float(_normal_logpdf(state.gamma, pr.gamma_sd))
    total += _truncnorm_logpdf(state.xi, pr.xi_sd, pr.xi_lo, pr.xi_hi)
    if config.family == "egp":
        total += _gamma_logpdf(state.kappa, pr.kappa_shape, pr.kappa_rate)
    if config.family == "split":
        total += _gamma_logpdf(state.bulk_shape, pr.bulk_shape_shape, pr.bulk_shape_rate)
        total += _gamma_logpdf(state.bulk_rate, pr.bulk_rate_shape, pr.bulk_rate_rate)
        if not (0.0 < state.tail_weight < 1.0):
            return -np.inf
    if config.has_w1:
        if not (state.tau1 is not None and np.isfinite(state.tau1) and state.tau1 > 0):
            return -np.inf
        if config.fix_tau1 is None:
            total += _gamma_logpdf(state.tau1, pr.tau_shape, pr.tau_rate)
        total += icar_logdensity(IcarField(state.w1, state.tau1), graph)
    if config.has_w2:
        if not (state.tau2 is not None and np.isfinite(state.tau2) and state.tau2 > 0):
            return -np.inf
        if config.fix_tau2 is None:
            total += _gamma_logpdf(state.tau2, pr.tau_shape, pr.tau_rate)
        total += icar_logdensity(IcarField(state.w2, state.tau2), graph)
    if np.isnan(total):
        return -np.inf
    return total


def logposterior(inventory: Inventory, state: LatentState, graph: SlopeUnitGraph,
                 covariates: CovariateMatrix, config: ModelConfig):
    """Unnormalized log-posterior; -inf propagates from either term."""
    lp = logprior(state, graph, config)
    if lp == -np.inf:
        return -np.inf
    ll = loglik(inventory, state, covariates, config)
    total = ll + lp
    return -np.inf if np.isnan(total) else total


# ---------------------------------------------------------------------------
# forward simulation


def simulate_inventory(state: LatentState, graph: SlopeUnitGraph, covariates: CovariateMatrix,
                       config: ModelConfig, rng_seed):
    """Draw counts then sizes from the model; deterministic given a seed."""
    validate_state(state, graph, covariates, config)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    lam = np.exp(count_linpred(state, covariates))
    counts = rng.poisson(lam).astype(np.int64)
    sigma = np.exp(size_linpred(state, covariates, config.structure))
    total = int(counts.sum())
    u = rng.random(total)
    per_obs_sigma = np.repeat(sigma, counts)
    values = np.asarray(size_quantile(u, per_obs_sigma, state, config))
    sizes = np.split(values, np.cumsum(counts)[:-1])
    return Inventory(counts, list(sizes))


# ---------------------------------------------------------------------------
# parameter bookkeeping shared by sampler and outputs


def scalar_param_names(config: ModelConfig, p: int):
    """Ordered names of every scalar parameter for the given configuration."""
    names = [f"beta_count[{j}]" for j in range(p)]
    names += [f"beta_size[{j}]" for j in range(p)]
    if config.has_gamma:
        names.append("gamma")
    if config.has_w1:
        names.append("tau1")
    if config.has_w2:
        names.append("tau2")
    names.append("xi")
    if config.family == "egp":
        names.append("kappa")
    if config.family == "split":
        names += ["bulk_shape", "bulk_rate", "tail_weight"]
    return names


def state_scalars(state: LatentState, config: ModelConfig):
    """Scalar parameter values in the order of :func:`scalar_param_names`."""
    vals = list(state.beta_count) + list(state.beta_size)
    if config.has_gamma:
        vals.append(state.gamma)
    if config.has_w1:
        vals.append(state.tau1)
    if config.has_w2:
        vals.append(state.tau2)
    vals.append(state.xi)
    if config.family == "egp":
        vals.append(state.kappa)
    if config.family == "split":
        vals += [state.bulk_shape, state.bulk_rate, state.tail_weight]
    return np.array(vals, dtype=float)


def resolve_split_threshold(config: ModelConfig, inventory: Inventory):
    """Fix the split threshold before fitting: explicit value if configured,
    otherwise the pooled empirical size quantile."""
    if config.family != "split" or config.split_threshold is not None:
        return config
    if inventory.n_events == 0:
        raise ContractError("cannot set a split threshold from an inventory with no sizes")
    u = float(np.quantile(inventory.size_value, config.threshold_quantile))
    if u <= 0.0:
        raise ContractError("empirical split threshold is nonpositive")
    return replace(config, split_threshold=u)
