"""Posterior hazard products and model-comparison scores.

Per slope unit and posterior draw, three probabilities are computed:

* susceptibility      P(N >= 1)                = 1 - exp(-lambda)
* size exceedance     P(A > s | occurrence)    = 1 - F(s)
* combined hazard     P(some event exceeds s)  = 1 - exp(-lambda * (1 - F(s)))

The combined form follows from thinning the Poisson event stream by the
probability that an event's size exceeds ``s``; it is bounded above by the
susceptibility, with equality when F(s) = 0.  Surfaces summarize the per-draw
probabilities (not per-draw parameters) over the posterior sample.

Scoring compares fitted size families on held-out data with the pinball
(quantile) loss at high quantiles -- against the *mixture* predictive
quantile, obtained by root-finding on the draw-averaged CDF -- and with the
sample-based CRPS for both sizes and counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .distributions import (
    _egp_cdf,
    _egp_quantile,
    _gp_cdf,
    _gp_quantile,
    _split_cdf,
    _split_quantile,
)
from .errors import ContractError
from .graph import CovariateMatrix
from .mcmc import PosteriorSamples
from .model import (
    Inventory,
    LatentState,
    ModelConfig,
    count_linpred,
    size_cdf,
    size_linpred,
)
from .seeding import rng_stream

__all__ = [
    "HazardSurface",
    "ScoreReport",
    "ModelScore",
    "susceptibility",
    "exceedance_given_occurrence",
    "combined_hazard",
    "hazard_surface",
    "score_models",
    "qq_points",
    "crps_sample",
    "pinball_loss",
]


# ---------------------------------------------------------------------------
# per-draw hazard functionals


def susceptibility(draw: LatentState, covariates: CovariateMatrix):
    """P(at least one event) per unit: 1 - exp(-lambda)."""
    lam = np.exp(count_linpred(draw, covariates))
    return -np.expm1(-lam)


def exceedance_given_occurrence(draw: LatentState, covariates: CovariateMatrix, s,
                                config: ModelConfig):
    """P(event size > s | an event occurs) per unit."""
    if s < 0:
        raise ContractError("size threshold must be >= 0")
    sigma = np.exp(size_linpred(draw, covariates, config.structure))
    return 1.0 - np.asarray(size_cdf(s, sigma, draw, config))


def combined_hazard(draw: LatentState, covariates: CovariateMatrix, s, config: ModelConfig):
    """P(at least one event of size > s) per unit, by Poisson thinning."""
    if s < 0:
        raise ContractError("size threshold must be >= 0")
    lam = np.exp(count_linpred(draw, covariates))
    exceed = exceedance_given_occurrence(draw, covariates, s, config)
    return -np.expm1(-lam * exceed)


# ---------------------------------------------------------------------------
# posterior draws as arrays


class _DrawArrays:
    """Posterior draws reshaped to (n_total_draws, ...) arrays."""

    def __init__(self, samples: PosteriorSamples, covariates: CovariateMatrix):
        config = samples.config
        p = covariates.p
        x = covariates.values
        self.config = config
        bc = np.stack([samples.stacked(f"beta_count[{j}]") for j in range(p)], axis=1)
        bs = np.stack([samples.stacked(f"beta_size[{j}]") for j in range(p)], axis=1)
        self.n_total = bc.shape[0]
        eta1 = bc @ x.T
        if covariates.log_offset is not None:
            eta1 = eta1 + covariates.log_offset
        eta2 = bs @ x.T
        if config.has_w1:
            w1 = samples.fields["w1"].reshape(self.n_total, -1)
            eta1 = eta1 + w1
            if config.has_gamma:
                eta2 = eta2 + samples.stacked("gamma")[:, None] * w1
        if config.has_w2:
            eta2 = eta2 + samples.fields["w2"].reshape(self.n_total, -1)
        with np.errstate(over="ignore"):
            self.lam = np.exp(eta1)
            self.sigma = np.exp(eta2)
        self.xi = samples.stacked("xi")
        self.kappa = samples.stacked("kappa") if config.family == "egp" else None
        if config.family == "split":
            self.bulk_shape = samples.stacked("bulk_shape")
            self.bulk_rate = samples.stacked("bulk_rate")
            self.tail_weight = samples.stacked("tail_weight")

    def _glob(self, idx):
        """Global parameter arrays gathered at draw indices (any shape)."""
        out = {"xi": self.xi[idx]}
        if self.kappa is not None:
            out["kappa"] = self.kappa[idx]
        if self.config.family == "split":
            out["bulk_shape"] = self.bulk_shape[idx]
            out["bulk_rate"] = self.bulk_rate[idx]
            out["tail_weight"] = self.tail_weight[idx]
        return out

    def cdf(self, x, sigma, idx):
        """Family cdf with per-draw global parameters at draw indices idx."""
        g = self._glob(idx)
        if self.config.family == "gp":
            return _gp_cdf(x, sigma, g["xi"])
        if self.config.family == "egp":
            return _egp_cdf(x, sigma, g["xi"], g["kappa"])
        return _split_cdf(x, g["bulk_shape"], g["bulk_rate"], self.config.split_threshold,
                          g["tail_weight"], sigma, g["xi"])

    def quantile(self, prob, sigma, idx):
        g = self._glob(idx)
        if self.config.family == "gp":
            return _gp_quantile(prob, sigma, g["xi"])
        if self.config.family == "egp":
            return _egp_quantile(prob, sigma, g["xi"], g["kappa"])
        return _split_quantile(prob, g["bulk_shape"], g["bulk_rate"], self.config.split_threshold,
                               g["tail_weight"], sigma, g["xi"])


# ---------------------------------------------------------------------------
# hazard surfaces


@dataclass
class HazardSurface:
    """Per-unit posterior summaries of the three hazard quantities at one
    evaluation size threshold."""

    threshold: float
    labels: tuple
    susceptibility_mean: np.ndarray
    susceptibility_median: np.ndarray
    susceptibility_q05: np.ndarray
    susceptibility_q95: np.ndarray
    exceedance_mean: np.ndarray
    exceedance_median: np.ndarray
    exceedance_q05: np.ndarray
    exceedance_q95: np.ndarray
    hazard_mean: np.ndarray
    hazard_median: np.ndarray
    hazard_q05: np.ndarray
    hazard_q95: np.ndarray

    @property
    def n(self):
        return self.susceptibility_mean.shape[0]


def _summaries(prob_draws):
    return (
        prob_draws.mean(axis=0),
        np.quantile(prob_draws, 0.5, axis=0),
        np.quantile(prob_draws, 0.05, axis=0),
        np.quantile(prob_draws, 0.95, axis=0),
    )


def hazard_surface(samples: PosteriorSamples, covariates: CovariateMatrix, s):
    """Summaries over posterior draws of susceptibility, exceedance, and
    combined hazard at size threshold ``s``."""
    if samples.n_draws == 0:
        raise ContractError("no posterior draws to summarize")
    if s < 0:
        raise ContractError("size threshold must be >= 0")
    arr = _DrawArrays(samples, covariates)
    idx = np.arange(arr.n_total)[:, None]  # broadcast globals over units
    susc = -np.expm1(-arr.lam)
    exceed = 1.0 - np.asarray(arr.cdf(s, arr.sigma, idx))
    haz = -np.expm1(-arr.lam * exceed)

    sm, smed, s05, s95 = _summaries(susc)
    em, emed, e05, e95 = _summaries(exceed)
    hm, hmed, h05, h95 = _summaries(haz)
    return HazardSurface(
        threshold=float(s),
        labels=tuple(samples.labels),
        susceptibility_mean=sm, susceptibility_median=smed,
        susceptibility_q05=s05, susceptibility_q95=s95,
        exceedance_mean=em, exceedance_median=emed,
        exceedance_q05=e05, exceedance_q95=e95,
        hazard_mean=hm, hazard_median=hmed,
        hazard_q05=h05, hazard_q95=h95,
    )


# ---------------------------------------------------------------------------
# scoring


def pinball_loss(y, q_pred, level):
    """Quantile (pinball) loss of predicted quantile q_pred at the given level."""
    y = np.asarray(y, dtype=float)
    q_pred = np.asarray(q_pred, dtype=float)
    diff = y - q_pred
    return np.where(diff >= 0.0, level * diff, (level - 1.0) * diff)


def crps_sample(y, draws):
    """Two-sample CRPS estimate from predictive draws.

    mean |X - y| - 0.5 mean |X - X'| with the pairwise term computed by the
    sorted-weights identity.  ``draws`` may be (m,) for one observation or
    (n_obs, m) for a batch; returns a scalar or (n_obs,) accordingly.
    """
    draws = np.asarray(draws, dtype=float)
    single = draws.ndim == 1
    if single:
        draws = draws[None, :]
        y = np.atleast_1d(np.asarray(y, dtype=float))
    m = draws.shape[1]
    term1 = np.mean(np.abs(draws - np.asarray(y, dtype=float)[:, None]), axis=1)
    srt = np.sort(draws, axis=1)
    weights = 2.0 * np.arange(m) - m + 1.0
    pair_sum = np.sum(srt * weights, axis=1)  # sum_ij |x_i - x_j| / 2
    term2 = pair_sum / (m * m)
    out = term1 - term2
    return float(out[0]) if single else out


def _mixture_quantile(level, sigma_draws, arr: _DrawArrays, draw_idx):
    """Quantile of the draw-averaged (mixture) CDF by bracketed root-finding."""
    per_draw = np.asarray(arr.quantile(level, sigma_draws, draw_idx))
    lo, hi = float(per_draw.min()), float(per_draw.max())
    if hi - lo < 1e-12:
        return hi

    def f(x):
        return float(np.mean(arr.cdf(x, sigma_draws, draw_idx))) - level

    return float(brentq(f, lo, hi, xtol=1e-10, rtol=1e-12))


@dataclass
class ModelScore:
    pinball: dict  # level -> mean pinball loss over held-out sizes
    crps_size: float
    crps_count: float
    qq: np.ndarray  # (m, 2) model quantile vs observed order statistic


@dataclass
class ScoreReport:
    quantile_levels: tuple
    models: dict  # name -> ModelScore


def score_models(held_out: Inventory, samples_by_model: dict, covariates: CovariateMatrix,
                 quantile_levels=(0.9, 0.95, 0.99), crps_draws=200, seed=0):
    """Score fitted models on shared held-out data.

    For every observed size: pinball loss at each level against the unit's
    posterior-predictive mixture quantile.  CRPS for sizes and counts uses
    ``crps_draws`` posterior-predictive draws per observation (draw index and
    size resampled from named streams of ``seed``, so identical sample sets
    give identical scores).
    """
    if held_out.n != covariates.n:
        raise ContractError("held-out inventory and covariates disagree on unit count")
    report = ScoreReport(quantile_levels=tuple(quantile_levels), models={})
    for name in sorted(samples_by_model):
        samples = samples_by_model[name]
        if samples.labels and len(samples.labels) != held_out.n:
            raise ContractError(f"model {name!r} was fitted on a different unit set")
        arr = _DrawArrays(samples, covariates)
        d_total = arr.n_total
        all_draws = np.arange(d_total)

        pinball = {}
        units_with_obs = np.flatnonzero(held_out.counts > 0)
        for level in quantile_levels:
            losses = []
            for i in units_with_obs:
                q_i = _mixture_quantile(level, arr.sigma[:, i], arr, all_draws)
                losses.append(pinball_loss(held_out.sizes[i], q_i, level))
            pinball[level] = float(np.mean(np.concatenate(losses))) if losses else float("nan")

        rng = rng_stream(seed, "score", name, "size")
        if held_out.n_events:
            obs_unit = held_out.size_unit
            m = held_out.n_events
            d_idx = rng.integers(d_total, size=(m, crps_draws))
            u = rng.random((m, crps_draws))
            sig = arr.sigma[d_idx, obs_unit[:, None]]
            draws = np.asarray(arr.quantile(u, sig, d_idx))
            crps_size = float(np.mean(crps_sample(held_out.size_value, draws)))
        else:
            crps_size = float("nan")

        rng_c = rng_stream(seed, "score", name, "count")
        d_idx = rng_c.integers(d_total, size=(held_out.n, crps_draws))
        lam = arr.lam[d_idx, np.arange(held_out.n)[:, None]]
        count_draws = rng_c.poisson(lam).astype(float)
        crps_count = float(np.mean(crps_sample(held_out.counts.astype(float), count_draws)))

        qq = qq_points(held_out, samples, covariates)
        report.models[name] = ModelScore(pinball=pinball, crps_size=crps_size,
                                         crps_count=crps_count, qq=qq)
    return report


def qq_points(inventory: Inventory, samples: PosteriorSamples, covariates: CovariateMatrix,
              max_draws=400, grid_size=2048):
    """Observed size order statistics vs pooled posterior-predictive quantiles.

    The pooled predictive is the rate-weighted mixture over units and draws
    (a random event lands in unit i proportionally to lambda_i), evaluated on
    a log-spaced grid and inverted by monotone interpolation at plotting
    positions k/(m+1).
    """
    if inventory.n_events < 1:
        raise ContractError("qq_points requires at least one observed size")
    arr = _DrawArrays(samples, covariates)
    d_total = arr.n_total
    take = np.unique(np.linspace(0, d_total - 1, min(max_draws, d_total)).astype(int))

    obs_sorted = np.sort(inventory.size_value)
    m = obs_sorted.shape[0]
    positions = np.arange(1, m + 1) / (m + 1.0)

    # grid upper end: generous envelope of the highest needed quantile;
    # scalar draw index keeps the global parameters scalar (fast kernel path)
    p_hi = max(positions[-1], 0.999)
    hi = 0.0
    for d in take:
        q = np.asarray(arr.quantile(p_hi, arr.sigma[d], int(d)))
        hi = max(hi, float(q.max()))
    hi = max(hi, float(obs_sorted[-1]))
    lo = min(float(obs_sorted[0]) / 100.0, hi / 1e6)
    grid = np.concatenate([[0.0], np.geomspace(max(lo, 1e-12), hi * 1.05, grid_size - 1)])

    cdf_acc = np.zeros(grid_size)
    wsum = 0.0
    for d in take:
        lam_d = arr.lam[d]
        f = np.asarray(arr.cdf(grid[:, None], arr.sigma[d][None, :], int(d)))
        cdf_acc += f @ lam_d
        wsum += float(lam_d.sum())
    pooled = cdf_acc / wsum

    model_q = np.interp(positions, pooled, grid)
    return np.column_stack([model_q, obs_sorted])
