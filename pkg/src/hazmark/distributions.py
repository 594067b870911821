"""Size-distribution kernels and the Poisson count law.

Three families model event sizes on (0, inf):

* ``gp``    -- generalized Pareto with scale ``sigma`` and shape ``xi``.
* ``egp``   -- extended generalized Pareto (power-of-GP form): the GP cdf
  raised to ``kappa``, which keeps the GP upper tail while freeing the
  lower-tail behavior; ``kappa = 1`` collapses to the GP.
* ``split`` -- spliced bulk--tail model: a gamma bulk truncated at a fixed
  threshold carrying mass ``1 - tail_weight``, and a GP for exceedances
  above the threshold carrying mass ``tail_weight``.

All kernels are numerically stable through the ``xi -> 0`` limit (the
branch switches at ``|xi| < 1e-8`` to a second-order expansion) and return
``-inf`` for points outside the support instead of raising, so samplers can
reject gracefully.  Invalid *parameters* raise :class:`ParameterError`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import gammainc, gammaincinv, gammaln

from .errors import ContractError, ParameterError

__all__ = [
    "GpParams",
    "EgpParams",
    "SplitParams",
    "SizeFamily",
    "gp_cdf",
    "gp_logpdf",
    "gp_quantile",
    "egp_cdf",
    "egp_logpdf",
    "egp_quantile",
    "split_cdf",
    "split_logpdf",
    "split_quantile",
    "family_cdf",
    "family_logpdf",
    "family_quantile",
    "size_sample",
    "poisson_logpmf",
]

# Shape values below this magnitude use the exponential-limit expansion.
XI_EPS = 1e-8


# ---------------------------------------------------------------------------
# parameter records


@dataclass(frozen=True)
class GpParams:
    """Generalized Pareto parameters: scale > 0 and real shape.

    Support is [0, inf) for xi >= 0 and [0, -sigma/xi) for xi < 0.
    """

    sigma: float
    xi: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ParameterError(f"gp scale must be finite and > 0, got {self.sigma}")
        if not np.isfinite(self.xi):
            raise ParameterError(f"gp shape must be finite, got {self.xi}")


@dataclass(frozen=True)
class EgpParams:
    """Extended GP parameters; kappa > 0 controls the lower tail."""

    sigma: float
    xi: float
    kappa: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ParameterError(f"egp scale must be finite and > 0, got {self.sigma}")
        if not np.isfinite(self.xi):
            raise ParameterError(f"egp shape must be finite, got {self.xi}")
        if not (np.isfinite(self.kappa) and self.kappa > 0):
            raise ParameterError(f"egp kappa must be finite and > 0, got {self.kappa}")


@dataclass(frozen=True)
class SplitParams:
    """Spliced gamma-bulk / GP-tail parameters.

    The gamma(bulk_shape, bulk_rate) bulk is truncated to (0, threshold] and
    carries mass 1 - tail_weight; exceedances of the threshold follow the GP
    ``tail`` and carry mass tail_weight.  The density integrates to one but is
    in general discontinuous at the threshold.
    """

    bulk_shape: float
    bulk_rate: float
    threshold: float
    tail_weight: float
    tail: GpParams

    def __post_init__(self):
        for name in ("bulk_shape", "bulk_rate", "threshold"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ParameterError(f"split {name} must be finite and > 0, got {v}")
        if not (0.0 < self.tail_weight < 1.0):
            raise ParameterError(
                f"split tail_weight must lie in (0, 1), got {self.tail_weight}"
            )
        if not isinstance(self.tail, GpParams):
            raise ParameterError("split tail must be a GpParams record")
        # bulk mass below the threshold must be representable
        if gammainc(self.bulk_shape, self.bulk_rate * self.threshold) <= 0.0:
            raise ParameterError(
                "split threshold carries no gamma-bulk mass; raise the threshold"
            )


FamilyParams = Union[GpParams, EgpParams, SplitParams]

_VARIANT_PARAM_TYPES = {"gp": GpParams, "egp": EgpParams, "split": SplitParams}


@dataclass(frozen=True)
class SizeFamily:
    """Tagged union over the three size families; exactly one variant active."""

    variant: str
    params: FamilyParams

    def __post_init__(self):
        if self.variant not in _VARIANT_PARAM_TYPES:
            raise ParameterError(f"unknown size family {self.variant!r}")
        want = _VARIANT_PARAM_TYPES[self.variant]
        if type(self.params) is not want:
            raise ParameterError(
                f"family {self.variant!r} requires {want.__name__}, "
                f"got {type(self.params).__name__}"
            )

    @classmethod
    def gp(cls, sigma, xi):
        return cls("gp", GpParams(sigma, xi))

    @classmethod
    def egp(cls, sigma, xi, kappa):
        return cls("egp", EgpParams(sigma, xi, kappa))

    @classmethod
    def split(cls, bulk_shape, bulk_rate, threshold, tail_weight, tail_sigma, xi):
        return cls(
            "split",
            SplitParams(bulk_shape, bulk_rate, threshold, tail_weight, GpParams(tail_sigma, xi)),
        )


# ---------------------------------------------------------------------------
# broadcasting GP cores (sigma/xi may be arrays; used by the joint model
# with per-unit scales)


def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0.0):
        raise ParameterError("gp scale must be finite and > 0")
    return sigma


def _gp_log_sf(x, sigma, xi):
    """log survival of the GP; 0 for x <= 0, -inf beyond a finite endpoint."""
    z = np.asarray(x, dtype=float) / sigma
    if np.ndim(xi) == 0:
        # scalar shape: the common case in the model, where only the scale
        # varies by unit
        xi = float(xi)
        if abs(xi) < XI_EPS:
            out = -z + (0.5 * xi) * z**2 - (xi * xi / 3.0) * z**3
        else:
            t = xi * z
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.where(t <= -1.0, -np.inf, -np.log1p(np.maximum(t, -1.0)) / xi)
        return np.where(z < 0.0, 0.0, out)

    xi = np.broadcast_to(np.asarray(xi, dtype=float), np.broadcast_shapes(z.shape, np.shape(xi)))
    z = np.broadcast_to(z, xi.shape)
    out = np.empty(xi.shape, dtype=float)

    small = np.abs(xi) < XI_EPS
    zs = z[small]
    out[small] = -zs + xi[small] * zs**2 / 2.0 - xi[small] ** 2 * zs**3 / 3.0

    big = ~small
    t = xi[big] * z[big]
    with np.errstate(divide="ignore", invalid="ignore"):
        val = -np.log1p(t) / xi[big]
    val = np.where(t <= -1.0, -np.inf, val)
    out[big] = val

    out = np.where(z < 0.0, 0.0, out)
    return out


def _log1mexp(a):
    """log(1 - exp(a)) for a <= 0, accurate in both regimes."""
    a = np.asarray(a, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        small = a > -np.log(2.0)
        out = np.where(small, np.log(-np.expm1(a)), np.log1p(-np.exp(a)))
    return out


def _gp_cdf(x, sigma, xi):
    lsf = _gp_log_sf(x, sigma, xi)
    with np.errstate(over="ignore"):
        out = -np.expm1(lsf)
    return np.clip(out, 0.0, 1.0)


def _gp_logcdf(x, sigma, xi):
    return _log1mexp(_gp_log_sf(x, sigma, xi))


def _gp_logpdf(x, sigma, xi):
    x = np.asarray(x, dtype=float)
    z = x / sigma
    if np.ndim(xi) == 0:
        xi = float(xi)
        logsig = np.log(np.asarray(sigma, dtype=float))
        if abs(xi) < XI_EPS:
            out = -logsig - z - xi * (z - 0.5 * z**2) - xi * xi * (z**3 / 3.0 - 0.5 * z**2)
        else:
            t = xi * z
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.where(
                    t <= -1.0,
                    -np.inf,
                    -logsig - (1.0 + 1.0 / xi) * np.log1p(np.maximum(t, -1.0)),
                )
        return np.where(z < 0.0, -np.inf, out)

    xi = np.broadcast_to(np.asarray(xi, dtype=float), np.broadcast_shapes(z.shape, np.shape(xi)))
    z = np.broadcast_to(z, xi.shape)
    logsig = np.broadcast_to(np.log(np.asarray(sigma, dtype=float)), xi.shape)
    out = np.empty(xi.shape, dtype=float)

    small = np.abs(xi) < XI_EPS
    zs = z[small]
    xs = xi[small]
    out[small] = -logsig[small] - zs - xs * (zs - zs**2 / 2.0) - xs**2 * (zs**3 / 3.0 - zs**2 / 2.0)

    big = ~small
    t = xi[big] * z[big]
    with np.errstate(divide="ignore", invalid="ignore"):
        val = -logsig[big] - (1.0 + 1.0 / xi[big]) * np.log1p(t)
    val = np.where(t <= -1.0, -np.inf, val)
    out[big] = val

    out = np.where(z < 0.0, -np.inf, out)
    return out


def _gp_quantile(p, sigma, xi):
    p = np.asarray(p, dtype=float)
    if np.any(p < 0.0) or np.any(p >= 1.0):
        raise ParameterError("probability must lie in [0, 1)")
    t = -np.log1p(-p)
    if np.ndim(xi) == 0:
        xi = float(xi)
        if abs(xi) < XI_EPS:
            return sigma * (t + (0.5 * xi) * t**2 + (xi * xi / 6.0) * t**3)
        return sigma * np.expm1(xi * t) / xi

    shape = np.broadcast_shapes(t.shape, np.shape(sigma), np.shape(xi))
    xi = np.broadcast_to(np.asarray(xi, dtype=float), shape)
    t = np.broadcast_to(t, shape)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), shape)
    out = np.empty(shape, dtype=float)

    small = np.abs(xi) < XI_EPS
    ts = t[small]
    out[small] = sigma[small] * (ts + xi[small] * ts**2 / 2.0 + xi[small] ** 2 * ts**3 / 6.0)

    big = ~small
    out[big] = sigma[big] * np.expm1(xi[big] * t[big]) / xi[big]
    return out


# eGP cores: cdf = gp_cdf ** kappa


def _egp_cdf(x, sigma, xi, kappa):
    with np.errstate(over="ignore"):
        return np.exp(kappa * _gp_logcdf(x, sigma, xi))


def _egp_logpdf(x, sigma, xi, kappa):
    logcdf = _gp_logcdf(x, sigma, xi)
    km1 = np.asarray(kappa, dtype=float) - 1.0
    with np.errstate(invalid="ignore"):
        term = km1 * logcdf
    term = np.where(km1 == 0.0, 0.0, term)
    return np.log(kappa) + term + _gp_logpdf(x, sigma, xi)


def _egp_quantile(p, sigma, xi, kappa):
    p = np.asarray(p, dtype=float)
    if np.any(p < 0.0) or np.any(p >= 1.0):
        raise ParameterError("probability must lie in [0, 1)")
    return _gp_quantile(p ** (1.0 / kappa), sigma, xi)


# split cores: gamma bulk truncated at u, GP tail above it


def _split_bulk_logmass(bulk_shape, bulk_rate, threshold):
    fu = gammainc(bulk_shape, bulk_rate * threshold)
    return fu


def _split_cdf(x, bulk_shape, bulk_rate, threshold, tail_weight, tail_sigma, xi):
    x = np.asarray(x, dtype=float)
    fu = _split_bulk_logmass(bulk_shape, bulk_rate, threshold)
    below = (1.0 - tail_weight) * gammainc(bulk_shape, bulk_rate * np.maximum(x, 0.0)) / fu
    above = (1.0 - tail_weight) + tail_weight * _gp_cdf(x - threshold, tail_sigma, xi)
    return np.where(x <= threshold, below, above)


def _split_logpdf(x, bulk_shape, bulk_rate, threshold, tail_weight, tail_sigma, xi):
    x = np.asarray(x, dtype=float)
    fu = _split_bulk_logmass(bulk_shape, bulk_rate, threshold)
    xb = np.where(x > 0.0, x, 1.0)  # placeholder, masked below
    bulk = (
        np.log1p(-tail_weight)
        + bulk_shape * np.log(bulk_rate)
        + (bulk_shape - 1.0) * np.log(xb)
        - bulk_rate * xb
        - gammaln(bulk_shape)
        - np.log(fu)
    )
    tail = np.log(tail_weight) + _gp_logpdf(x - threshold, tail_sigma, xi)
    out = np.where(x <= threshold, bulk, tail)
    return np.where(x <= 0.0, -np.inf, out)


def _split_quantile(p, bulk_shape, bulk_rate, threshold, tail_weight, tail_sigma, xi):
    p = np.asarray(p, dtype=float)
    if np.any(p < 0.0) or np.any(p >= 1.0):
        raise ParameterError("probability must lie in [0, 1)")
    fu = _split_bulk_logmass(bulk_shape, bulk_rate, threshold)
    bulk_mass = 1.0 - tail_weight
    pb = np.clip(p / bulk_mass, 0.0, 1.0)
    below = gammaincinv(bulk_shape, pb * fu) / bulk_rate
    pt = np.clip((p - bulk_mass) / tail_weight, 0.0, 1.0 - 1e-16)
    above = threshold + _gp_quantile(pt, tail_sigma, xi)
    return np.where(p <= bulk_mass, below, above)


# ---------------------------------------------------------------------------
# public record-based operations


def _maybe_scalar(out, x):
    if np.ndim(x) == 0:
        return float(np.asarray(out))
    return np.asarray(out)


def gp_cdf(x, p: GpParams):
    """GP distribution function, clamped to [0, 1]; 1 beyond a finite endpoint."""
    return _maybe_scalar(_gp_cdf(x, _check_sigma(p.sigma), p.xi), x)


def gp_logpdf(x, p: GpParams):
    """GP log-density; -inf outside the support."""
    return _maybe_scalar(_gp_logpdf(x, _check_sigma(p.sigma), p.xi), x)


def gp_quantile(prob, p: GpParams):
    """GP quantile for prob in [0, 1); inverse of :func:`gp_cdf`."""
    return _maybe_scalar(_gp_quantile(prob, _check_sigma(p.sigma), p.xi), prob)


def egp_cdf(x, p: EgpParams):
    """Extended-GP distribution function (GP cdf raised to kappa)."""
    return _maybe_scalar(_egp_cdf(x, _check_sigma(p.sigma), p.xi, p.kappa), x)


def egp_logpdf(x, p: EgpParams):
    """Extended-GP log-density; -inf outside the support."""
    return _maybe_scalar(_egp_logpdf(x, _check_sigma(p.sigma), p.xi, p.kappa), x)


def egp_quantile(prob, p: EgpParams):
    """Extended-GP quantile: the GP quantile at prob**(1/kappa)."""
    return _maybe_scalar(_egp_quantile(prob, _check_sigma(p.sigma), p.xi, p.kappa), prob)


def split_cdf(x, p: SplitParams):
    """Spliced-model distribution function; continuous at the threshold."""
    return _maybe_scalar(
        _split_cdf(x, p.bulk_shape, p.bulk_rate, p.threshold, p.tail_weight, p.tail.sigma, p.tail.xi),
        x,
    )


def split_logpdf(x, p: SplitParams):
    """Spliced-model log-density; -inf for x <= 0."""
    return _maybe_scalar(
        _split_logpdf(x, p.bulk_shape, p.bulk_rate, p.threshold, p.tail_weight, p.tail.sigma, p.tail.xi),
        x,
    )


def split_quantile(prob, p: SplitParams):
    """Spliced-model quantile: truncated-gamma inverse below the splice mass,
    shifted GP quantile above it."""
    return _maybe_scalar(
        _split_quantile(prob, p.bulk_shape, p.bulk_rate, p.threshold, p.tail_weight, p.tail.sigma, p.tail.xi),
        prob,
    )


_CDF = {
    "gp": lambda x, p: gp_cdf(x, p),
    "egp": lambda x, p: egp_cdf(x, p),
    "split": lambda x, p: split_cdf(x, p),
}
_LOGPDF = {
    "gp": lambda x, p: gp_logpdf(x, p),
    "egp": lambda x, p: egp_logpdf(x, p),
    "split": lambda x, p: split_logpdf(x, p),
}
_QUANTILE = {
    "gp": lambda q, p: gp_quantile(q, p),
    "egp": lambda q, p: egp_quantile(q, p),
    "split": lambda q, p: split_quantile(q, p),
}


def family_cdf(x, fam: SizeFamily):
    return _CDF[fam.variant](x, fam.params)


def family_logpdf(x, fam: SizeFamily):
    return _LOGPDF[fam.variant](x, fam.params)


def family_quantile(prob, fam: SizeFamily):
    return _QUANTILE[fam.variant](prob, fam.params)


def size_sample(n, fam: SizeFamily, rng_seed):
    """Draw ``n`` sizes by the quantile transform of uniforms.

    ``rng_seed`` may be an integer seed or a ``numpy.random.Generator``;
    output is deterministic given a seed.
    """
    if n < 0:
        raise ContractError(f"sample count must be >= 0, got {n}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if n == 0:
        return np.empty(0, dtype=float)
    u = rng.random(n)
    return np.asarray(family_quantile(u, fam))


def poisson_logpmf(k, lam):
    """Poisson log-pmf k*log(lam) - lam - log(k!); lam must be > 0.

    Negative counts get the -inf sentinel; non-integral counts are a
    contract violation.
    """
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(~np.isfinite(lam_arr)) or np.any(lam_arr <= 0.0):
        raise ParameterError("poisson rate must be finite and > 0")
    k_arr = np.asarray(k, dtype=float)
    if np.any(k_arr != np.floor(k_arr)):
        raise ContractError("poisson count must be an integer")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = k_arr * np.log(lam_arr) - lam_arr - gammaln(k_arr + 1.0)
    out = np.where(k_arr < 0.0, -np.inf, out)
    if np.ndim(k) == 0 and np.ndim(lam) == 0:
        return float(np.asarray(out))
    return np.asarray(out)
