"""Adaptive Metropolis-within-Gibbs sampler for the joint model.

One sweep consists of:

(a) single-site random-walk updates of every active field component with
    per-site adapted step sizes, accepted through the *local* posterior
    ratio (only the unit's likelihood terms and the iCAR terms of its
    neighborhood enter the ratio);
(b) re-centering of each field per connected component, with the subtracted
    global mean pushed into the corresponding intercept so the likelihood is
    preserved;
(c) block random-walk updates for the count fixed effects, the size fixed
    effects, and the global parameters on unconstrained scales (log for
    positives, logit for the tail weight, shifted log for the tail shape)
    with the transform Jacobians in the acceptance ratio;
(d) conjugate Gibbs draws of the iCAR precisions given the quadratic forms.

Sites that share no edge are updated simultaneously (graph coloring), which
is an exact reordering of the sequential single-site scan because local
ratios never involve other sites of the same color.  Step sizes adapt by
Robbins-Monro during burn-in only and are frozen afterwards.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, ndtri
from scipy.stats import rankdata

from .errors import ContractError, InitializationError, ParameterError
from .graph import SlopeUnitGraph, center_by_component, icar_quadform
from .model import (
    Inventory,
    LatentState,
    ModelConfig,
    _gamma_logpdf,
    _normal_logpdf,
    _truncnorm_logpdf,
    count_linpred,
    loglik,
    logposterior,
    resolve_split_threshold,
    scalar_param_names,
    size_linpred,
    size_logpdf,
    state_scalars,
    validate_state,
)
from .seeding import rng_stream

__all__ = [
    "SamplerConfig",
    "PosteriorSamples",
    "Diagnostics",
    "AdaptationLedger",
    "run_chain",
    "local_delta",
    "adapt_step",
    "diagnostics",
    "initial_state",
]

_STEP_MIN, _STEP_MAX = 1e-8, 1e8


@dataclass(frozen=True)
class SamplerConfig:
    """Chain length, adaptation, and reproducibility settings."""

    n_iter: int = 4000
    burn_in: int = 2000
    thin: int = 1
    n_chains: int = 2
    seed: int = 0
    adapt_window: int = 50
    target_accept_single: float = 0.44
    target_accept_block: float = 0.234
    step_size_field: float = 0.5
    step_size_beta: float = 0.1
    step_size_global: float = 0.1
    init_jitter: float = 0.1

    def __post_init__(self):
        if self.n_iter <= 0 or self.burn_in < 0 or self.burn_in >= self.n_iter:
            raise ParameterError("require 0 <= burn_in < n_iter")
        if self.thin < 1:
            raise ParameterError("thin must be >= 1")
        if self.n_chains < 1:
            raise ParameterError("n_chains must be >= 1")
        if self.adapt_window < 1:
            raise ParameterError("adapt_window must be >= 1")

    @property
    def n_draws(self):
        return (self.n_iter - self.burn_in) // self.thin


@dataclass
class PosteriorSamples:
    """Retained draws for all chains plus acceptance and adaptation records."""

    scalar_names: list
    scalars: np.ndarray  # (n_chains, n_draws, n_scalars)
    fields: dict  # name -> (n_chains, n_draws, n_units)
    acceptance: dict  # block -> (n_chains,) post-burn-in acceptance rate
    step_trace: dict  # block -> (n_chains, n_snapshots, block_dim) log step sizes
    config: ModelConfig
    sampler: SamplerConfig
    labels: tuple = ()

    @property
    def n_chains(self):
        return self.scalars.shape[0]

    @property
    def n_draws(self):
        return self.scalars.shape[1]

    def scalar(self, name):
        """Draws of one scalar parameter as (n_chains, n_draws)."""
        try:
            j = self.scalar_names.index(name)
        except ValueError:
            raise KeyError(name) from None
        return self.scalars[:, :, j]

    def column_names(self):
        names = list(self.scalar_names)
        for fname in sorted(self.fields):
            names += [f"{fname}[{i}]" for i in range(self.fields[fname].shape[2])]
        return names

    def column(self, name):
        """Any scalar column, including expanded field components."""
        if "[" in name and name.split("[")[0] in self.fields:
            fname, idx = name[:-1].split("[")
            return self.fields[fname][:, :, int(idx)]
        return self.scalar(name)

    def stacked(self, name):
        """All chains concatenated: (n_chains * n_draws,)."""
        return self.column(name).reshape(-1)


@dataclass
class Diagnostics:
    """Split R-hat, effective sample size, and final acceptance per block."""

    rhat: dict
    ess: dict
    acceptance: dict
    degenerate: list = field(default_factory=list)


@dataclass
class AdaptationLedger:
    """Window acceptance counts feeding one Robbins-Monro adaptation event."""

    accepted: np.ndarray  # or scalar ints
    attempted: np.ndarray
    events: int  # 1-based count of adaptation events so far


def adapt_step(ledger: AdaptationLedger, current_scale, target):
    """Nudge proposal scales toward the target acceptance rate.

    Log-scale moves by (observed - target)/sqrt(event count); the scale is
    clamped to [1e-8, 1e8].  Called during burn-in only; afterwards scales
    are frozen to preserve ergodicity.
    """
    accepted = np.asarray(ledger.accepted, dtype=float)
    attempted = np.asarray(ledger.attempted, dtype=float)
    rate = np.where(attempted > 0, accepted / np.maximum(attempted, 1.0), target)
    new = np.exp(np.log(current_scale) + (rate - target) / math.sqrt(max(ledger.events, 1)))
    out = np.clip(new, _STEP_MIN, _STEP_MAX)
    if np.ndim(current_scale) == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# initialization


def initial_state(inventory: Inventory, graph: SlopeUnitGraph, covariates, config: ModelConfig,
                  rng=None, jitter=0.1):
    """Deterministic starting point with optional seeded jitter.

    Fixed effects start at zero except the count intercept (log of the mean
    count); fields start at zero; xi at 0.1; kappa at 1.
    """
    p = covariates.p
    beta_count = np.zeros(p)
    total = int(inventory.counts.sum()) if inventory.n else 0
    if inventory.n > 0 and total > 0:
        beta_count[0] = np.log(total / inventory.n)
    beta_size = np.zeros(p)
    state = LatentState(beta_count=beta_count, beta_size=beta_size, xi=0.1)
    if config.has_w1:
        state.w1 = np.zeros(graph.n)
        state.tau1 = config.fix_tau1 if config.fix_tau1 is not None else 1.0
    if config.has_w2:
        state.w2 = np.zeros(graph.n)
        state.tau2 = config.fix_tau2 if config.fix_tau2 is not None else 1.0
    if config.has_gamma:
        state.gamma = 0.0
    if config.family == "egp":
        state.kappa = 1.0
    if config.family == "split":
        state.bulk_shape = 1.0
        state.bulk_rate = 1.0
        state.tail_weight = 1.0 - config.threshold_quantile

    if rng is not None and jitter > 0:
        pr = config.priors
        state.beta_count = state.beta_count + jitter * rng.standard_normal(p)
        state.beta_size = state.beta_size + jitter * rng.standard_normal(p)
        if config.has_gamma:
            state.gamma = float(jitter * rng.standard_normal())
        lo, hi = pr.xi_lo, pr.xi_hi
        state.xi = float(np.clip(0.1 + 0.5 * jitter * rng.standard_normal(),
                                 lo + 0.02 * (hi - lo), hi - 0.02 * (hi - lo)))
        if config.family == "egp":
            state.kappa = float(np.exp(np.log(state.kappa) + jitter * rng.standard_normal()))
        if config.family == "split":
            state.bulk_shape = float(np.exp(jitter * rng.standard_normal()))
            state.bulk_rate = float(np.exp(jitter * rng.standard_normal()))
            logit_tw = np.log(state.tail_weight / (1.0 - state.tail_weight))
            state.tail_weight = float(expit(logit_tw + jitter * rng.standard_normal()))
        if config.has_w1 and config.fix_tau1 is None:
            state.tau1 = float(np.exp(jitter * rng.standard_normal()))
        if config.has_w2 and config.fix_tau2 is None:
            state.tau2 = float(np.exp(jitter * rng.standard_normal()))
    return state


def _nonfinite_reason(inventory, state, graph, covariates, config):
    pr = config.priors
    if not (pr.xi_lo < state.xi < pr.xi_hi):
        return f"xi={state.xi} outside the truncated-normal prior range ({pr.xi_lo}, {pr.xi_hi})"
    if config.family == "egp" and not (state.kappa and state.kappa > 0):
        return f"kappa={state.kappa} outside (0, inf)"
    if config.family == "split":
        if not (state.bulk_shape and state.bulk_shape > 0):
            return f"bulk_shape={state.bulk_shape} outside (0, inf)"
        if not (state.bulk_rate and state.bulk_rate > 0):
            return f"bulk_rate={state.bulk_rate} outside (0, inf)"
        if not (state.tail_weight and 0 < state.tail_weight < 1):
            return f"tail_weight={state.tail_weight} outside (0, 1)"
    for name, tau in (("tau1", state.tau1), ("tau2", state.tau2)):
        active = config.has_w1 if name == "tau1" else config.has_w2
        if active and not (tau is not None and np.isfinite(tau) and tau > 0):
            return f"{name}={tau} outside (0, inf)"
    if loglik(inventory, state, covariates, config) == -np.inf:
        return "a size observation falls outside the size-family support"
    return "unknown component"


# ---------------------------------------------------------------------------
# global-parameter transforms


def _global_entries(config: ModelConfig):
    # gamma gets its own scalar update; the block holds the shape-type globals
    entries = [("xi", "shifted_log")]
    if config.family == "egp":
        entries.append(("kappa", "log"))
    if config.family == "split":
        entries += [("bulk_shape", "log"), ("bulk_rate", "log"), ("tail_weight", "logit")]
    return entries


def _to_unconstrained(value, kind, lo):
    if kind == "identity":
        return value
    if kind == "log":
        return np.log(value)
    if kind == "shifted_log":
        return np.log(value - lo)
    if kind == "logit":
        return np.log(value / (1.0 - value))
    raise ContractError(f"unknown transform {kind!r}")


def _from_unconstrained(theta, kind, lo):
    if kind == "identity":
        return theta
    if kind == "log":
        return np.exp(theta)
    if kind == "shifted_log":
        return lo + np.exp(theta)
    if kind == "logit":
        return float(expit(theta))
    raise ContractError(f"unknown transform {kind!r}")


def _log_jacobian(value, kind, lo):
    if kind == "identity":
        return 0.0
    if kind == "log":
        return np.log(value)
    if kind == "shifted_log":
        return np.log(value - lo)
    if kind == "logit":
        return np.log(value) + np.log1p(-value)
    raise ContractError(f"unknown transform {kind!r}")


def _scalar_prior_logpdf(name, value, config: ModelConfig):
    pr = config.priors
    if name == "gamma":
        return float(_normal_logpdf(value, pr.gamma_sd))
    if name == "xi":
        return _truncnorm_logpdf(value, pr.xi_sd, pr.xi_lo, pr.xi_hi)
    if name == "kappa":
        return _gamma_logpdf(value, pr.kappa_shape, pr.kappa_rate)
    if name == "bulk_shape":
        return _gamma_logpdf(value, pr.bulk_shape_shape, pr.bulk_shape_rate)
    if name == "bulk_rate":
        return _gamma_logpdf(value, pr.bulk_rate_shape, pr.bulk_rate_rate)
    if name == "tail_weight":
        return 0.0 if 0.0 < value < 1.0 else -np.inf
    raise ContractError(f"unknown global parameter {name!r}")


# ---------------------------------------------------------------------------
# single-chain runner


class _Chain:
    def __init__(self, inventory, graph, covariates, config, sampler, chain_index, init=None):
        self.inv = inventory
        self.graph = graph
        self.cov = covariates
        self.config = config
        self.sc = sampler
        self.rng = rng_stream(sampler.seed, "chain", chain_index)
        self.n = graph.n
        self.p = covariates.p

        if init is None:
            # jitter must deliver a finite-posterior start (e.g. a jittered
            # negative tail shape can exclude observed sizes); redraw a few
            # times before giving up
            for _ in range(64):
                self.state = initial_state(inventory, graph, covariates, config,
                                           rng=self.rng, jitter=sampler.init_jitter)
                if np.isfinite(logposterior(inventory, self.state, graph, covariates, config)):
                    break
        else:
            self.state = init.copy()
        validate_state(self.state, graph, covariates, config)

        lp0 = logposterior(inventory, self.state, graph, covariates, config)
        if not np.isfinite(lp0):
            reason = _nonfinite_reason(inventory, self.state, graph, covariates, config)
            raise InitializationError(f"non-finite log-posterior at initialization: {reason}")

        # static graph structures
        adj = graph.adjacency()
        self.adj = adj
        self.deg = graph.degrees.astype(float)
        self.comp = graph.component_labels
        self.colors = self._coloring(adj)
        self.obs_unit = inventory.size_unit
        self.obs_val = inventory.size_value
        # per color: observation indices and the position of each
        # observation's unit inside its color class
        self.color_obs = []
        pos_in_color = np.zeros(self.n, dtype=np.int64)
        unit_color = np.zeros(self.n, dtype=np.int64)
        for ci, members in enumerate(self.colors):
            pos_in_color[members] = np.arange(members.size)
            unit_color[members] = ci
        for ci, members in enumerate(self.colors):
            idx = np.flatnonzero(unit_color[self.obs_unit] == ci)
            self.color_obs.append((idx, pos_in_color[self.obs_unit[idx]]))

        self.globals_ = _global_entries(config)
        self.block_dims = {
            "beta_count": self.p,
            "beta_size": self.p,
            "globals": len(self.globals_),
        }
        self.log_step = {
            "beta_count": np.full(1, np.log(sampler.step_size_beta)),
            "beta_size": np.full(1, np.log(sampler.step_size_beta)),
            "globals": np.full(1, np.log(sampler.step_size_global)),
        }
        if config.has_w1:
            self.log_step["w1"] = np.full(self.n, np.log(sampler.step_size_field))
        if config.has_w2:
            self.log_step["w2"] = np.full(self.n, np.log(sampler.step_size_field))
        if config.has_gamma:
            self.log_step["gamma"] = np.full(1, np.log(sampler.step_size_global))
            self.block_dims["gamma"] = 1
        self.use_shear = config.has_gamma and config.has_w2
        if self.use_shear:
            self.log_step["shear"] = np.full(1, np.log(sampler.step_size_global))
            self.block_dims["shear"] = 1

        self.window_acc = {k: np.zeros_like(v) for k, v in self.log_step.items()}
        self.window_att = {k: np.zeros_like(v) for k, v in self.log_step.items()}
        self.run_acc = {k: np.zeros_like(v) for k, v in self.log_step.items()}
        self.run_att = {k: np.zeros_like(v) for k, v in self.log_step.items()}
        self.adapt_events = dict.fromkeys(self.log_step, 0)
        self.snapshots = {k: [] for k in self.log_step}
        self._refresh()

    @staticmethod
    def _coloring(adj):
        n = adj.shape[0]
        if n == 0:
            return []
        indptr, indices = adj.indptr, adj.indices
        order = np.argsort(-np.diff(indptr), kind="stable")
        color = np.full(n, -1, dtype=np.int64)
        for node in order:
            used = {color[v] for v in indices[indptr[node]:indptr[node + 1]] if color[v] >= 0}
            c = 0
            while c in used:
                c += 1
            color[node] = c
        return [np.flatnonzero(color == c) for c in range(color.max() + 1)]

    # cached quantities: eta1/lam always; eta2 and per-observation log-density
    # whenever sizes exist
    def _refresh(self):
        st = self.state
        self.eta1 = count_linpred(st, self.cov)
        with np.errstate(over="ignore"):
            self.lam = np.exp(self.eta1)
        self.eta2 = size_linpred(st, self.cov, self.config.structure)
        if self.obs_val.size:
            with np.errstate(over="ignore"):
                sig = np.exp(self.eta2[self.obs_unit])
            self.obs_ll = np.asarray(size_logpdf(self.obs_val, sig, st, self.config))
        else:
            self.obs_ll = np.empty(0)

    # ---- sweep parts -----------------------------------------------------

    def _field_sweep(self, name):
        st = self.state
        w = st.w1 if name == "w1" else st.w2
        tau = st.tau1 if name == "w1" else st.tau2
        counts = self.inv.counts
        is_w1 = name == "w1"
        shares_size = (not is_w1) or self.config.has_gamma
        gam = st.gamma if (is_w1 and self.config.has_gamma) else (1.0 if not is_w1 else 0.0)
        steps = np.exp(self.log_step[name])

        for ci, members in enumerate(self.colors):
            # neighbor sums recomputed per color so later colors see moves
            # accepted in earlier ones (sequential-scan equivalence)
            neigh_sum = self.adj @ w
            eps = steps[members] * self.rng.standard_normal(members.size)
            logu = np.log(self.rng.random(members.size))
            w_old = w[members]
            w_new = w_old + eps

            delta = -0.5 * tau * (self.deg[members] * (w_new**2 - w_old**2)
                                  - 2.0 * neigh_sum[members] * eps)
            if is_w1:
                new_eta1 = self.eta1[members] + eps
                with np.errstate(over="ignore"):
                    new_lam = np.exp(new_eta1)
                delta = delta + counts[members] * eps - (new_lam - self.lam[members])
            if shares_size and gam != 0.0:
                obs_idx, obs_pos = self.color_obs[ci]
                if obs_idx.size:
                    with np.errstate(over="ignore"):
                        new_sig = np.exp(self.eta2[self.obs_unit[obs_idx]] + gam * eps[obs_pos])
                    new_lp = np.asarray(size_logpdf(self.obs_val[obs_idx], new_sig, st, self.config))
                    delta = delta + np.bincount(obs_pos, weights=new_lp - self.obs_ll[obs_idx],
                                                minlength=members.size)

            with np.errstate(invalid="ignore"):
                acc = logu < delta
            acc &= np.isfinite(delta)
            idx = members[acc]
            w[idx] = w_new[acc]
            if is_w1:
                self.eta1[idx] = new_eta1[acc]
                self.lam[idx] = new_lam[acc]
            if shares_size and gam != 0.0:
                self.eta2[idx] += gam * eps[acc]
                obs_idx, obs_pos = self.color_obs[ci]
                if obs_idx.size:
                    sel = acc[obs_pos]
                    self.obs_ll[obs_idx[sel]] = new_lp[sel]

            self.window_acc[name][members] += acc
            self.window_att[name][members] += 1
            self.run_acc[name][members] += acc
            self.run_att[name][members] += 1

    def _recenter(self):
        st = self.state
        if self.n == 0 or not (self.config.has_w1 or self.config.has_w2):
            return
        if self.config.has_w1:
            gm = float(st.w1.mean())
            st.w1 = center_by_component(st.w1, self.graph)
            st.beta_count[0] += gm
            if self.config.has_gamma:
                st.beta_size[0] += st.gamma * gm
        if self.config.has_w2:
            gm = float(st.w2.mean())
            st.w2 = center_by_component(st.w2, self.graph)
            st.beta_size[0] += gm
        self._refresh()

    def _beta_count_update(self):
        st = self.state
        z = self.rng.standard_normal(self.p)
        logu = np.log(self.rng.random())
        db = np.exp(self.log_step["beta_count"][0]) * z
        d_eta = self.cov.values @ db
        new_eta1 = self.eta1 + d_eta
        with np.errstate(over="ignore"):
            new_lam = np.exp(new_eta1)
        sd = self.config.priors.beta_sd
        new_beta = st.beta_count + db
        delta = (float(np.sum(self.inv.counts * d_eta - (new_lam - self.lam)))
                 + float(np.sum(_normal_logpdf(new_beta, sd) - _normal_logpdf(st.beta_count, sd))))
        acc = np.isfinite(delta) and logu < delta
        if acc:
            st.beta_count = new_beta
            self.eta1 = new_eta1
            self.lam = new_lam
        self._tally("beta_count", acc)

    def _beta_size_update(self):
        st = self.state
        z = self.rng.standard_normal(self.p)
        logu = np.log(self.rng.random())
        db = np.exp(self.log_step["beta_size"][0]) * z
        d_eta = self.cov.values @ db
        sd = self.config.priors.beta_sd
        new_beta = st.beta_size + db
        delta = float(np.sum(_normal_logpdf(new_beta, sd) - _normal_logpdf(st.beta_size, sd)))
        new_lp = None
        if self.obs_val.size:
            with np.errstate(over="ignore"):
                new_sig = np.exp(self.eta2[self.obs_unit] + d_eta[self.obs_unit])
            new_lp = np.asarray(size_logpdf(self.obs_val, new_sig, st, self.config))
            delta += float(np.sum(new_lp - self.obs_ll))
        acc = np.isfinite(delta) and logu < delta
        if acc:
            st.beta_size = new_beta
            self.eta2 = self.eta2 + d_eta
            if new_lp is not None:
                self.obs_ll = new_lp
        self._tally("beta_size", acc)

    def _gamma_update(self):
        st = self.state
        z = float(self.rng.standard_normal())
        logu = np.log(self.rng.random())
        d = float(np.exp(self.log_step["gamma"][0])) * z
        sd = self.config.priors.gamma_sd
        delta = float(_normal_logpdf(st.gamma + d, sd) - _normal_logpdf(st.gamma, sd))
        new_lp = None
        d_eta2 = d * st.w1
        if self.obs_val.size:
            with np.errstate(over="ignore"):
                new_sig = np.exp(self.eta2[self.obs_unit] + d_eta2[self.obs_unit])
            new_lp = np.asarray(size_logpdf(self.obs_val, new_sig, st, self.config))
            delta += float(np.sum(new_lp - self.obs_ll))
        acc = np.isfinite(delta) and logu < delta
        if acc:
            st.gamma = st.gamma + d
            self.eta2 = self.eta2 + d_eta2
            if new_lp is not None:
                self.obs_ll = new_lp
        self._tally("gamma", acc)

    def _globals_update(self):
        entries = self.globals_
        if not entries:
            return
        st = self.state
        z = self.rng.standard_normal(len(entries))
        logu = np.log(self.rng.random())
        lo = self.config.priors.xi_lo
        step = np.exp(self.log_step["globals"][0])

        delta = 0.0
        cand = {}
        ok = True
        for (name, kind), dz in zip(entries, z):
            cur = getattr(st, name)
            theta = _to_unconstrained(cur, kind, lo) + step * dz
            new = _from_unconstrained(theta, kind, lo)
            cand[name] = new
            pr_new = _scalar_prior_logpdf(name, new, self.config)
            if pr_new == -np.inf:
                ok = False
                break
            delta += (pr_new - _scalar_prior_logpdf(name, cur, self.config)
                      + _log_jacobian(new, kind, lo) - _log_jacobian(cur, kind, lo))

        new_lp = None
        if ok:
            trial = st.copy()
            for name, value in cand.items():
                setattr(trial, name, value)
            if self.obs_val.size:
                with np.errstate(over="ignore"):
                    new_sig = np.exp(self.eta2[self.obs_unit])
                new_lp = np.asarray(size_logpdf(self.obs_val, new_sig, trial, self.config))
                delta += float(np.sum(new_lp - self.obs_ll))

        acc = ok and np.isfinite(delta) and logu < delta
        if acc:
            for name, value in cand.items():
                setattr(st, name, value)
            if new_lp is not None:
                self.obs_ll = new_lp
        self._tally("globals", acc)

    def _shear_update(self):
        # gamma and w2 are entangled along the likelihood-flat direction
        # (gamma + d, w2 - d*w1): eta2 is exactly invariant, so the
        # acceptance ratio involves only the gamma prior and the w2 quadform
        st = self.state
        d = float(np.exp(self.log_step["shear"][0]) * self.rng.standard_normal())
        logu = np.log(self.rng.random())
        w2_new = st.w2 - d * st.w1
        sd = self.config.priors.gamma_sd
        delta = (float(_normal_logpdf(st.gamma + d, sd) - _normal_logpdf(st.gamma, sd))
                 - 0.5 * st.tau2 * (icar_quadform(w2_new, self.graph)
                                    - icar_quadform(st.w2, self.graph)))
        acc = np.isfinite(delta) and logu < delta
        if acc:
            st.gamma = st.gamma + d
            st.w2 = w2_new
        self._tally("shear", acc)

    def _tau_gibbs(self):
        st = self.state
        pr = self.config.priors
        half_rank = 0.5 * self.graph.rank
        if self.config.has_w1 and self.config.fix_tau1 is None:
            quad = icar_quadform(st.w1, self.graph)
            st.tau1 = float(self.rng.gamma(pr.tau_shape + half_rank,
                                           1.0 / (pr.tau_rate + 0.5 * quad)))
        if self.config.has_w2 and self.config.fix_tau2 is None:
            quad = icar_quadform(st.w2, self.graph)
            st.tau2 = float(self.rng.gamma(pr.tau_shape + half_rank,
                                           1.0 / (pr.tau_rate + 0.5 * quad)))

    def _tally(self, block, acc):
        self.window_acc[block] += bool(acc)
        self.window_att[block] += 1
        self.run_acc[block] += bool(acc)
        self.run_att[block] += 1

    def _adapt(self, t):
        adapting = t <= self.sc.burn_in
        for block, log_s in self.log_step.items():
            if adapting:
                self.adapt_events[block] += 1
                target = (self.sc.target_accept_single
                          if block in ("w1", "w2") or self.block_dims.get(block, 2) == 1
                          else self.sc.target_accept_block)
                ledger = AdaptationLedger(self.window_acc[block], self.window_att[block],
                                          self.adapt_events[block])
                new = adapt_step(ledger, np.exp(log_s), target)
                self.log_step[block] = np.log(np.atleast_1d(new))
            self.snapshots[block].append(self.log_step[block].copy())
            self.window_acc[block][:] = 0
            self.window_att[block][:] = 0

    # ---- main loop --------------------------------------------------------

    def run(self):
        sc = self.sc
        n_draws = sc.n_draws
        k = len(scalar_param_names(self.config, self.p))
        scalars = np.empty((n_draws, k))
        fields = {}
        if self.config.has_w1:
            fields["w1"] = np.empty((n_draws, self.n))
        if self.config.has_w2:
            fields["w2"] = np.empty((n_draws, self.n))

        # reset post-burn-in tallies at the burn-in boundary
        draw = 0
        for t in range(1, sc.n_iter + 1):
            if self.config.has_w1:
                self._field_sweep("w1")
            if self.config.has_w2:
                self._field_sweep("w2")
            self._recenter()
            self._beta_count_update()
            self._beta_size_update()
            if self.config.has_gamma:
                self._gamma_update()
            self._globals_update()
            if self.use_shear:
                self._shear_update()
            self._tau_gibbs()

            if t % sc.adapt_window == 0:
                self._adapt(t)
            if t == sc.burn_in:
                for block in self.run_acc:
                    self.run_acc[block][:] = 0
                    self.run_att[block][:] = 0
            if t > sc.burn_in and (t - sc.burn_in) % sc.thin == 0:
                scalars[draw] = state_scalars(self.state, self.config)
                if self.config.has_w1:
                    fields["w1"][draw] = self.state.w1
                if self.config.has_w2:
                    fields["w2"][draw] = self.state.w2
                draw += 1

        acceptance = {}
        for block in self.run_acc:
            att = self.run_att[block]
            rate = np.divide(self.run_acc[block], np.maximum(att, 1.0))
            acceptance[block] = float(rate.mean())
        snapshots = {b: np.array(s) for b, s in self.snapshots.items()}
        return scalars, fields, acceptance, snapshots


def _chain_worker(args):
    inventory, graph, covariates, config, sampler, chain_index, init = args
    chain = _Chain(inventory, graph, covariates, config, sampler, chain_index, init)
    return chain.run()


def run_chain(inventory: Inventory, graph: SlopeUnitGraph, covariates, config: ModelConfig,
              sampler: SamplerConfig, init_state: Optional[LatentState] = None, threads=1):
    """Run all configured chains and collect posterior draws.

    Deterministic given ``sampler.seed``: chain ``k`` draws from the named
    stream (seed, "chain", k) whether chains run sequentially or in a
    process pool.  The split-family threshold is resolved from the inventory
    before sampling and recorded in the returned configuration.
    """
    config = resolve_split_threshold(config, inventory)
    jobs = [(inventory, graph, covariates, config, sampler, k, init_state)
            for k in range(sampler.n_chains)]
    if threads > 1 and sampler.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(threads, sampler.n_chains)) as pool:
            results = list(pool.map(_chain_worker, jobs))
    else:
        results = [_chain_worker(job) for job in jobs]

    scalars = np.stack([r[0] for r in results])
    field_names = sorted(results[0][1])
    fields = {f: np.stack([r[1][f] for r in results]) for f in field_names}
    acceptance = {b: np.array([r[2][b] for r in results]) for b in results[0][2]}
    step_trace = {b: np.stack([r[3][b] for r in results]) for b in results[0][3]}
    return PosteriorSamples(
        scalar_names=scalar_param_names(config, covariates.p),
        scalars=scalars,
        fields=fields,
        acceptance=acceptance,
        step_trace=step_trace,
        config=config,
        sampler=sampler,
        labels=graph.labels,
    )


# ---------------------------------------------------------------------------
# local posterior delta (the sparsity payoff, kept as a checkable scalar op)


def local_delta(inventory: Inventory, graph: SlopeUnitGraph, covariates, config: ModelConfig,
                state: LatentState, field_name: str, unit: int, value: float):
    """Log-posterior change from setting ``field_name[unit] = value``.

    Touches only the unit's likelihood terms and the iCAR terms of its
    neighborhood; equals the full log-posterior difference exactly.
    """
    if not 0 <= unit < graph.n:
        raise ContractError(f"unit {unit} outside [0, {graph.n})")
    if field_name not in ("w1", "w2"):
        raise ContractError("field_name must be 'w1' or 'w2'")
    w = state.w1 if field_name == "w1" else state.w2
    tau = state.tau1 if field_name == "w1" else state.tau2
    if w is None:
        raise ContractError(f"state has no field {field_name}")
    old = w[unit]
    eps = value - old

    adj = graph.adjacency()
    nb = adj.indices[adj.indptr[unit]:adj.indptr[unit + 1]]
    s_i = float(np.sum(w[nb]))
    d_i = float(graph.degrees[unit])
    delta = -0.5 * tau * (d_i * (value**2 - old**2) - 2.0 * s_i * eps)

    if field_name == "w1":
        eta1_i = float(count_linpred(state, covariates)[unit])
        n_i = float(inventory.counts[unit])
        with np.errstate(over="ignore"):
            delta += n_i * eps - (np.exp(eta1_i + eps) - np.exp(eta1_i))

    affects_size = field_name == "w2" or (config.has_gamma and state.gamma != 0.0)
    if affects_size and inventory.sizes[unit].size:
        mult = state.gamma if field_name == "w1" else 1.0
        eta2_i = float(size_linpred(state, covariates, config.structure)[unit])
        x = inventory.sizes[unit]
        with np.errstate(over="ignore"):
            old_lp = size_logpdf(x, np.exp(eta2_i), state, config)
            new_lp = size_logpdf(x, np.exp(eta2_i + mult * eps), state, config)
        delta += float(np.sum(new_lp) - np.sum(old_lp))
    return float(delta)


# ---------------------------------------------------------------------------
# convergence diagnostics


def _split_halves(x):
    m, n = x.shape
    half = n // 2
    return np.vstack([x[:, :half], x[:, half:2 * half]])


def _rank_normalize(x):
    flat = x.reshape(-1)
    ranks = rankdata(flat, method="average")
    z = ndtri((ranks - 0.375) / (flat.size + 0.25))
    return z.reshape(x.shape)


def split_rhat(x):
    """Rank-normalized split R-hat for draws shaped (n_chains, n_draws)."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 2:
        return float("nan")
    halves = _split_halves(x)
    if np.all(halves == halves.flat[0]):
        return 1.0
    z = _rank_normalize(halves)
    n = z.shape[1]
    means = z.mean(axis=1)
    w = float(np.mean(np.var(z, axis=1, ddof=1)))
    b = n * float(np.var(means, ddof=1))
    if w <= 0.0:
        return 1.0
    var_plus = (n - 1) / n * w + b / n
    # the finite-sample (n-1)/n factor can push the ratio below 1, which
    # carries no extra information; floor at 1
    return float(max(np.sqrt(var_plus / w), 1.0))


def _autocovariance(x):
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n].real
    return acov / n


def ess_multichain(x):
    """Autocorrelation-based effective sample size for (n_chains, n_draws)."""
    x = np.asarray(x, dtype=float)
    halves = _split_halves(x)
    m, n = halves.shape
    if n < 4:
        return float("nan")
    if np.all(halves == halves.flat[0]):
        return float("nan")
    chain_vars = np.var(halves, axis=1, ddof=1)
    w = float(np.mean(chain_vars))
    means = halves.mean(axis=1)
    b_over_n = float(np.var(means, ddof=1)) if m > 1 else 0.0
    var_plus = (n - 1) / n * w + b_over_n
    if var_plus <= 0.0:
        return float("nan")
    acov = _autocovariance(halves).mean(axis=0)
    rho = 1.0 - (w - acov) / var_plus
    # Geyer initial monotone positive sequence on paired sums
    max_pairs = (n - 1) // 2
    tau = 1.0
    prev = np.inf
    ssum = 0.0
    for k in range(max_pairs):
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair < 0.0:
            break
        pair = min(pair, prev)
        prev = pair
        ssum += pair
    tau = max(2.0 * ssum - 1.0, 1e-12)
    total = float(m * n)
    return float(min(total / tau, total))


def diagnostics(samples: PosteriorSamples):
    """Per-parameter split R-hat and ESS plus final acceptance rates.

    Requires at least 10 retained draws; R-hat needs at least two chains and
    is NaN otherwise.  Constant (degenerate) columns are flagged and get
    R-hat 1 with NaN ESS.
    """
    if samples.n_draws < 10:
        raise ContractError(f"diagnostics requires >= 10 retained draws, got {samples.n_draws}")
    rhat = {}
    ess = {}
    degenerate = []
    for name in samples.column_names():
        col = samples.column(name)
        if np.all(col == col.flat[0]):
            degenerate.append(name)
            rhat[name] = 1.0
            ess[name] = float("nan")
            continue
        rhat[name] = split_rhat(col)
        ess[name] = ess_multichain(col)
    acceptance = {b: float(np.mean(v)) for b, v in samples.acceptance.items()}
    return Diagnostics(rhat=rhat, ess=ess, acceptance=acceptance, degenerate=degenerate)
