import math

import numpy as np
import pytest

from hazmark.errors import ContractError
from hazmark.graph import build_covariates, build_graph
from hazmark.model import (
    Inventory,
    LatentState,
    ModelConfig,
    count_linpred,
    loglik,
    logposterior,
    logprior,
    resolve_split_threshold,
    scalar_param_names,
    simulate_inventory,
    size_linpred,
    state_scalars,
)

from helpers import inventory_from_sizes, make_dataset, random_state
from oracles import scalar_loglik, scalar_logprior


class TestLinpreds:
    def test_unit_rate_baseline(self):
        g, cov, inv, state, config = make_dataset()
        zero = LatentState(beta_count=np.zeros(cov.p), beta_size=np.zeros(cov.p),
                           w1=np.zeros(g.n), w2=np.zeros(g.n), tau1=1.0, tau2=1.0,
                           gamma=0.0, xi=0.1, kappa=1.0)
        assert np.allclose(np.exp(count_linpred(zero, cov)), 1.0)

    def test_intercept_only(self):
        cov = build_covariates(np.zeros((4, 0)), ())
        state = LatentState(beta_count=np.array([math.log(3.0)]), beta_size=np.zeros(1))
        assert np.allclose(np.exp(count_linpred(state, cov)), 3.0)

    def test_count_scalar_loop(self, rng):
        g, cov, inv, state, config = make_dataset(rows=1, cols=5)
        eta = count_linpred(state, cov)
        for i in range(5):
            direct = float(cov.values[i] @ state.beta_count + state.w1[i])
            assert eta[i] == pytest.approx(direct, abs=1e-14)

    def test_structure_gating_independent(self, rng):
        g, cov, inv, state, config = make_dataset(structure="independent", gamma=None)
        base = size_linpred(state, cov, "independent")
        state.gamma = 123.0  # ignored by the structure
        assert np.array_equal(size_linpred(state, cov, "independent"), base)

    def test_shared_gamma_zero(self):
        g, cov, inv, state, config = make_dataset(structure="shared", tau2=None)
        state.gamma = 0.0
        expect = cov.values @ state.beta_size
        assert np.allclose(size_linpred(state, cov, "shared"), expect, atol=1e-14)

    def test_shared_plus_scalar_loop(self):
        g, cov, inv, state, config = make_dataset()
        eta = size_linpred(state, cov, "shared_plus")
        for i in range(g.n):
            direct = float(cov.values[i] @ state.beta_size + state.gamma * state.w1[i] + state.w2[i])
            assert eta[i] == pytest.approx(direct, abs=1e-14)

    def test_offset_enters_count_side(self):
        cov = build_covariates(np.zeros((3, 0)), (), log_offset=np.log([1.0, 2.0, 4.0]))
        state = LatentState(beta_count=np.zeros(1), beta_size=np.zeros(1))
        assert np.allclose(np.exp(count_linpred(state, cov)), [1.0, 2.0, 4.0])
        assert np.allclose(size_linpred(state, cov, "fixed_only"), 0.0)


class TestLoglik:
    def test_empty_inventory(self):
        g, cov, _, state, config = make_dataset()
        inv = Inventory.empty(g.n)
        lam = np.exp(count_linpred(state, cov))
        assert loglik(inv, state, cov, config) == pytest.approx(-float(lam.sum()), rel=1e-12)

    def test_single_unit_composition(self):
        from hazmark.distributions import GpParams, gp_logpdf, poisson_logpmf
        g = build_graph([], 1)
        cov = build_covariates(np.zeros((1, 0)), ())
        config = ModelConfig(family="gp", structure="fixed_only")
        state = LatentState(beta_count=np.array([0.3]), beta_size=np.array([0.2]), xi=0.15)
        inv = inventory_from_sizes([[1.7]])
        expect = poisson_logpmf(1, math.exp(0.3)) + gp_logpdf(1.7, GpParams(math.exp(0.2), 0.15))
        assert loglik(inv, state, cov, config) == pytest.approx(expect, rel=1e-12)

    @pytest.mark.parametrize("family,structure", [
        ("gp", "shared"), ("egp", "shared_plus"), ("split", "independent"),
        ("egp", "fixed_only"),
    ])
    def test_scalar_loop_oracle(self, rng, family, structure):
        kwargs = {}
        if family == "split":
            kwargs["split_threshold"] = 2.0
        g, cov, inv, state, config = make_dataset(seed=10, rows=4, cols=5, family=family,
                                                  structure=structure, **kwargs)
        for k in range(5):
            st = random_state(rng, g, cov, config)
            assert loglik(inv, st, cov, config) == pytest.approx(
                scalar_loglik(inv, st, cov, config), rel=1e-10, abs=1e-10)

    def test_out_of_support_size_sentinel(self):
        g, cov, inv, state, config = make_dataset(family="gp", xi=-0.4)
        # push the scale so low that some size exceeds the finite endpoint
        st = state.copy()
        st.beta_size = np.full_like(st.beta_size, -8.0)
        assert loglik(inv, st, cov, config) == -np.inf


class TestLogprior:
    def test_closed_form_zero_state(self):
        from scipy.special import ndtr
        cov = build_covariates(np.zeros((0, 2)), ("a", "b"), standardize=False)
        g = build_graph([], 0)
        config = ModelConfig(family="gp", structure="fixed_only")
        state = LatentState(beta_count=np.zeros(3), beta_size=np.zeros(3), xi=0.0)
        p = 3
        beta_terms = 2 * p * (-math.log(10.0 * math.sqrt(2 * math.pi)))
        z = ndtr(0.99 / 0.25) - ndtr(-0.49 / 0.25)
        xi_term = -math.log(0.25 * math.sqrt(2 * math.pi)) - math.log(z)
        assert logprior(state, g, config) == pytest.approx(beta_terms + xi_term, rel=1e-12)

    def test_xi_truncation(self):
        g, cov, inv, state, config = make_dataset()
        st = state.copy()
        st.xi = -0.6
        assert logprior(st, g, config) == -np.inf
        st.xi = 1.2
        assert logprior(st, g, config) == -np.inf

    def test_tau_doubling_identity(self):
        g, cov, inv, state, config = make_dataset(structure="shared")
        st = state.copy()
        st.w1 = np.zeros(g.n)
        base = logprior(st, g, config)
        st2 = st.copy()
        st2.tau1 = 2.0 * st.tau1
        from oracles import scalar_gamma_logpdf
        pr = config.priors
        expect = (scalar_gamma_logpdf(st2.tau1, pr.tau_shape, pr.tau_rate)
                  - scalar_gamma_logpdf(st.tau1, pr.tau_shape, pr.tau_rate)
                  + 0.5 * g.rank * math.log(2.0))
        assert logprior(st2, g, config) - base == pytest.approx(expect, rel=1e-12)

    @pytest.mark.parametrize("family,structure", [
        ("gp", "fixed_only"), ("egp", "shared"), ("split", "shared_plus"),
    ])
    def test_scalar_oracle(self, rng, family, structure):
        kwargs = {"split_threshold": 2.0} if family == "split" else {}
        g, cov, inv, state, config = make_dataset(seed=4, family=family, structure=structure,
                                                  **kwargs)
        for _ in range(5):
            st = random_state(rng, g, cov, config)
            assert logprior(st, g, config) == pytest.approx(
                scalar_logprior(st, g, config), rel=1e-12, abs=1e-10)


class TestLogposterior:
    def test_equals_sum(self, rng):
        g, cov, inv, state, config = make_dataset()
        for _ in range(50):
            st = random_state(rng, g, cov, config)
            lp = logposterior(inv, st, g, cov, config)
            assert lp == pytest.approx(loglik(inv, st, cov, config) + logprior(st, g, config),
                                       rel=1e-12)

    def test_count_increment_identity(self):
        g, cov, inv, state, config = make_dataset()
        i = int(np.argmax(inv.counts))
        lam_i = float(np.exp(count_linpred(state, cov))[i])
        bumped_sizes = [s.copy() for s in inv.sizes]
        counts = inv.counts.copy()
        counts[i] += 1
        bumped_sizes[i] = np.append(bumped_sizes[i], 1.0)
        # compare Poisson parts only: add a size of fixed contribution and subtract it
        inv2 = Inventory(counts, bumped_sizes)
        from hazmark.model import size_linpred, size_logpdf
        sigma_i = float(np.exp(size_linpred(state, cov, config.structure))[i])
        size_term = float(size_logpdf(1.0, sigma_i, state, config))
        delta = logposterior(inv2, state, g, cov, config) - logposterior(inv, state, g, cov, config)
        n_new = int(counts[i])
        assert delta - size_term == pytest.approx(math.log(lam_i) - math.log(n_new), rel=1e-10)

    def test_sentinel_propagation(self):
        g, cov, inv, state, config = make_dataset()
        st = state.copy()
        st.tau1 = -1.0
        assert logposterior(inv, st, g, cov, config) == -np.inf
        st = state.copy()
        st.xi = 5.0
        assert logposterior(inv, st, g, cov, config) == -np.inf

    def test_structure_nesting_constant_offset(self, rng):
        """INDEPENDENT with w2=0 and SHARED with gamma=0 share the likelihood;
        their log-posteriors differ only by a state-independent prior offset."""
        g, cov, inv, _, _ = make_dataset(structure="shared")
        cfg_shared = ModelConfig(family="egp", structure="shared")
        cfg_indep = ModelConfig(family="egp", structure="independent")
        offsets = []
        for _ in range(5):
            shared_state = random_state(rng, g, cov, cfg_shared)
            shared_state.xi = abs(shared_state.xi)  # keep every size in support
            shared_state.gamma = 0.0
            indep_state = shared_state.copy()
            indep_state.gamma = None
            indep_state.w2 = np.zeros(g.n)
            indep_state.tau2 = 1.7
            ll_s = loglik(inv, shared_state, cov, cfg_shared)
            ll_i = loglik(inv, indep_state, cov, cfg_indep)
            assert ll_s == pytest.approx(ll_i, rel=1e-12)
            offsets.append(logposterior(inv, shared_state, g, cov, cfg_shared)
                           - logposterior(inv, indep_state, g, cov, cfg_indep))
        assert np.max(np.abs(np.diff(offsets))) < 1e-9

    def test_finite_difference_self_consistency(self):
        """Richardson agreement of central differences at two step sizes."""
        g, cov, inv, state, config = make_dataset()

        def f(eps, h):
            st = state.copy()
            st.beta_count = st.beta_count.copy()
            st.beta_count[1] += eps * h
            return logposterior(inv, st, g, cov, config)

        for h in (1e-4,):
            g1 = (f(1, h) - f(-1, h)) / (2 * h)
            g2 = (f(1, h / 2) - f(-1, h / 2)) / h
            rich = (4 * g2 - g1) / 3.0
            assert g2 == pytest.approx(rich, rel=1e-5)


class TestSimulateInventory:
    def test_counts_match_sizes(self):
        g, cov, inv, state, config = make_dataset()
        for i in range(g.n):
            assert inv.sizes[i].shape[0] == inv.counts[i]

    def test_deterministic(self):
        g, cov, _, state, config = make_dataset()
        a = simulate_inventory(state, g, cov, config, 77)
        b = simulate_inventory(state, g, cov, config, 77)
        assert np.array_equal(a.counts, b.counts)
        assert np.array_equal(a.size_value, b.size_value)

    def test_tiny_rate_mostly_zero(self):
        g = build_graph([], 1000)
        cov = build_covariates(np.zeros((1000, 0)), ())
        config = ModelConfig(family="gp", structure="fixed_only")
        state = LatentState(beta_count=np.array([math.log(1e-4)]), beta_size=np.zeros(1), xi=0.1)
        totals = [simulate_inventory(state, g, cov, config, s).counts.sum() for s in range(300)]
        assert np.mean(totals) == pytest.approx(0.1, abs=0.08)

    def test_count_mean_matches_rate(self):
        g, cov, _, state, config = make_dataset(rows=2, cols=3)
        lam = np.exp(count_linpred(state, cov))
        sims = np.stack([simulate_inventory(state, g, cov, config, 500 + s).counts
                         for s in range(2000)])
        se = np.sqrt(lam / 2000)
        assert np.all(np.abs(sims.mean(axis=0) - lam) < 4 * se + 1e-9)


class TestInventoryValidation:
    def test_count_size_mismatch(self):
        with pytest.raises(ContractError):
            Inventory(np.array([2]), [np.array([1.0])])

    def test_nonpositive_size(self):
        with pytest.raises(ContractError):
            Inventory(np.array([1]), [np.array([0.0])])

    def test_negative_count(self):
        with pytest.raises(ContractError):
            Inventory(np.array([-1]), [np.empty(0)])

    def test_from_events(self):
        inv = Inventory.from_events([2, 0, 2], [1.0, 2.0, 3.0], 4)
        assert list(inv.counts) == [1, 0, 2, 0]
        assert np.array_equal(inv.sizes[2], [1.0, 3.0])


class TestThresholdResolution:
    def test_empirical_quantile(self):
        inv = inventory_from_sizes([[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]])
        config = ModelConfig(family="split", structure="fixed_only", threshold_quantile=0.9)
        resolved = resolve_split_threshold(config, inv)
        assert resolved.split_threshold == pytest.approx(np.quantile(inv.size_value, 0.9))

    def test_explicit_wins(self):
        inv = inventory_from_sizes([[1.0, 2.0]])
        config = ModelConfig(family="split", structure="fixed_only", split_threshold=42.0)
        assert resolve_split_threshold(config, inv).split_threshold == 42.0

    def test_non_split_untouched(self):
        inv = inventory_from_sizes([[1.0]])
        config = ModelConfig(family="gp", structure="fixed_only")
        assert resolve_split_threshold(config, inv) is config


def test_scalar_names_round_trip():
    for family, structure in [("gp", "fixed_only"), ("egp", "shared"),
                              ("split", "independent"), ("egp", "shared_plus")]:
        kwargs = {"split_threshold": 2.0} if family == "split" else {}
        g, cov, inv, state, config = make_dataset(family=family, structure=structure, **kwargs)
        names = scalar_param_names(config, cov.p)
        vals = state_scalars(state, config)
        assert len(names) == len(vals)
        assert names[0] == "beta_count[0]"
        assert "xi" in names
