import numpy as np
import pytest

from hazmark.errors import ContractError, IngestionError, ParameterError
from hazmark.graph import (
    IcarField,
    build_covariates,
    build_graph,
    center_by_component,
    icar_logdensity,
    icar_quadform,
    lattice_edges,
    path_edges,
    simulate_icar,
)

from helpers import random_graph
from oracles import dense_quadform, icar_logdensity_eig, icar_pseudo_covariance, laplacian_eigs


class TestBuildGraph:
    def test_dedup_and_components(self):
        g = build_graph([(0, 1), (1, 0), (1, 2)], 3)
        assert g.n_edges == 2
        assert g.n_components == 1

    def test_empty_edges_singletons(self):
        g = build_graph([], 4)
        assert g.n_components == 4
        assert g.rank == 0
        assert list(g.isolated) == [0, 1, 2, 3]

    def test_path_degrees(self):
        g = build_graph(path_edges(5), 5)
        assert list(g.degrees) == [1, 2, 2, 2, 1]

    def test_out_of_range_rejected(self):
        with pytest.raises(IngestionError):
            build_graph([(0, 5)], 3)

    def test_self_loop_rejected(self):
        with pytest.raises(IngestionError):
            build_graph([(2, 2)], 3)

    def test_isolated_node_reported(self):
        g = build_graph([(0, 1)], 3)
        assert list(g.isolated) == [2]
        assert g.n_components == 2


class TestQuadform:
    def test_constant_null_space(self, lattice30, rng):
        c = rng.normal() * np.ones(lattice30.n)
        assert icar_quadform(c, lattice30) == 0.0

    def test_two_node_hand_value(self):
        g = build_graph([(0, 1)], 2)
        assert icar_quadform(np.array([1.0, -1.0]), g) == pytest.approx(4.0)

    def test_matches_dense_laplacian(self, rng):
        for _ in range(25):
            g = random_graph(rng, int(rng.integers(2, 50)))
            w = rng.standard_normal(g.n)
            assert icar_quadform(w, g) == pytest.approx(dense_quadform(w, g), abs=1e-12, rel=1e-12)

    def test_zero_iff_constant_per_component(self, rng):
        g = random_graph(rng, 12, p_edge=0.2)
        w = np.zeros(g.n)
        for k, comp in enumerate(g.components):
            w[comp] = k * 2.5  # constant per component
        assert icar_quadform(w, g) == 0.0
        if g.n_edges:
            w[g.edges[0][0]] += 1.0
            assert icar_quadform(w, g) > 0.0

    def test_length_mismatch(self, path5):
        with pytest.raises(ContractError):
            icar_quadform(np.zeros(4), path5)


class TestLogdensity:
    def test_zero_field(self, lattice30):
        tau = 3.7
        expect = 0.5 * lattice30.rank * np.log(tau)
        assert icar_logdensity(IcarField(np.zeros(30), tau), lattice30) == pytest.approx(expect)

    def test_two_node_eigen_value(self):
        g = build_graph([(0, 1)], 2)
        val = icar_logdensity(IcarField(np.array([1.0, -1.0]), 2.0), g)
        assert val == pytest.approx(0.5 * np.log(2.0) - 4.0, rel=1e-12)

    def test_tau_doubling(self, lattice30):
        a = icar_logdensity(IcarField(np.zeros(30), 1.0), lattice30)
        b = icar_logdensity(IcarField(np.zeros(30), 2.0), lattice30)
        assert b - a == pytest.approx(0.5 * 29 * np.log(2.0), rel=1e-12)

    def test_matches_eigen_oracle(self, rng):
        for _ in range(25):
            g = random_graph(rng, int(rng.integers(2, 40)))
            w = center_by_component(rng.standard_normal(g.n), g)
            tau = float(np.exp(rng.uniform(-1, 2)))
            assert icar_logdensity(IcarField(w, tau), g) == pytest.approx(
                icar_logdensity_eig(w, tau, g), rel=1e-12, abs=1e-12)

    def test_rank_bookkeeping(self, rng):
        for _ in range(25):
            g = random_graph(rng, int(rng.integers(2, 50)))
            assert g.rank == int(np.sum(laplacian_eigs(g) > 1e-9))

    def test_bad_tau(self, path5):
        with pytest.raises(ParameterError):
            icar_logdensity(IcarField(np.zeros(5), 0.0), path5)


class TestCentering:
    def test_idempotent(self, lattice30, rng):
        w = rng.standard_normal(30)
        once = center_by_component(w, lattice30)
        twice = center_by_component(once, lattice30)
        assert np.max(np.abs(twice - once)) < 1e-15

    def test_triangle(self):
        g = build_graph([(0, 1), (1, 2), (0, 2)], 3)
        out = center_by_component(np.array([1.0, 2.0, 3.0]), g)
        assert np.allclose(out, [-1.0, 0.0, 1.0])

    def test_quadform_invariant(self, rng):
        g = random_graph(rng, 20)
        w = rng.standard_normal(20)
        assert icar_quadform(w, g) == pytest.approx(
            icar_quadform(center_by_component(w, g), g), rel=1e-12)

    def test_component_means_zero(self, rng):
        g = random_graph(rng, 15, p_edge=0.1)
        w = center_by_component(rng.standard_normal(15) + 3.0, g)
        for comp in g.components:
            assert abs(np.mean(w[comp])) < 1e-12


class TestSimulateIcar:
    def test_zero_component_means(self, lattice30):
        w = simulate_icar(2.0, lattice30, 5)
        assert abs(w.mean()) < 1e-12

    def test_deterministic(self, path5):
        assert np.array_equal(simulate_icar(1.5, path5, 11), simulate_icar(1.5, path5, 11))

    def test_isolated_pinned_to_zero(self):
        g = build_graph([(0, 1)], 3)
        w = simulate_icar(1.0, g, 3)
        assert w[2] == 0.0

    def test_covariance_matches_pseudo_inverse(self, path5):
        tau = 2.0
        draws = np.stack([simulate_icar(tau, path5, 1000 + k) for k in range(2000)])
        cov = np.cov(draws.T, bias=True)
        expect = icar_pseudo_covariance(tau, path5)
        assert np.max(np.abs(cov - expect)) < 0.1

    def test_bad_tau(self, path5):
        with pytest.raises(ParameterError):
            simulate_icar(-1.0, path5, 0)


class TestCovariates:
    def test_standardization(self, rng):
        raw = rng.normal(5.0, 3.0, size=(40, 2))
        cov = build_covariates(raw, ("a", "b"))
        assert cov.p == 3
        assert np.allclose(cov.values[:, 0], 1.0)
        assert np.max(np.abs(cov.values[:, 1:].mean(axis=0))) < 1e-9
        assert np.max(np.abs(cov.values[:, 1:].std(axis=0) - 1.0)) < 1e-9

    def test_zero_variance_rejected(self):
        raw = np.column_stack([np.ones(10), np.arange(10.0)])
        with pytest.raises(IngestionError, match="zero variance"):
            build_covariates(raw, ("const", "x"))

    def test_stored_scales_reused(self, rng):
        raw = rng.normal(2.0, 1.5, size=(30, 2))
        cov = build_covariates(raw, ("a", "b"))
        again = build_covariates(raw, ("a", "b"), means=cov.means[1:], scales=cov.scales[1:])
        assert np.array_equal(cov.values, again.values)

    def test_no_standardize(self, rng):
        raw = rng.normal(size=(10, 1))
        cov = build_covariates(raw, ("a",), standardize=False)
        assert np.array_equal(cov.values[:, 1], raw[:, 0])

    def test_lattice_edges_shape(self):
        edges = lattice_edges(3, 4)
        g = build_graph(edges, 12)
        assert g.n_components == 1
        assert g.n_edges == 3 * 3 + 2 * 4  # vertical + horizontal
