"""Shared builders for synthetic graphs, truths, and datasets."""

import numpy as np

from hazmark.graph import build_covariates, build_graph, lattice_edges, simulate_icar
from hazmark.model import Inventory, LatentState, ModelConfig, simulate_inventory
from hazmark.seeding import rng_stream


def random_graph(rng, n, p_edge=0.15):
    """Random undirected graph on n nodes (may be disconnected)."""
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p_edge:
                edges.append((i, j))
    return build_graph(edges, n)


def make_dataset(seed=3, rows=5, cols=6, family="egp", structure="shared_plus",
                 beta_count=(1.0, 0.5, -0.4), beta_size=(0.6, 0.3, -0.2),
                 gamma=0.6, tau1=2.0, tau2=4.0, xi=0.15, kappa=1.5,
                 split_threshold=None, bulk_shape=2.0, bulk_rate=1.0, tail_weight=0.1):
    """Synthetic truth + simulated data on a small lattice."""
    graph = build_graph(lattice_edges(rows, cols), rows * cols)
    cov_rng = rng_stream(seed, "covariates")
    covariates = build_covariates(cov_rng.standard_normal((graph.n, len(beta_count) - 1)),
                                  tuple(f"c{j}" for j in range(len(beta_count) - 1)))
    config = ModelConfig(family=family, structure=structure, split_threshold=split_threshold)
    state = LatentState(beta_count=np.array(beta_count, dtype=float),
                        beta_size=np.array(beta_size, dtype=float), xi=xi)
    if config.has_w1:
        state.tau1 = tau1
        state.w1 = simulate_icar(tau1, graph, rng_stream(seed, "w1"))
    if config.has_w2:
        state.tau2 = tau2
        state.w2 = simulate_icar(tau2, graph, rng_stream(seed, "w2"))
    if config.has_gamma:
        state.gamma = gamma
    if family == "egp":
        state.kappa = kappa
    if family == "split":
        state.bulk_shape = bulk_shape
        state.bulk_rate = bulk_rate
        state.tail_weight = tail_weight
    inventory = simulate_inventory(state, graph, covariates, config, rng_stream(seed, "inventory"))
    return graph, covariates, inventory, state, config


def inventory_from_sizes(sizes_per_unit):
    sizes = [np.asarray(s, dtype=float) for s in sizes_per_unit]
    counts = np.array([s.shape[0] for s in sizes], dtype=np.int64)
    return Inventory(counts, sizes)


def random_state(rng, graph, covariates, config, scale=0.5):
    """Random valid state for oracle-equivalence checks."""
    from hazmark.graph import center_by_component

    p = covariates.p
    state = LatentState(beta_count=scale * rng.standard_normal(p),
                        beta_size=scale * rng.standard_normal(p),
                        xi=float(rng.uniform(-0.3, 0.8)))
    if config.has_w1:
        state.w1 = center_by_component(scale * rng.standard_normal(graph.n), graph)
        state.tau1 = float(np.exp(rng.uniform(-1, 2)))
    if config.has_w2:
        state.w2 = center_by_component(scale * rng.standard_normal(graph.n), graph)
        state.tau2 = float(np.exp(rng.uniform(-1, 2)))
    if config.has_gamma:
        state.gamma = float(rng.normal(0, 1))
    if config.family == "egp":
        state.kappa = float(np.exp(rng.uniform(np.log(0.4), np.log(3.5))))
    if config.family == "split":
        state.bulk_shape = float(np.exp(rng.uniform(-0.5, 1.0)))
        state.bulk_rate = float(np.exp(rng.uniform(-0.5, 0.5)))
        state.tail_weight = float(rng.uniform(0.05, 0.6))
    return state
