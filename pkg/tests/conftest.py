import numpy as np
import pytest

from hazmark.graph import build_graph, lattice_edges, path_edges


@pytest.fixture
def rng():
    return np.random.default_rng(20240801)


@pytest.fixture
def path5():
    return build_graph(path_edges(5), 5)


@pytest.fixture
def lattice30():
    return build_graph(lattice_edges(5, 6), 30)
