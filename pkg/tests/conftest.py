import numpy as np
import pytest

from iagcn.data import build_dataset, generate_synthetic
from iagcn.graph import build_graph


def random_dataset(seed: int, max_users: int = 8, max_items: int = 8, p: float = 0.4):
    """Small random dataset where every user and item has at least one train edge."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_users + 1))
    m = int(rng.integers(2, max_items + 1))
    adj = rng.random((n, m)) < p
    adj[np.arange(n), rng.integers(0, m, n)] = True
    adj[rng.integers(0, n, m), np.arange(m)] = True
    train = np.argwhere(adj)
    return build_dataset(train, np.zeros((0, 2), np.int64), n, m)


@pytest.fixture
def toy_dataset():
    # users 0,1; items 0,1,2; edges (0,1),(0,2),(1,2)
    return build_dataset([(0, 1), (0, 2), (1, 2)], [(1, 0)], 2, 3)


@pytest.fixture
def toy_graph(toy_dataset):
    return build_graph(toy_dataset)


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic(30, 30, 3, 0.5, 0.05, seed=11)


@pytest.fixture(scope="session")
def small_graph(small_synth):
    return build_graph(small_synth)
