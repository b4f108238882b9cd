import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probmix.graphs import SamplingGraph, fully_connected, knn_graph, sample_edges


def brute_force_knn(x, k):
    """Sort every row of the distance table by (distance, index)."""
    n = len(x)
    edges = []
    for i in range(n):
        d = [(float(np.sum((x[i] - x[j]) ** 2)), j) for j in range(n) if j != i]
        edges += [(i, j) for _, j in sorted(d)[:k]]
    return np.array(edges)


def test_fully_connected_size_and_weights():
    g = fully_connected(4)
    assert len(g) == 16
    assert g.edges.shape == (16, 2)
    assert g.weights.sum() == pytest.approx(1.0)
    assert (0, 0) in set(map(tuple, g.edges))


def test_knn_line():
    g = knn_graph(np.array([0.0, 1.0, 2.0, 10.0]), k=1)
    assert [tuple(e) for e in g.edges] == [(0, 1), (1, 0), (2, 1), (3, 2)]
    np.testing.assert_allclose(g.weights, 0.25)


def test_knn_tie_goes_to_lower_index():
    g = knn_graph(np.array([[0.0], [-1.0], [1.0]]), k=1)
    assert tuple(g.edges[0]) == (0, 1)


def test_knn_needs_k_below_n():
    with pytest.raises(ValueError):
        knn_graph(np.zeros((5, 2)), k=5)
    with pytest.raises(ValueError):
        knn_graph(np.zeros((5, 2)), k=0)


def test_graph_validation():
    with pytest.raises(ValueError):
        SamplingGraph(2, np.array([[0, 2]]), np.array([1.0]))
    with pytest.raises(ValueError):
        SamplingGraph(2, np.array([[0, 1], [1, 0]]), np.array([0.6, 0.6]))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 200), d=st.integers(1, 4))
def test_knn_matches_brute_force(seed, n, d):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    if seed % 3 == 0:
        x = np.round(x, 1)  # force distance ties
    k = min(5, n - 1)
    g = knn_graph(x, k)
    np.testing.assert_array_equal(g.edges, brute_force_knn(x, k))
    assert g.weights.sum() == pytest.approx(1.0)
    assert np.all(g.edges[:, 0] != g.edges[:, 1])


def test_large_knn_uses_expansion_path():
    x = np.random.default_rng(0).standard_normal((2100, 2))
    g = knn_graph(x, 3)
    i = 17
    d = np.sum((x - x[i]) ** 2, axis=1)
    d[i] = np.inf
    np.testing.assert_array_equal(g.edges[3 * i:3 * i + 3, 1], np.argsort(d, kind="stable")[:3])


def test_sample_edges_follows_weights():
    g = SamplingGraph(3, np.array([[0, 1], [1, 2], [2, 0]]), np.array([0.5, 0.3, 0.2]))
    e = sample_edges(g, 20000, np.random.default_rng(1))
    freq = np.array([np.mean(e[:, 0] == k) for k in range(3)])
    np.testing.assert_allclose(freq, [0.5, 0.3, 0.2], atol=0.015)


def test_sample_edges_complete_graph_uniform():
    e = sample_edges(fully_connected(3), 30000, np.random.default_rng(2))
    counts = np.bincount(e[:, 0] * 3 + e[:, 1], minlength=9) / 30000
    np.testing.assert_allclose(counts, 1 / 9, atol=0.01)
