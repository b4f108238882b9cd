"""Weighted pair graphs over training indices that decide which samples get mixed."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_NEIGHBORS = 5


@dataclass(frozen=True)
class SamplingGraph:
    n: int
    edges: np.ndarray  # (m, 2) int
    weights: np.ndarray  # (m,)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64)
        if len(edges) != len(weights):
            raise ValueError("one weight per edge required")
        if len(edges) == 0:
            raise ValueError("graph has no edges")
        if np.any(edges < 0) or np.any(edges >= self.n):
            raise ValueError("edge index out of range")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("edge weights must be non-negative and sum to 1")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return len(self.edges)


class CompleteGraph(SamplingGraph):
    """All ``n**2`` ordered pairs with weight ``1/n**2``, stored implicitly.

    Edges are materialized only on attribute access; sampling draws the two
    endpoints independently, which is the same distribution.
    """

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("fully connected graph needs n >= 1")
        object.__setattr__(self, "n", int(n))

    def __post_init__(self):
        pass

    @property
    def edges(self) -> np.ndarray:
        i, j = np.divmod(np.arange(self.n * self.n), self.n)
        return np.stack([i, j], axis=1)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n * self.n, 1.0 / (self.n * self.n))

    def __len__(self) -> int:
        return self.n * self.n

    def __repr__(self) -> str:
        return f"CompleteGraph(n={self.n})"


def fully_connected(n: int) -> SamplingGraph:
    """All ``n**2`` ordered pairs, self-pairs included, uniform weight."""
    return CompleteGraph(n)


def knn_graph(features, k: int = DEFAULT_NEIGHBORS) -> SamplingGraph:
    """Directed edges ``i -> j`` for the ``k`` Euclidean nearest neighbours of each ``x_i``.

    A point is never its own neighbour.  Distance ties go to the lower index.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if k < 1 or k >= n:
        raise ValueError(f"need 1 <= K < n, got K={k}, n={n}")
    if n <= 2048:
        # exact differences so that ties are detected as ties
        d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    else:
        sq = np.sum(x * x, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(n), k)
    return SamplingGraph(n, np.stack([src, order.reshape(-1)], axis=1), np.full(n * k, 1.0 / (n * k)))


def sample_edges(graph: SamplingGraph, count: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. edge draws (with replacement) by weight; returns ``(count, 2)`` indices."""
    if isinstance(graph, CompleteGraph):
        return rng.integers(0, graph.n, size=(count, 2))
    idx = rng.choice(len(graph.edges), size=count, p=graph.weights)
    return graph.edges[idx]
