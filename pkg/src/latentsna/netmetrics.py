"""Latent networks, weighted centralities and distribution-shape tests.

Path-based measures follow the distance convention: after the positive
shift, an edge weight is the length of that edge and zero-weight edges are
absent.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import stats

from .sampler import PosteriorChain

__all__ = [
    "WeightedGraph", "CentralityProfile", "ShapeTest",
    "latent_network", "node_strength", "positive_shift", "closeness",
    "betweenness", "centrality_profile", "skewness_test", "kurtosis_test",
]


@dataclass(frozen=True)
class WeightedGraph:
    weights: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("weight matrix must be square")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if not np.allclose(w, w.T, rtol=0, atol=1e-12):
            raise ValueError("weight matrix must be symmetric")
        np.fill_diagonal(w, 0.0)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        labels = tuple(self.labels) or tuple(f"R{u + 1}" for u in range(len(w)))
        object.__setattr__(self, "labels", labels)

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    def permuted(self, perm) -> "WeightedGraph":
        perm = np.asarray(perm)
        return WeightedGraph(self.weights[np.ix_(perm, perm)],
                             tuple(self.labels[p] for p in perm))


@dataclass(frozen=True)
class CentralityProfile:
    strength: np.ndarray
    closeness: np.ndarray
    betweenness: np.ndarray


def latent_network(chain: PosteriorChain, subject_set=None) -> WeightedGraph:
    """Average of ``z_i z_i^T`` over retained draws and subjects, zero diagonal.

    With ``subject_set=None`` all subjects are used through the running
    mean kept by the sampler; a subset needs a chain run with
    ``keep_latents=True``.
    """
    if len(chain) == 0:
        raise ValueError("chain has no retained draws")
    if subject_set is None:
        W = np.array(chain.zz_mean, dtype=float)
    else:
        idx = np.asarray(sorted(subject_set), dtype=int)
        if idx.size == 0:
            raise ValueError("subject_set is empty")
        if chain.Z is None:
            raise ValueError("subject subsets need a chain with retained latents")
        Zs = chain.Z[:, idx, :]
        W = np.einsum("sik,sil->kl", Zs, Zs) / (Zs.shape[0] * Zs.shape[1])
    W = 0.5 * (W + W.T)
    return WeightedGraph(W, tuple(chain.node_labels))


def node_strength(graph: WeightedGraph) -> np.ndarray:
    return graph.weights.sum(axis=1)


def positive_shift(graph: WeightedGraph) -> WeightedGraph:
    """Add |most negative edge| to every edge when any edge is negative."""
    W = graph.weights
    V = graph.n_nodes
    if V < 2:
        return graph
    off = W[~np.eye(V, dtype=bool)]
    lo = off.min()
    if lo >= 0:
        return graph
    S = W - lo
    np.fill_diagonal(S, 0.0)
    return WeightedGraph(S, graph.labels)


def _adjacency(W):
    V = W.shape[0]
    return [[(v, W[u, v]) for v in range(V) if v != u and W[u, v] > 0] for u in range(V)]


def _dijkstra(adj, s):
    """Distances, shortest-path counts, predecessor lists and settle order."""
    V = len(adj)
    dist = [math.inf] * V
    sigma = [0.0] * V
    preds = [[] for _ in range(V)]
    dist[s] = 0.0
    sigma[s] = 1.0
    order = []
    done = [False] * V
    heap = [(0.0, s)]
    while heap:
        d, u = heapq.heappop(heap)
        if done[u] or d > dist[u]:
            continue
        done[u] = True
        order.append(u)
        for v, w in adj[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                sigma[v] = sigma[u]
                preds[v] = [u]
                heapq.heappush(heap, (nd, v))
            elif nd == dist[v] and not done[v]:
                sigma[v] += sigma[u]
                preds[v].append(u)
    return dist, sigma, preds, order


def closeness(graph: WeightedGraph) -> np.ndarray:
    """``1 / sum of distances`` within the node's component, scaled by
    ``(reachable - 1) / (V - 1)``; isolated nodes get 0."""
    V = graph.n_nodes
    adj = _adjacency(graph.weights)
    out = np.zeros(V)
    for u in range(V):
        dist, *_ = _dijkstra(adj, u)
        reach = [d for d in dist if d < math.inf]
        total = sum(reach)
        if total > 0 and V > 1:
            out[u] = (1.0 / total) * (len(reach) - 1) / (V - 1)
    return out


def betweenness(graph: WeightedGraph) -> np.ndarray:
    """Weighted shortest-path betweenness over unordered node pairs.

    Brandes' dependency accumulation; tied shortest paths share credit.
    """
    V = graph.n_nodes
    adj = _adjacency(graph.weights)
    bc = np.zeros(V)
    for s in range(V):
        _, sigma, preds, order = _dijkstra(adj, s)
        delta = [0.0] * V
        for w in reversed(order):
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                bc[w] += delta[w]
    # each unordered pair was counted from both endpoints
    return bc / 2.0


def centrality_profile(graph: WeightedGraph) -> CentralityProfile:
    """Strength on raw weights; closeness and betweenness on the shifted graph."""
    shifted = positive_shift(graph)
    return CentralityProfile(node_strength(graph), closeness(shifted), betweenness(shifted))


class ShapeTest(NamedTuple):
    statistic: float
    pvalue: float
    estimate: float     # sample skewness, or excess kurtosis


def skewness_test(sample) -> ShapeTest:
    """D'Agostino's transformed-skewness Z test, two-sided."""
    x = np.asarray(sample, dtype=float).ravel()
    n = x.size
    if n < 8:
        raise ValueError("skewness test needs at least 8 observations")
    d = x - x.mean()
    m2 = np.mean(d ** 2)
    m3 = np.mean(d ** 3)
    g1 = m3 / m2 ** 1.5 if m2 > 0 else 0.0
    y = g1 * math.sqrt((n + 1) * (n + 3) / (6.0 * (n - 2)))
    beta2 = (3.0 * (n * n + 27 * n - 70) * (n + 1) * (n + 3)
             / ((n - 2.0) * (n + 5) * (n + 7) * (n + 9)))
    w2 = -1.0 + math.sqrt(2.0 * (beta2 - 1.0))
    delta = 1.0 / math.sqrt(0.5 * math.log(w2))
    alpha = math.sqrt(2.0 / (w2 - 1.0))
    z = delta * math.asinh(y / alpha)
    return ShapeTest(float(z), float(2.0 * stats.norm.sf(abs(z))), float(g1))


def kurtosis_test(sample) -> ShapeTest:
    """Anscombe-Glynn transformed-kurtosis Z test, two-sided."""
    x = np.asarray(sample, dtype=float).ravel()
    n = x.size
    if n < 20:
        raise ValueError("kurtosis test needs at least 20 observations")
    d = x - x.mean()
    m2 = np.mean(d ** 2)
    m4 = np.mean(d ** 4)
    b2 = m4 / m2 ** 2 if m2 > 0 else 3.0
    e = 3.0 * (n - 1) / (n + 1)
    var = 24.0 * n * (n - 2) * (n - 3) / ((n + 1.0) ** 2 * (n + 3) * (n + 5))
    xs = (b2 - e) / math.sqrt(var)
    sqrt_beta1 = (6.0 * (n * n - 5 * n + 2) / ((n + 7.0) * (n + 9))
                  * math.sqrt(6.0 * (n + 3) * (n + 5) / (n * (n - 2.0) * (n - 3))))
    A = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + math.sqrt(1.0 + 4.0 / sqrt_beta1 ** 2))
    t = 1.0 + xs * math.sqrt(2.0 / (A - 4.0))
    term = (1.0 - 2.0 / A) / t
    cube = math.copysign(abs(term) ** (1.0 / 3.0), term) if t != 0 else math.nan
    z = (1.0 - 2.0 / (9.0 * A) - cube) / math.sqrt(2.0 / (9.0 * A))
    return ShapeTest(float(z), float(2.0 * stats.norm.sf(abs(z))), float(b2 - 3.0))
