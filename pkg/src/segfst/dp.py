"""Exact dynamic programs over a search space: best path, log-space
forward/backward marginals, partition function, and edge posteriors.

All accumulation is done in 64-bit floats regardless of the dtype the weights
arrive in.  Unreachable vertices carry -inf, and every log-sum-exp guards the
all-(-inf) case so no NaN can arise from (-inf) - (-inf).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lattice import SearchSpace

NEG_INF = -math.inf


def logadd(a: float, b: float) -> float:
    """Stable log(exp(a) + exp(b)); exact identity on -inf arguments."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = a if a > b else b
    return m + math.log1p(math.exp(-abs(a - b)))


@dataclass
class EdgeWeightTable:
    """Dense per-edge weights w(e) with a parallel gradient buffer."""

    values: np.ndarray
    grads: np.ndarray

    @classmethod
    def from_values(cls, values: np.ndarray) -> "EdgeWeightTable":
        values = np.asarray(values, dtype=np.float64)
        return cls(values=values, grads=np.zeros_like(values))

    @classmethod
    def zeros(cls, space: SearchSpace) -> "EdgeWeightTable":
        return cls.from_values(np.zeros(space.num_edges))


@dataclass
class Path:
    """An accepted path: ordered edge ids, label sequence, and segmentation."""

    edges: list[int]
    labels: list[int]
    segments: list[tuple[int, int]]

    @classmethod
    def from_edges(cls, space: SearchSpace, edge_ids) -> "Path":
        edge_ids = [int(e) for e in edge_ids]
        labels = [int(space.edge_label[e]) for e in edge_ids]
        segments = [(int(space.edge_start[e]), int(space.edge_end[e]))
                    for e in edge_ids]
        return cls(edges=edge_ids, labels=labels, segments=segments)

    def weight(self, weights: EdgeWeightTable) -> float:
        return float(sum(weights.values[e] for e in self.edges))

    def __len__(self) -> int:
        return len(self.edges)


@dataclass
class Marginals:
    """Per-vertex forward (alpha) and backward (beta) log marginals."""

    alpha: np.ndarray
    beta: np.ndarray
    log_partition: float


def _check_weights(space: SearchSpace, weights: EdgeWeightTable) -> np.ndarray:
    w = np.asarray(weights.values, dtype=np.float64)
    if w.shape != (space.num_edges,):
        raise ValueError(f"weight table has {w.shape}, expected "
                         f"({space.num_edges},)")
    return w


def max_path(space: SearchSpace,
             weights: EdgeWeightTable) -> tuple[Path, float]:
    """Best-path decode: argmax over accepted paths of the summed edge weight.

    Runs the DAG longest-path recursion in vertex id (= topological) order
    and backtracks through the per-vertex best in-edge.  Ties break toward
    the smallest edge id, so decoding is deterministic.
    """
    w = _check_weights(space, weights)
    nv = space.num_vertices
    d = np.full(nv, NEG_INF)
    back = np.full(nv, -1, dtype=np.int64)
    d[space.initial] = 0.0
    for v in range(nv):
        if v == space.initial:
            continue
        ids = space.in_edges[v]
        if len(ids) == 0:
            continue
        scores = d[space.edge_tail[ids]] + w[ids]
        j = int(np.argmax(scores))          # first max = smallest edge id
        if scores[j] == NEG_INF:
            continue
        d[v] = scores[j]
        back[v] = ids[j]

    if d[space.final] == NEG_INF:
        raise ValueError("final vertex is unreachable")
    edges = []
    v = space.final
    while v != space.initial:
        e = int(back[v])
        edges.append(e)
        v = int(space.edge_tail[e])
    edges.reverse()
    return Path.from_edges(space, edges), float(d[space.final])


def forward_backward(space: SearchSpace,
                     weights: EdgeWeightTable) -> Marginals:
    """Log-space forward and backward marginals over all accepted paths.

    alpha(v) = log sum over paths v0 -> v of exp(path weight), beta(v) the
    mirror image toward the final vertex; log Z = alpha(final) = beta(initial).
    """
    w = _check_weights(space, weights)
    nv = space.num_vertices
    alpha = np.full(nv, NEG_INF)
    beta = np.full(nv, NEG_INF)
    alpha[space.initial] = 0.0
    beta[space.final] = 0.0

    for v in range(nv):
        if v == space.initial:
            continue
        ids = space.in_edges[v]
        if len(ids) == 0:
            continue
        terms = alpha[space.edge_tail[ids]] + w[ids]
        m = terms.max()
        if m == NEG_INF:
            continue
        alpha[v] = m + math.log(np.exp(terms - m).sum())

    for v in range(nv - 1, -1, -1):
        if v == space.final:
            continue
        ids = space.out_edges[v]
        if len(ids) == 0:
            continue
        terms = beta[space.edge_head[ids]] + w[ids]
        m = terms.max()
        if m == NEG_INF:
            continue
        beta[v] = m + math.log(np.exp(terms - m).sum())

    return Marginals(alpha=alpha, beta=beta,
                     log_partition=float(alpha[space.final]))


def edge_posteriors(space: SearchSpace, weights: EdgeWeightTable,
                    marginals: Marginals) -> np.ndarray:
    """Posterior mass gamma(e) of each edge under the path distribution.

    gamma(e) = exp(alpha(tail) + w(e) + beta(head) - log Z); edges on no
    accepted path get exactly 0.
    """
    w = _check_weights(space, weights)
    logs = (marginals.alpha[space.edge_tail] + w
            + marginals.beta[space.edge_head])
    gamma = np.zeros(space.num_edges)
    finite = logs > NEG_INF
    gamma[finite] = np.exp(logs[finite] - marginals.log_partition)
    return gamma
