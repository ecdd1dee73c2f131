"""Slow but obviously correct reference implementations used by the tests."""

from __future__ import annotations

import itertools
import math
import statistics

import numpy as np


def median_by_sorting(values) -> float:
    s = sorted(values)
    m = len(s)
    if m % 2:
        return s[m // 2]
    return (s[m // 2 - 1] + s[m // 2]) / 2


def coord_median(updates) -> np.ndarray:
    arr = np.asarray(updates, dtype=np.float64)
    return np.array([median_by_sorting(arr[:, j].tolist()) for j in range(arr.shape[1])])


def repeated_median(updates) -> np.ndarray:
    """Siegel estimator on (rank, sorted value) per coordinate, read at mid-rank."""
    arr = np.asarray(updates, dtype=np.float64)
    m = arr.shape[0]
    out = []
    for j in range(arr.shape[1]):
        y = sorted(arr[:, j].tolist())
        x = list(range(1, m + 1))
        inner = [
            statistics.median([(y[k] - y[i]) / (x[k] - x[i]) for k in range(m) if k != i])
            for i in range(m)
        ]
        b = statistics.median(inner)
        a = statistics.median([y[i] - b * x[i] for i in range(m)])
        out.append(a + b * (m + 1) / 2.0)
    return np.array(out)


def krum_selection(updates, f: int) -> list[int]:
    """Score every update by brute force; keep the m-f best (earlier position wins ties)."""
    rows = [list(map(float, u)) for u in updates]
    m = len(rows)
    scores = []
    for i in range(m):
        d = sorted(sum((a - b) ** 2 for a, b in zip(rows[i], rows[j])) for j in range(m) if j != i)
        scores.append(sum(d[: m - f - 2]))
    rank = {i: sum((scores[j], j) < (scores[i], i) for j in range(m)) for i in range(m)}
    return sorted(i for i in range(m) if rank[i] < m - f)


def _prufer_edges(n: int) -> np.ndarray:
    """Every labelled tree on n nodes as an (n**(n-2), n-1, 2) edge array."""
    if n == 2:
        return np.array([[[0, 1]]])
    seqs = np.array(list(itertools.product(range(n), repeat=n - 2)), dtype=np.int64)
    t = seqs.shape[0]
    degree = np.ones((t, n), dtype=np.int64)
    rows = np.arange(t)
    for col in range(n - 2):
        np.add.at(degree, (rows, seqs[:, col]), 1)
    edges = np.empty((t, n - 1, 2), dtype=np.int64)
    for col in range(n - 2):
        leaf = np.argmax(degree == 1, axis=1)
        edges[:, col, 0] = leaf
        edges[:, col, 1] = seqs[:, col]
        degree[rows, leaf] -= 1
        degree[rows, seqs[:, col]] -= 1
    last = np.argsort(degree != 1, axis=1, kind="stable")[:, :2]
    edges[:, n - 2] = last
    return edges


_TREES: dict[int, np.ndarray] = {}


def min_spanning_weight(weights: np.ndarray) -> float:
    """Minimum total weight over all n**(n-2) spanning trees (Cayley), exactly summed."""
    n = weights.shape[0]
    if n == 1:
        return 0.0
    if n not in _TREES:
        _TREES[n] = _prufer_edges(n)
    trees = _TREES[n]
    w = weights[trees[:, :, 0], trees[:, :, 1]]
    totals = w.sum(axis=1)
    # all minimum trees share one multiset of edge weights; compare candidates exactly
    near = np.flatnonzero(totals <= totals.min() * (1 + 1e-9) + 1e-300)
    return min(math.fsum(sorted(w[i].tolist())) for i in near)
