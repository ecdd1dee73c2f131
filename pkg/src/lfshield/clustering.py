"""Numerical primitives: angles, k-means, HDBSCAN and a power-iteration PCA.

All distances are Euclidean and computed in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lfshield.errors import ContractError

_LAMBDA_FLOOR = 1e-300  # smallest distance turned into a density level


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    n_clusters: int

    @property
    def members(self) -> list[list[int]]:
        return [np.flatnonzero(self.labels == c).tolist() for c in range(self.n_clusters)]

    @property
    def outliers(self) -> list[int]:
        return np.flatnonzero(self.labels == -1).tolist()


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber clusters by first appearance, keeping -1 for outliers."""
    out = np.full(len(labels), -1, dtype=np.int64)
    mapping: dict[int, int] = {}
    for i, lab in enumerate(labels):
        if lab < 0:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


# -- angles ----------------------------------------------------------------


def angle(u, v) -> float:
    """Angle between two vectors in degrees; 0 if either has zero norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(_half_angle(u / nu, v / nv))


def _half_angle(a, b):
    # 2*atan2(|a-b|, |a+b|) for unit vectors; exact at 0 and 180, unlike arccos
    return np.degrees(2.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1)))


def pairwise_angles(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = rows / safe[:, None]
    out = _half_angle(unit[:, None, :], unit[None, :, :])
    zero = norms == 0
    out[zero, :] = 0.0
    out[:, zero] = 0.0
    np.fill_diagonal(out, 0.0)
    return out


def pairwise_distances(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    diff = rows[:, None, :] - rows[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


# -- k-means ---------------------------------------------------------------


@dataclass
class KMeansResult:
    assignment: ClusterAssignment
    centroids: np.ndarray
    inertia: float
    restart_inertias: list[float] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return self.assignment.labels


def _sq_dists(rows: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = rows[:, None, :] - centroids[None, :, :]
    return (diff * diff).sum(axis=-1)


def _kmeans_pp(rows: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = rows.shape[0]
    centers = [rows[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(rows, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers.append(rows[idx])
    return np.array(centers, dtype=np.float64)


def _repair_empty(rows, labels, centroids, k) -> int:
    """Give each empty cluster the point farthest from its own centroid."""
    repairs = 0
    for j in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[j] > 0:
            continue
        d2 = ((rows - centroids[labels]) ** 2).sum(axis=1)
        d2[counts[labels] <= 1] = -1.0  # never empty another cluster
        victim = int(np.argmax(d2))
        labels[victim] = j
        centroids[j] = rows[victim]
        repairs += 1
    return repairs


def _lloyd(rows, k, rng, max_iter, tol):
    centroids = _kmeans_pp(rows, k, rng)
    prev = None
    for _ in range(max_iter):
        labels = _sq_dists(rows, centroids).argmin(axis=1)
        _repair_empty(rows, labels, centroids, k)
        for j in range(k):
            centroids[j] = rows[labels == j].mean(axis=0)
        inertia = float(((rows - centroids[labels]) ** 2).sum())
        if prev is not None and abs(prev - inertia) <= tol * max(prev, 0.0):
            break
        prev = inertia
    return labels, centroids, inertia


def kmeans(
    rows,
    k: int,
    seed: int | None = None,
    *,
    rng: np.random.Generator | None = None,
    restarts: int = 10,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; the lowest-inertia restart wins."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    if k <= 0:
        raise ContractError(f"k must be positive, got {k}")
    if rows.shape[0] < k:
        raise ContractError(f"need at least k={k} rows, got {rows.shape[0]}")
    if rng is None:
        rng = np.random.default_rng(seed)
    best = None
    inertias = []
    for _ in range(restarts):
        labels, centroids, inertia = _lloyd(rows, k, rng, max_iter, tol)
        inertias.append(inertia)
        if best is None or inertia < best[2]:
            best = (labels, centroids, inertia)
    labels, centroids, inertia = best
    return KMeansResult(ClusterAssignment(labels.astype(np.int64), k), centroids, inertia, inertias)


# -- HDBSCAN ---------------------------------------------------------------


def core_distances(dist: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance to the min_samples-th nearest point, the point itself counted first."""
    n = dist.shape[0]
    kth = min(min_samples, n) - 1
    return np.sort(dist, axis=1)[:, kth]


def mutual_reachability(dist: np.ndarray, core: np.ndarray) -> np.ndarray:
    mr = np.maximum(dist, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mr, 0.0)
    return mr


def minimum_spanning_tree(weights: np.ndarray) -> list[tuple[int, int, float]]:
    """Prim's algorithm on a dense symmetric weight matrix."""
    n = weights.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = weights[0].copy()
    parent = np.zeros(n, dtype=np.int64)
    edges = []
    for _ in range(n - 1):
        cand = np.where(in_tree, np.inf, best)
        j = int(np.argmin(cand))
        edges.append((int(parent[j]), j, float(best[j])))
        in_tree[j] = True
        closer = weights[j] < best
        parent[closer] = j
        best = np.minimum(best, weights[j])
    return edges


def _single_linkage(edges, n):
    """Merge MST edges by weight into a binary dendrogram.

    Returns (left, right, distance, size) per merge; merge i creates node n+i.
    """
    parent = list(range(2 * n - 1))
    size = [1] * n + [0] * (n - 1)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    merges = []
    for a, b, w in sorted(edges, key=lambda e: e[2]):
        ra, rb = find(a), find(b)
        node = n + len(merges)
        parent[ra] = parent[rb] = node
        size[node] = size[ra] + size[rb]
        merges.append((ra, rb, w, size[node]))
    return merges


@dataclass
class CondensedTree:
    parent: list[int]
    child: list[int]
    lam: list[float]
    child_size: list[int]
    n_points: int

    def clusters(self) -> list[int]:
        return sorted({p for p in self.parent} | {c for c in self.child if c >= self.n_points})


def condense_tree(merges, n: int, min_cluster_size: int) -> CondensedTree:
    root = 2 * n - 2
    left = {n + i: m[0] for i, m in enumerate(merges)}
    right = {n + i: m[1] for i, m in enumerate(merges)}
    dist = {n + i: m[2] for i, m in enumerate(merges)}
    size = {n + i: m[3] for i, m in enumerate(merges)}
    for i in range(n):
        size[i] = 1

    def leaves(node):
        stack, out = [node], []
        while stack:
            x = stack.pop()
            if x < n:
                out.append(x)
            else:
                stack.extend((left[x], right[x]))
        return out

    tree = CondensedTree([], [], [], [], n)
    relabel = {root: n}
    next_label = n + 1
    queue = [root]
    while queue:
        node = queue.pop(0)
        if node < n:
            continue
        lam = 1.0 / max(dist[node], _LAMBDA_FLOOR)
        here = relabel[node]
        l, r = left[node], right[node]
        big_l, big_r = size[l] >= min_cluster_size, size[r] >= min_cluster_size
        if big_l and big_r:
            for ch in (l, r):
                relabel[ch] = next_label
                tree.parent.append(here)
                tree.child.append(next_label)
                tree.lam.append(lam)
                tree.child_size.append(size[ch])
                next_label += 1
                queue.append(ch)
        else:
            for ch, big in ((l, big_l), (r, big_r)):
                if big:
                    relabel[ch] = here
                    queue.append(ch)
                else:
                    for p in leaves(ch):
                        tree.parent.append(here)
                        tree.child.append(p)
                        tree.lam.append(lam)
                        tree.child_size.append(1)
    return tree


def _stabilities(tree: CondensedTree) -> dict[int, float]:
    birth = {tree.n_points: 0.0}
    for p, c, lam in zip(tree.parent, tree.child, tree.lam):
        if c >= tree.n_points:
            birth[c] = lam
    stab = {c: 0.0 for c in birth}
    for p, lam, s in zip(tree.parent, tree.lam, tree.child_size):
        stab[p] += (lam - birth[p]) * s
    return stab


def select_clusters_eom(tree: CondensedTree) -> set[int]:
    """Excess-of-mass selection; ties favour the children.

    The root is only selectable when it never splits into two clusters.
    """
    n = tree.n_points
    stab = _stabilities(tree)
    children: dict[int, list[int]] = {c: [] for c in stab}
    for p, c in zip(tree.parent, tree.child):
        if c >= n:
            children[p].append(c)
    selected = {}
    for c in sorted(stab, reverse=True):
        kids = children[c]
        if not kids:
            selected[c] = True
            continue
        subtree = sum(stab[k] for k in kids)
        if c == n or subtree >= stab[c]:
            selected[c] = False
            stab[c] = subtree
        else:
            selected[c] = True
            stack = list(kids)
            while stack:
                d = stack.pop()
                selected[d] = False
                stack.extend(children[d])
    return {c for c, s in selected.items() if s}


def hdbscan(rows, min_cluster_size: int = 2, min_samples: int | None = None) -> ClusterAssignment:
    """Density clustering over the mutual-reachability MST; unclustered rows get -1."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    n = rows.shape[0]
    if min_cluster_size < 2:
        raise ContractError("min_cluster_size must be at least 2")
    if n < 2:
        raise ContractError("hdbscan needs at least two rows")
    if min_samples is None:
        min_samples = min_cluster_size
    dist = pairwise_distances(rows)
    mr = mutual_reachability(dist, core_distances(dist, min_samples))
    tree = condense_tree(_single_linkage(minimum_spanning_tree(mr), n), n, min_cluster_size)
    chosen = select_clusters_eom(tree)

    up = {c: p for p, c in zip(tree.parent, tree.child) if c >= n}
    labels = np.full(n, -1, dtype=np.int64)
    for p, c in zip(tree.parent, tree.child):
        if c >= n:
            continue
        node = p
        while node not in chosen and node in up:
            node = up[node]
        if node in chosen:
            labels[c] = node
    labels = canonical_labels(labels)
    return ClusterAssignment(labels, int(labels.max()) + 1 if (labels >= 0).any() else 0)


def mst_weight(rows, min_samples: int = 2) -> float:
    """Total weight of the mutual-reachability MST hdbscan builds (for checking)."""
    dist = pairwise_distances(np.asarray(rows, dtype=np.float64))
    mr = mutual_reachability(dist, core_distances(dist, min_samples))
    return math.fsum(sorted(w for _, _, w in minimum_spanning_tree(mr)))


# -- PCA -------------------------------------------------------------------


@dataclass
class PCAResult:
    coords: np.ndarray  # (n, 2)
    components: np.ndarray  # (2, d)
    explained_variance: np.ndarray  # (2,)
    total_variance: float = 0.0

    @property
    def explained_ratio(self) -> np.ndarray:
        total = self.total_variance
        return self.explained_variance / total if total > 0 else np.zeros(2)


def _power_iterate(cov, basis, tol, max_iter):
    d = cov.shape[0]
    v = np.ones(d) / np.sqrt(d) + np.linspace(0.0, 1e-3, d)
    for b in basis:
        v -= (v @ b) * b
    if np.linalg.norm(v) == 0:
        v = np.eye(d)[len(basis)]
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        for b in basis:
            w -= (w @ b) * b
        norm = np.linalg.norm(w)
        if norm == 0:
            return v, 0.0
        w /= norm
        if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
            v = w
            break
        v = w
    return v, float(v @ cov @ v)


def _fix_sign(v):
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def pca_top2(rows, tol: float = 1e-10, max_iter: int = 1000) -> PCAResult:
    """First two principal components by deflated power iteration on the covariance."""
    rows = np.asarray(rows, dtype=np.float64)
    n, d = rows.shape
    if n < 2:
        raise ContractError("pca_top2 needs at least two rows")
    centered = rows - rows.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    total = float(np.trace(cov))
    if total == 0.0:
        return PCAResult(np.zeros((n, 2)), np.zeros((2, d)), np.zeros(2), 0.0)
    comps, variances = [], []
    for _ in range(min(2, d)):
        v, lam = _power_iterate(cov, comps, tol, max_iter)
        comps.append(_fix_sign(v))
        variances.append(max(lam, 0.0))
    while len(comps) < 2:
        comps.append(np.zeros(d))
        variances.append(0.0)
    components = np.array(comps)
    return PCAResult(centered @ components.T, components, np.array(variances), total)
