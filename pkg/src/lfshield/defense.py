"""Output-layer gradient clustering defense against label flipping.

Peers are addressed by position (0..m-1) in the stacked gradient array; the
federation layer maps positions back to peer ids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from lfshield import clustering
from lfshield.errors import ContractError

log = logging.getLogger(__name__)

MODES = ("auto", "mild", "extreme")


@dataclass
class NeuronMagnitudes:
    per_peer: np.ndarray  # (peers, classes)
    aggregated: np.ndarray  # (classes,)
    peer_top2: np.ndarray  # (peers, 2), descending
    top2: tuple[int, int]


@dataclass
class FeatureMatrix:
    rows: np.ndarray  # (peers, features); layout depends on the mode
    neurons: np.ndarray  # (peers, 2) neuron indices feeding each row, in block order


@dataclass
class Verdict:
    bad: frozenset[int]
    labels: np.ndarray


@dataclass
class DefenseOutcome:
    bad: frozenset[int]
    mode: str
    top2: tuple[int, int]
    features: FeatureMatrix
    labels: np.ndarray
    magnitudes: NeuronMagnitudes = field(repr=False)


def top_two(values) -> tuple[int, int]:
    """Indices of the two largest entries, descending; lower index wins ties."""
    order = np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")
    return int(order[0]), int(order[1])


def neuron_magnitudes(olg: np.ndarray) -> NeuronMagnitudes:
    """Norm of each output neuron's weight-and-bias gradient, per peer and summed."""
    olg = np.asarray(olg, dtype=np.float64)
    if olg.ndim != 3 or olg.shape[1] < 2:
        raise ContractError(f"expected (peers, classes>=2, hidden+1) gradients, got {olg.shape}")
    per_peer = np.linalg.norm(olg, axis=2)
    aggregated = per_peer.sum(axis=0)
    peer_top2 = np.array([top_two(row) for row in per_peer], dtype=np.int64).reshape(-1, 2)
    return NeuronMagnitudes(per_peer, aggregated, peer_top2, top_two(aggregated))


def identify_source_target(mag: NeuronMagnitudes) -> tuple[int, int]:
    return mag.top2


def held_class_counts(olg: np.ndarray) -> np.ndarray:
    """Per peer, how many output neurons have a negative bias gradient."""
    return (np.asarray(olg)[:, :, -1] < 0).sum(axis=1)


def detect_distribution_mode(olg: np.ndarray, extreme_threshold: float = 1) -> str:
    counts = held_class_counts(olg)
    if counts.size == 0:
        raise ContractError("need at least one peer to detect the data distribution")
    return "extreme" if np.median(counts) <= extreme_threshold else "mild"


def build_features_mild(olg: np.ndarray, imax1: int, imax2: int) -> FeatureMatrix:
    olg = np.asarray(olg, dtype=np.float64)
    rows = np.concatenate([olg[:, imax1, :], olg[:, imax2, :]], axis=1)
    neurons = np.tile([imax1, imax2], (olg.shape[0], 1))
    return FeatureMatrix(rows, neurons)


EXTREME_LAYOUTS = ("anchored", "ranked", "masked")


def build_features_extreme(olg: np.ndarray, peer_top2: np.ndarray, layout: str = "anchored") -> FeatureMatrix:
    """Per-peer rows built from each peer's own two strongest output neurons.

    ``anchored`` (default): the strongest neuron's gradient sits at its class
    slot of an otherwise zero (classes, hidden+1) block, followed by the second
    neuron's gradient. ``ranked``: the two gradients concatenated by descending
    magnitude, with no class position. ``masked``: the full output layer with
    every other neuron zeroed.
    """
    olg = np.asarray(olg, dtype=np.float64)
    if layout not in EXTREME_LAYOUTS:
        raise ContractError(f"layout must be one of {EXTREME_LAYOUTS}, got {layout!r}")
    idx = np.arange(olg.shape[0])
    if layout == "ranked":
        rows = np.concatenate([olg[idx, peer_top2[:, 0], :], olg[idx, peer_top2[:, 1], :]], axis=1)
    elif layout == "anchored":
        first = np.zeros_like(olg)
        first[idx, peer_top2[:, 0]] = olg[idx, peer_top2[:, 0]]
        rows = np.concatenate([first.reshape(olg.shape[0], -1), olg[idx, peer_top2[:, 1], :]], axis=1)
    else:  # masked
        mask = np.zeros(olg.shape[:2], dtype=bool)
        mask[idx, peer_top2[:, 0]] = True
        mask[idx, peer_top2[:, 1]] = True
        rows = (olg * mask[:, :, None]).reshape(olg.shape[0], -1)
    return FeatureMatrix(rows, np.asarray(peer_top2))


def cluster_inverse_density(rows) -> float:
    """Mean over rows of each row's widest angle (degrees) to another row of the cluster."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] == 0:
        raise ContractError("cluster_inverse_density needs at least one row")
    if rows.shape[0] == 1:
        return 0.0
    return float(clustering.pairwise_angles(rows).max(axis=1).mean())


def filter_mild(
    features: FeatureMatrix | np.ndarray,
    seed: int | None = None,
    *,
    rng: np.random.Generator | None = None,
) -> Verdict:
    """Two-means split; the cluster with the lower size-weighted inverse density is bad."""
    rows = features.rows if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    m = rows.shape[0]
    if m < 2:
        raise ContractError("filter_mild needs at least two peers")
    if np.all(rows == rows[0]):
        log.info("all %d feature rows identical; nothing to filter", m)
        return Verdict(frozenset(), np.zeros(m, dtype=np.int64))
    result = clustering.kmeans(rows, 2, seed, rng=rng)
    labels = clustering.canonical_labels(result.labels)
    members = [np.flatnonzero(labels == j) for j in (0, 1)]
    scores = [
        len(idx) / m * cluster_inverse_density(rows[idx]) for idx in members
    ]
    if scores[0] == scores[1]:
        # canonical labelling puts peer 0 in cluster 0
        bad = 0
    else:
        bad = int(np.argmin(scores))
    return Verdict(frozenset(int(i) for i in members[bad]), labels)


def filter_extreme(
    olg: np.ndarray,
    peer_top2: np.ndarray | None = None,
    min_cluster_size: int = 2,
    layout: str = "anchored",
) -> Verdict:
    """Density clustering of each peer's own top-two neuron gradients.

    Whenever two clusters' mean gradients peak at the same neuron, the smaller
    cluster is bad; HDBSCAN outliers are bad too.
    """
    olg = np.asarray(olg, dtype=np.float64)
    m = olg.shape[0]
    if m < 3:
        raise ContractError("filter_extreme needs at least three peers")
    if peer_top2 is None:
        peer_top2 = neuron_magnitudes(olg).peer_top2
    rows = build_features_extreme(olg, peer_top2, layout).rows
    assignment = clustering.hdbscan(rows, min_cluster_size=min_cluster_size)
    labels = assignment.labels
    groups = assignment.members
    peaks = [
        int(np.argmax(np.linalg.norm(olg[g].mean(axis=0), axis=1))) for g in groups
    ]
    bad: set[int] = set(assignment.outliers)
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            if peaks[i] != peaks[j] or len(groups[i]) == len(groups[j]):
                continue
            smaller = groups[i] if len(groups[i]) < len(groups[j]) else groups[j]
            bad.update(smaller)
    return Verdict(frozenset(bad), labels)


def defend(
    olg: np.ndarray,
    mode: str = "auto",
    seed: int | None = None,
    *,
    rng: np.random.Generator | None = None,
    extreme_threshold: float = 1,
) -> DefenseOutcome:
    """Run the full defense on stacked output-layer gradients (peers, classes, hidden+1)."""
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    olg = np.asarray(olg, dtype=np.float64)
    mag = neuron_magnitudes(olg)
    if mode == "auto":
        mode = detect_distribution_mode(olg, extreme_threshold)
    if mode == "mild":
        i1, i2 = identify_source_target(mag)
        feats = build_features_mild(olg, i1, i2)
        verdict = filter_mild(feats, seed, rng=rng)
    else:
        feats = build_features_extreme(olg, mag.peer_top2)
        verdict = filter_extreme(olg, mag.peer_top2)
    return DefenseOutcome(verdict.bad, mode, mag.top2, feats, verdict.labels, mag)
