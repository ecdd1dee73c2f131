"""Comparison aggregators: median, trimmed mean, repeated median, multi-Krum, FoolsGold.

Every function takes the peers' updates stacked as an (m, P) array of flat
parameter vectors and works coordinate-wise unless noted.
"""

from __future__ import annotations

import math

import numpy as np

from lfshield.errors import ConfigError, ContractError


def _stack(updates) -> np.ndarray:
    arr = np.asarray(updates, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ContractError("expected a non-empty (peers, params) stack of updates")
    return arr


def weighted_mean(updates, weights=None) -> np.ndarray:
    arr = _stack(updates)
    if weights is None:
        return arr.mean(axis=0)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (arr.shape[0],) or (w < 0).any() or w.sum() <= 0:
        raise ContractError("weights must be non-negative, one per update, not all zero")
    return (w / w.sum()) @ arr


def coord_median(updates) -> np.ndarray:
    return np.median(_stack(updates), axis=0)


def trimmed_mean(updates, beta: float) -> np.ndarray:
    """Drop floor(beta*m) values from each end of every coordinate, average the rest."""
    arr = _stack(updates)
    m = arr.shape[0]
    if not 0 <= beta < 0.5:
        raise ConfigError(f"trim fraction must lie in [0, 0.5), got {beta}")
    cut = math.floor(beta * m)
    if m - 2 * cut < 1:
        raise ConfigError(f"trimming {cut} per side leaves nothing of {m} updates")
    kept = np.sort(arr, axis=0)[cut:m - cut]
    return kept.mean(axis=0)


def repeated_median(updates) -> np.ndarray:
    """Siegel repeated-median line through (rank, value) per coordinate, read at mid-rank."""
    arr = _stack(updates)
    m = arr.shape[0]
    if m < 2:
        raise ContractError("repeated median needs at least two updates")
    y = np.sort(arr, axis=0)  # (m, P)
    x = np.arange(1, m + 1, dtype=np.float64)
    dy = y[None, :, :] - y[:, None, :]  # [i, k] = y_k - y_i
    dx = (x[None, :] - x[:, None])[:, :, None]
    off = ~np.eye(m, dtype=bool)
    slopes = (dy / np.where(dx == 0, 1.0, dx))[off].reshape(m, m - 1, -1)
    b = np.median(np.median(slopes, axis=1), axis=0)
    a = np.median(y - b[None, :] * x[:, None], axis=0)
    return a + b * (m + 1) / 2.0


def krum_scores(updates, f: int) -> np.ndarray:
    arr = _stack(updates)
    m = arr.shape[0]
    n_near = m - f - 2
    diff = arr[:, None, :] - arr[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    return np.sort(d2, axis=1)[:, :n_near].sum(axis=1)


def multi_krum_select(updates, f: int) -> np.ndarray:
    """Positions of the m-f updates with the smallest Krum scores (ties: lower position)."""
    arr = _stack(updates)
    m = arr.shape[0]
    if f < 0 or m < f + 3:
        raise ConfigError(f"multi-Krum needs m >= f + 3 (m={m}, f={f})")
    scores = krum_scores(arr, f)
    return np.sort(np.argsort(scores, kind="stable")[: m - f])


def multi_krum(updates, f: int, weights=None) -> tuple[np.ndarray, np.ndarray]:
    arr = _stack(updates)
    chosen = multi_krum_select(arr, f)
    w = None if weights is None else np.asarray(weights, dtype=np.float64)[chosen]
    return weighted_mean(arr[chosen], w), chosen


def _cosine_matrix(hist: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(hist, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = hist / safe[:, None]
    return unit @ unit.T


def foolsgold(history) -> np.ndarray:
    """Per-peer weights in [0, 1] that shrink peers whose histories look alike."""
    hist = _stack(history)
    m = hist.shape[0]
    if m < 2:
        raise ContractError("FoolsGold needs at least two peers")
    if not np.linalg.norm(hist, axis=1).any():
        return np.ones(m)
    cs = _cosine_matrix(hist) - np.eye(m)
    maxcs = cs.max(axis=1)
    # pardoning: scale down similarity to peers that look more sybil-like than oneself
    for i in range(m):
        for j in range(m):
            if i != j and maxcs[i] < maxcs[j] and maxcs[j] > 0:
                cs[i, j] *= maxcs[i] / maxcs[j]
    wv = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    if wv.max() == 0:
        return np.zeros(m)
    wv = wv / wv.max()
    wv[wv == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        wv = np.log(wv / (1.0 - wv)) + 0.5
    wv[np.isinf(wv) & (wv > 0)] = 1.0
    return np.clip(wv, 0.0, 1.0)
