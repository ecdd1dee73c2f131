"""Synthetic gradient fixtures shared by unit and acceptance tests."""

from __future__ import annotations

import numpy as np


def jittered_rows(direction, n, jitter_deg, rng, exact=True):
    """n unit rows at angle ``jitter_deg`` to ``direction`` (uniform in [0, jitter_deg] unless exact)."""
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.linalg.norm(u)
    out = np.empty((n, u.size))
    for i in range(n):
        theta = np.deg2rad(jitter_deg if exact else rng.uniform(0.0, jitter_deg))
        v = rng.standard_normal(u.size)
        v -= (v @ u) * u
        v /= np.linalg.norm(v)
        out[i] = np.cos(theta) * u + np.sin(theta) * v
    return out


def planted_mild(n_peers, n_attackers, rng, dim=66, honest_jitter=25.0, attacker_jitter=5.0, exact=True):
    """Honest rows around u, attacker rows around -u; attackers at random positions."""
    u = rng.standard_normal(dim)
    honest = jittered_rows(u, n_peers - n_attackers, honest_jitter, rng, exact)
    bad = jittered_rows(-u, n_attackers, attacker_jitter, rng, exact)
    order = rng.permutation(n_peers)
    rows = np.empty((n_peers, dim))
    rows[order[:n_attackers]] = bad
    rows[order[n_attackers:]] = honest
    return rows, frozenset(int(i) for i in order[:n_attackers])


def extreme_gradients(
    rng,
    classes=10,
    per_class=10,
    hidden=16,
    source=7,
    target=1,
    n_attackers=4,
    singleton=False,
    noise=0.02,
):
    """Output-layer gradients shaped like a one-class-per-peer federation.

    A peer whose examples come from class x but carry label y has neuron-wise
    gradient delta_i * [a_x, 1], with delta_y < 0 and a positive delta on the
    classes the model confuses it with. ``n_attackers`` of the source-class
    peers use label ``target``. With ``singleton`` one extra peer holding
    flipped 3-images (labelled 8) is appended.
    Returns (olg, attackers) with olg of shape (peers, classes, hidden+1).
    """
    protos = rng.uniform(0.0, 1.0, size=(classes, hidden))
    protos *= rng.uniform(0.0, 1.0, size=(classes, hidden)) > 0.4
    confuser = (np.arange(classes) + 3) % classes

    def peer(x, y):
        act = np.clip(protos[x] + noise * rng.standard_normal(hidden), 0.0, None)
        delta = np.full(classes, 0.01) + 0.002 * rng.random(classes)
        delta[confuser[y]] = 0.12 + 0.01 * rng.random()
        if x != y:
            delta[x] = 0.35 + 0.02 * rng.random()
        delta[y] = -(delta.sum() - delta[y])
        return delta[:, None] * np.append(act, 1.0)[None, :]

    rows, attackers = [], []
    for c in range(classes):
        for j in range(per_class):
            if c == source and j < n_attackers:
                attackers.append(len(rows))
                rows.append(peer(source, target))
            else:
                rows.append(peer(c, c))
    if singleton:
        attackers.append(len(rows))
        rows.append(peer(3, 8))
    olg = np.stack(rows)
    perm = rng.permutation(len(rows))
    inv = np.argsort(perm)
    return olg[perm], frozenset(int(inv[a]) for a in attackers)
