"""The federated training loop: select peers, train locally, filter, aggregate."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from lfshield import baselines, data, defense, metrics, nn
from lfshield.clustering import pca_top2
from lfshield.config import ExperimentConfig, validate
from lfshield.errors import AggregationError, ContractError

log = logging.getLogger(__name__)

# spawn-key tags for the independent random streams of one experiment
_TAG_INIT, _TAG_PARTITION, _TAG_ATTACK, _TAG_SELECT, _TAG_PEER, _TAG_DEFENSE, _TAG_SPLIT = range(7)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator addressed by (seed, key...), e.g. (seed, PEER, round, peer)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def peer_rng(seed: int, peer: int, rnd: int) -> np.random.Generator:
    return stream(seed, _TAG_PEER, rnd, peer)


@dataclass
class Federation:
    """Everything fixed for the whole run: data split, partition, attackers."""

    config: ExperimentConfig
    train: data.Dataset
    test: data.Dataset
    plan: data.PartitionPlan
    attack: data.AttackSpec
    peer_data: list[data.Dataset]
    initial: nn.ModelParams

    @property
    def hp(self) -> nn.Hyperparams:
        c = self.config
        return nn.Hyperparams(c.lr, c.momentum, c.local_epochs, c.batch_size)


@dataclass
class RoundState:
    t: int
    params: nn.ModelParams
    selected: list[int] = field(default_factory=list)
    updates: dict[int, nn.ModelParams] = field(default_factory=dict)
    gradients: dict[int, nn.ModelParams] = field(default_factory=dict)
    excluded: frozenset[int] = frozenset()
    next_params: nn.ModelParams | None = None
    outcome: defense.DefenseOutcome | None = None
    defense_seconds: float = 0.0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[metrics.RoundReport]
    final: nn.ModelParams
    attackers: frozenset[int]
    feature_rows: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return metrics.summarize(self.reports)


# -- data setup ------------------------------------------------------------


def load_dataset(cfg: ExperimentConfig) -> data.Dataset:
    if cfg.dataset == "digits":
        ds = data.load_digits()
    elif cfg.dataset == "synth":
        ds = data.synth_gaussian(cfg.classes, cfg.synth_n, cfg.synth_dim, cfg.synth_spread, cfg.seed)
    else:
        ds = data.load_idx(cfg.idx_images, cfg.idx_labels, cfg.classes)
    if cfg.max_examples is not None and cfg.max_examples < len(ds):
        keep = stream(cfg.seed, _TAG_SPLIT, 1).permutation(len(ds))[: cfg.max_examples]
        ds = ds.subset(np.sort(keep))
    return ds


def setup(cfg: ExperimentConfig, dataset: data.Dataset | None = None) -> Federation:
    validate(cfg)
    ds = dataset if dataset is not None else load_dataset(cfg)
    split_seed = int(stream(cfg.seed, _TAG_SPLIT, 0).integers(2**31))
    train, test = data.train_test_split(ds, cfg.test_fraction, split_seed)
    part_seed = int(stream(cfg.seed, _TAG_PARTITION).integers(2**31))
    plan = data.partition(train, cfg.regime, cfg.peers, part_seed, cfg.alpha)
    if cfg.attackers is not None:
        attackers = frozenset(cfg.attackers)
        why = data.threat_model_violation(plan, len(attackers), cfg.source, cfg.target)
        if why:
            log.warning("threat-model bound exceeded: %s", why)
    else:
        atk_seed = int(stream(cfg.seed, _TAG_ATTACK).integers(2**31))
        attackers = data.select_attackers(plan, cfg.ratio, cfg.source, cfg.target, atk_seed)
    attack = data.AttackSpec(cfg.source, cfg.target, attackers)
    peer_data = []
    for k, idx in enumerate(plan.assignments):
        ds_k = train.subset(idx)
        peer_data.append(data.flip_labels(ds_k, attack) if k in attackers else ds_k)
    initial = nn.init_params(train.dim, cfg.hidden, train.classes, stream(cfg.seed, _TAG_INIT))
    return Federation(cfg, train, test, plan, attack, peer_data, initial)


# -- peer side -------------------------------------------------------------


def local_train(
    params: nn.ModelParams, peer_ds: data.Dataset, hp: nn.Hyperparams, rng: np.random.Generator
) -> nn.ModelParams | None:
    """E epochs of shuffled mini-batch momentum SGD on a copy; None for an empty dataset."""
    n = len(peer_ds)
    if n == 0:
        return None
    w = params.copy()
    v = w.zeros_like()
    y_all = nn.one_hot(peer_ds.labels, peer_ds.classes)
    for _ in range(hp.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            trace = nn.forward(w, peer_ds.features[idx])
            grad = nn.backward(w, trace, y_all[idx])
            w, v = nn.sgd_step(w, v, grad, hp)
    return w


def compute_update_gradient(w_t: nn.ModelParams, w_next: nn.ModelParams, lr: float) -> nn.ModelParams:
    """(W^t - W_k^{t+1}) / lr, the gradient the server attributes to a peer."""
    if not lr > 0:
        raise ContractError(f"lr must be positive, got {lr}")
    w_t.check_same_shape(w_next)
    return nn.ModelParams(*((a - b) / lr for a, b in zip(w_t.arrays(), w_next.arrays())))


def fedavg(updates: list[nn.ModelParams], weights) -> nn.ModelParams:
    """Weighted coordinate mean of parameter sets."""
    if not updates:
        raise AggregationError("no updates to aggregate")
    stacked = np.stack([u.to_vector() for u in updates])
    return updates[0].like_vector(baselines.weighted_mean(stacked, weights))


# -- server side -----------------------------------------------------------


def select_peers(cfg: ExperimentConfig, t: int) -> list[int]:
    m = cfg.selected_count
    if m >= cfg.peers:
        return list(range(cfg.peers))
    chosen = stream(cfg.seed, _TAG_SELECT, t).choice(cfg.peers, size=m, replace=False)
    return sorted(int(c) for c in chosen)


def _aggregate(fed: Federation, state: RoundState, history: dict[int, np.ndarray]):
    """Apply the configured aggregation rule; returns (next params or None, excluded ids)."""
    cfg = fed.config
    ids = state.selected
    sizes = np.array([len(fed.peer_data[k]) for k in ids], dtype=np.float64)
    vecs = np.stack([state.updates[k].to_vector() for k in ids])
    like = state.params
    name = cfg.defense
    n_bad_known = len(fed.attack.attacker_ids & set(ids))

    if name == "fedavg":
        return like.like_vector(baselines.weighted_mean(vecs, sizes)), frozenset()
    if name == "median":
        return like.like_vector(baselines.coord_median(vecs)), frozenset()
    if name == "rmedian":
        if len(ids) < 2:
            return like.like_vector(vecs[0]), frozenset()
        return like.like_vector(baselines.repeated_median(vecs)), frozenset()
    if name == "tmean":
        beta = cfg.trim_beta if cfg.trim_beta is not None else n_bad_known / len(ids)
        if beta >= 0.5:
            # trimming half from each side is the median
            return like.like_vector(baselines.coord_median(vecs)), frozenset()
        return like.like_vector(baselines.trimmed_mean(vecs, beta)), frozenset()
    if name == "mkrum":
        f = cfg.krum_f if cfg.krum_f is not None else n_bad_known
        agg, chosen = baselines.multi_krum(vecs, f, sizes)
        kept = {ids[i] for i in chosen}
        return like.like_vector(agg), frozenset(set(ids) - kept)
    if name == "fgold":
        for k in ids:
            g = state.gradients[k].output_layer().ravel()
            history[k] = history.get(k, 0.0) + g
        if len(ids) < 2:
            return like.like_vector(vecs[0]), frozenset()
        weights = baselines.foolsgold(np.stack([history[k] for k in ids]))
        excluded = frozenset(k for k, w in zip(ids, weights) if w == 0)
        if weights.sum() <= 0:
            return None, excluded
        return like.like_vector(baselines.weighted_mean(vecs, weights)), excluded
    if name == "ours":
        olg = np.stack([state.gradients[k].output_layer() for k in ids])
        if len(ids) == 1:
            return like.like_vector(vecs[0]), frozenset()
        # density clustering needs three peers; two can still be split in mild mode
        mode = cfg.mode if len(ids) >= 3 else "mild"
        state.outcome = defense.defend(
            olg, mode, rng=stream(cfg.seed, _TAG_DEFENSE, state.t),
            extreme_threshold=cfg.extreme_threshold,
        )
        excluded = frozenset(ids[i] for i in state.outcome.bad)
        keep = [i for i, k in enumerate(ids) if k not in excluded]
        if not keep:
            return None, excluded
        return like.like_vector(baselines.weighted_mean(vecs[keep], sizes[keep])), excluded
    raise AggregationError(f"unknown aggregation rule {name!r}")


def run_round(
    fed: Federation,
    params: nn.ModelParams,
    t: int,
    executor: ThreadPoolExecutor | None = None,
    history: dict[int, np.ndarray] | None = None,
) -> RoundState:
    cfg = fed.config
    hp = fed.hp
    state = RoundState(t, params, select_peers(cfg, t))

    def work(k):
        return k, local_train(params, fed.peer_data[k], hp, peer_rng(cfg.seed, k, t))

    jobs = map(work, state.selected) if executor is None else executor.map(work, state.selected)
    for k, w in jobs:
        if w is None:
            log.info("round %d: peer %d has no data, skipped", t, k)
            continue
        state.updates[k] = w
        state.gradients[k] = compute_update_gradient(params, w, hp.lr)
    state.selected = [k for k in state.selected if k in state.updates]
    if not state.selected:
        state.next_params = params
        return state

    tic = time.perf_counter()
    nxt, state.excluded = _aggregate(fed, state, history if history is not None else {})
    state.defense_seconds = time.perf_counter() - tic
    if nxt is None:
        log.warning("round %d: every selected update was excluded; keeping the global model", t)
        nxt = params
    if not nxt.is_finite():
        raise AggregationError(f"round {t}: aggregated model is not finite")
    state.next_params = nxt
    return state


def _feature_rows(fed: Federation, state: RoundState) -> list[dict]:
    """Per-peer diagnostic rows: relevant-neuron features and their 2-D projection."""
    ids = state.selected
    if len(ids) < 2:
        return []
    if state.outcome is not None:
        feats, labels, mode = state.outcome.features, state.outcome.labels, state.outcome.mode
    else:
        olg = np.stack([state.gradients[k].output_layer() for k in ids])
        mode = fed.config.mode
        if mode == "auto":
            mode = defense.detect_distribution_mode(olg, fed.config.extreme_threshold)
        mag = defense.neuron_magnitudes(olg)
        if mode == "mild":
            feats = defense.build_features_mild(olg, *mag.top2)
        else:
            feats = defense.build_features_extreme(olg, mag.peer_top2)
        labels = np.full(len(ids), -1)
    coords = pca_top2(feats.rows).coords
    rows = []
    for i, k in enumerate(ids):
        rows.append({
            "round": state.t,
            "peer": k,
            "attacker": int(k in fed.attack.attacker_ids),
            "cluster": int(labels[i]),
            "flagged": int(k in state.excluded),
            "mode": mode,
            "neuron1": int(feats.neurons[i, 0]),
            "neuron2": int(feats.neurons[i, 1]),
            "pc1": float(coords[i, 0]),
            "pc2": float(coords[i, 1]),
            "features": feats.rows[i].tolist(),
        })
    return rows


def run_experiment(
    cfg: ExperimentConfig, threads: int = 1, dataset: data.Dataset | None = None
) -> ExperimentResult:
    fed = setup(cfg, dataset)
    params = fed.initial
    reports: list[metrics.RoundReport] = []
    dumps: list[dict] = []
    history: dict[int, np.ndarray] = {}
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(cfg.rounds):
            state = run_round(fed, params, t, executor, history)
            params = state.next_params
            scores = metrics.evaluate(params, fed.test, cfg.source, cfg.target)
            present = sorted(fed.attack.attacker_ids & set(state.selected))
            precision, recall = metrics.detection_scores(state.excluded, present)
            reports.append(metrics.RoundReport(
                round=t,
                **scores,
                selected=state.selected,
                excluded=sorted(state.excluded),
                attackers=present,
                precision=precision,
                recall=recall,
                mode=state.outcome.mode if state.outcome else None,
                defense_seconds=state.defense_seconds,
            ))
            if cfg.dump_features:
                dumps.extend(_feature_rows(fed, state))
            log.debug("round %d: %s", t, scores)
    finally:
        if executor is not None:
            executor.shutdown()
    return ExperimentResult(cfg, reports, params, fed.attack.attacker_ids, dumps)
