from pathlib import Path

import numpy as np
import pytest

from lfshield import data, federation, nn, reports
from lfshield.config import ExperimentConfig
from lfshield.errors import AggregationError, ContractError

GOLDEN = Path(__file__).parent / "golden"


def small_cfg(**kw):
    base = dict(dataset="synth", synth_n=400, synth_dim=6, peers=8, rounds=3, hidden=6, seed=1)
    base.update(kw)
    return ExperimentConfig(**base)


def peer_data(n=30, seed=0):
    return data.synth_gaussian(3, n, 4, 1.0, seed)


def test_local_train_identities():
    ds = peer_data()
    p = nn.init_params(4, 5, 3, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    same = federation.local_train(p, ds, nn.Hyperparams(local_epochs=0), rng)
    assert np.array_equal(same.to_vector(), p.to_vector())
    frozen = federation.local_train(p, ds, nn.Hyperparams(lr=0.0), rng)
    assert np.array_equal(frozen.to_vector(), p.to_vector())
    assert federation.local_train(p, ds.subset(np.array([], dtype=np.int64)), nn.Hyperparams(), rng) is None


def test_local_train_deterministic_and_pure():
    ds = peer_data()
    p = nn.init_params(4, 5, 3, np.random.default_rng(0))
    before = p.to_vector().copy()
    a = federation.local_train(p, ds, nn.Hyperparams(), federation.peer_rng(5, 2, 7))
    b = federation.local_train(p, ds, nn.Hyperparams(), federation.peer_rng(5, 2, 7))
    assert np.array_equal(a.to_vector(), b.to_vector())
    assert np.array_equal(p.to_vector(), before)


def test_update_gradient_examples():
    def scalar(v):
        return nn.ModelParams(np.full((1, 1), v), np.zeros(1), np.zeros((1, 1)), np.zeros(1))

    g = federation.compute_update_gradient(scalar(2.0), scalar(1.5), 0.5)
    assert g.w1[0, 0] == 1.0
    zero = federation.compute_update_gradient(scalar(2.0), scalar(2.0), 0.5)
    assert not zero.to_vector().any()
    with pytest.raises(ContractError):
        federation.compute_update_gradient(scalar(1.0), scalar(1.0), 0.0)


def test_update_gradient_equals_full_batch_gradient():
    ds = peer_data()
    p = nn.init_params(4, 5, 3, np.random.default_rng(0))
    hp = nn.Hyperparams(lr=0.05, momentum=0.0, local_epochs=1, batch_size=len(ds))
    w = federation.local_train(p, ds, hp, np.random.default_rng(0))
    g = federation.compute_update_gradient(p, w, hp.lr)
    direct = nn.backward(p, nn.forward(p, ds.features), nn.one_hot(ds.labels, 3))
    assert np.allclose(g.to_vector(), direct.to_vector(), rtol=1e-9, atol=1e-12)


def test_fedavg_examples():
    def scalar(v):
        return nn.ModelParams(np.full((1, 1), v), np.zeros(1), np.zeros((1, 1)), np.zeros(1))

    assert federation.fedavg([scalar(0.0), scalar(2.0)], [1, 3]).w1[0, 0] == 1.5
    assert federation.fedavg([scalar(0.0), scalar(2.0)], [3, 1]).w1[0, 0] == 0.5
    assert federation.fedavg([scalar(4.0), scalar(4.0)], [1, 1]).w1[0, 0] == 4.0
    with pytest.raises(AggregationError):
        federation.fedavg([], [])


def test_fedavg_equal_weights_is_mean():
    rng = np.random.default_rng(2)
    ups = [nn.init_params(4, 5, 3, rng) for _ in range(5)]
    agg = federation.fedavg(ups, np.ones(5))
    mean = np.mean([u.to_vector() for u in ups], axis=0)
    assert np.max(np.abs(agg.to_vector() - mean)) <= 1e-12


def test_select_peers():
    cfg = small_cfg(peers=10, fraction=0.3)
    s = federation.select_peers(cfg, 4)
    assert len(s) == 3 and s == sorted(s) and s == federation.select_peers(cfg, 4)
    assert len(federation.select_peers(small_cfg(peers=10, fraction=0.01), 0)) == 1


def test_fedavg_no_attack_excludes_nobody():
    res = federation.run_experiment(small_cfg(defense="fedavg", ratio=0.0))
    assert len(res.reports) == 3
    assert all(r.excluded == [] for r in res.reports)


def test_single_peer_round_takes_its_update():
    cfg = small_cfg(peers=1, rounds=1, defense="ours")
    fed = federation.setup(cfg)
    state = federation.run_round(fed, fed.initial, 0)
    assert np.array_equal(state.next_params.to_vector(), state.updates[0].to_vector())


def test_ours_never_excludes_everyone_without_attack():
    res = federation.run_experiment(small_cfg(defense="ours", rounds=4, peers=10))
    for r in res.reports:
        assert len(r.excluded) < len(r.selected)


@pytest.mark.parametrize("name", ["median", "rmedian", "tmean", "mkrum", "fgold", "ours"])
def test_every_defense_runs_and_stays_finite(name):
    res = federation.run_experiment(small_cfg(defense=name, ratio=0.25))
    assert res.final.is_finite()
    assert len(res.reports) == 3
    for r in res.reports:
        assert set(r.excluded) <= set(r.selected)


def test_threads_do_not_change_results():
    cfg = small_cfg(defense="ours", ratio=0.25)
    a = federation.run_experiment(cfg, threads=1)
    b = federation.run_experiment(cfg, threads=4)
    assert reports.rounds_jsonl(a) == reports.rounds_jsonl(b)


def test_golden_five_round_run():
    cfg = ExperimentConfig(dataset="synth", synth_n=600, synth_dim=8, peers=10, rounds=5, hidden=8,
                           ratio=0.3, defense="ours", seed=3)
    text = reports.rounds_jsonl(federation.run_experiment(cfg))
    assert text == (GOLDEN / "synth_5round_ours.jsonl").read_text()


def test_manual_attackers_and_extreme_setup():
    cfg = small_cfg(regime="extreme", peers=10, classes=10, synth_n=500, attackers=(0, 1))
    fed = federation.setup(cfg)
    assert fed.attack.attacker_ids == frozenset({0, 1})
    assert all(len(inv) == 1 for inv in fed.plan.inventories)


def test_feature_dump_rows():
    res = federation.run_experiment(small_cfg(defense="ours", ratio=0.25, dump_features=True, rounds=2))
    assert len(res.feature_rows) == 2 * 8
    row = res.feature_rows[0]
    assert {"peer", "attacker", "cluster", "flagged", "pc1", "pc2", "features"} <= set(row)
