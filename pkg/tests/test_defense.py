import numpy as np
import pytest

from fixtures import extreme_gradients, jittered_rows, planted_mild
from lfshield import defense
from lfshield.errors import ContractError


def olg_from_magnitudes(mags, hidden=1):
    """Gradients whose neuron i of peer k has norm mags[k][i] (all mass on weight 0)."""
    mags = np.asarray(mags, dtype=np.float64)
    olg = np.zeros(mags.shape + (hidden + 1,))
    olg[:, :, 0] = mags
    return olg


def test_magnitudes_include_bias():
    olg = np.zeros((1, 2, 3))
    olg[0, 0] = [3.0, 0.0, 4.0]
    mag = defense.neuron_magnitudes(olg)
    assert mag.per_peer[0].tolist() == [5.0, 0.0]


def test_magnitude_examples():
    mag = defense.neuron_magnitudes(np.zeros((3, 4, 2)))
    assert not mag.aggregated.any()
    assert mag.top2 == (0, 1)
    mag = defense.neuron_magnitudes(olg_from_magnitudes([[1, 0], [0, 2]]))
    assert mag.aggregated.tolist() == [1, 2]
    assert mag.top2[0] == 1


@pytest.mark.parametrize(
    "agg,expected",
    [([5, 5, 1], (0, 1)), ([1, 2, 3], (2, 1)), ([0, 1, 0, 0, 0, 0, 0, 9, 0, 0], (7, 1))],
)
def test_identify_source_target(agg, expected):
    mag = defense.neuron_magnitudes(olg_from_magnitudes([agg]))
    assert defense.identify_source_target(mag) == expected


def olg_with_bias_signs(negatives_per_peer, classes=10):
    olg = np.full((len(negatives_per_peer), classes, 3), 0.1)
    for k, n in enumerate(negatives_per_peer):
        olg[k, :n, -1] = -0.2
    return olg


def test_mode_detection():
    assert defense.detect_distribution_mode(olg_with_bias_signs([1] * 5)) == "extreme"
    assert defense.detect_distribution_mode(olg_with_bias_signs([10] * 5)) == "mild"
    assert defense.detect_distribution_mode(olg_with_bias_signs([1, 1, 1, 8])) == "extreme"


def test_mild_features():
    olg = np.random.default_rng(0).normal(size=(3, 5, 5))
    f = defense.build_features_mild(olg, 2, 4)
    assert f.rows.shape == (3, 10)
    assert np.array_equal(f.rows[:, :5], olg[:, 2])
    swapped = defense.build_features_mild(olg, 4, 2)
    assert np.array_equal(swapped.rows, np.concatenate([f.rows[:, 5:], f.rows[:, :5]], axis=1))
    assert not defense.build_features_mild(np.zeros((2, 3, 5)), 0, 1).rows.any()


def test_extreme_feature_layouts():
    olg = np.random.default_rng(1).normal(size=(2, 4, 3))
    top2 = np.array([[2, 0], [1, 3]])
    ranked = defense.build_features_extreme(olg, top2, "ranked").rows
    assert np.array_equal(ranked[1], np.concatenate([olg[1, 1], olg[1, 3]]))
    anchored = defense.build_features_extreme(olg, top2).rows
    assert anchored.shape == (2, 4 * 3 + 3)
    block = anchored[0, :12].reshape(4, 3)
    assert np.array_equal(block[2], olg[0, 2]) and not np.delete(block, 2, axis=0).any()
    assert np.array_equal(anchored[0, 12:], olg[0, 0])
    masked = defense.build_features_extreme(olg, top2, "masked").rows.reshape(2, 4, 3)
    assert np.array_equal(masked[1, [1, 3]], olg[1, [1, 3]]) and not masked[1, [0, 2]].any()
    with pytest.raises(ContractError):
        defense.build_features_extreme(olg, top2, "other")


def test_inverse_density_examples():
    assert defense.cluster_inverse_density([[1, 0], [0, 1]]) == pytest.approx(90)
    assert defense.cluster_inverse_density([[1, 0], [2, 0], [3, 0]]) == pytest.approx(0)
    assert defense.cluster_inverse_density([[1, 0], [0, 1], [-1, 0]]) == pytest.approx(150)
    assert defense.cluster_inverse_density([[4, 2]]) == 0.0


def test_inverse_density_scale_invariant():
    rows = np.random.default_rng(2).normal(size=(5, 3))
    scaled = rows * np.array([[0.1], [3], [7], [1], [2]])
    assert defense.cluster_inverse_density(scaled) == pytest.approx(defense.cluster_inverse_density(rows))


def test_filter_mild_planted_fixture():
    rng = np.random.default_rng(0)
    u = rng.normal(size=8)
    honest = jittered_rows(u, 14, 25.0, rng)
    bad = jittered_rows(-u, 6, 5.0, rng)
    verdict = defense.filter_mild(np.concatenate([honest, bad]), seed=0)
    assert verdict.bad == frozenset(range(14, 20))


def test_filter_mild_denser_wins_at_equal_size():
    rng = np.random.default_rng(1)
    u = rng.normal(size=8)
    rows = np.concatenate([jittered_rows(u, 10, 20.0, rng), jittered_rows(-u, 10, 4.0, rng)])
    assert defense.filter_mild(rows, seed=1).bad == frozenset(range(10, 20))


def test_filter_mild_mirror_tie_is_deterministic():
    rows = np.array([[1.0, 0.1], [1.0, -0.1], [-1.0, 0.1], [-1.0, -0.1]])
    a = defense.filter_mild(rows, seed=3)
    b = defense.filter_mild(rows, seed=3)
    assert a.bad == b.bad
    assert a.bad in (frozenset({0, 1}), frozenset({2, 3}))
    # equal scores: the cluster holding peer 0 is the one returned
    assert 0 in a.bad


def test_filter_mild_identical_rows():
    assert defense.filter_mild(np.ones((4, 3)), seed=0).bad == frozenset()
    with pytest.raises(ContractError):
        defense.filter_mild(np.ones((1, 3)))


def test_filter_mild_permutation_invariant():
    rng = np.random.default_rng(5)
    rows, bad = planted_mild(20, 5, rng)
    perm = rng.permutation(20)
    out = defense.filter_mild(rows[perm], seed=2).bad
    assert frozenset(int(perm[i]) for i in out) == bad


@pytest.mark.parametrize("seed", range(5))
def test_filter_extreme_fixture(seed):
    olg, attackers = extreme_gradients(np.random.default_rng(seed))
    assert len(attackers) == 4
    assert defense.filter_extreme(olg).bad == attackers


def test_filter_extreme_single_attacker_is_outlier():
    olg, attackers = extreme_gradients(np.random.default_rng(9), n_attackers=1)
    verdict = defense.filter_extreme(olg)
    assert verdict.bad == attackers
    (a,) = attackers
    assert verdict.labels[a] == -1


def test_filter_extreme_no_attack():
    olg, attackers = extreme_gradients(np.random.default_rng(4), n_attackers=0)
    assert attackers == frozenset()
    assert defense.filter_extreme(olg).bad == frozenset()


def test_filter_extreme_needs_three_peers():
    with pytest.raises(ContractError):
        defense.filter_extreme(np.zeros((2, 3, 4)))


def test_filter_extreme_never_flags_unique_peak_cluster():
    olg, _ = extreme_gradients(np.random.default_rng(11), n_attackers=3)
    verdict = defense.filter_extreme(olg)
    peaks = {}
    for c in set(verdict.labels.tolist()) - {-1}:
        members = np.flatnonzero(verdict.labels == c)
        peaks[c] = int(np.argmax(np.linalg.norm(olg[members].mean(axis=0), axis=1)))
    for c, peak in peaks.items():
        if list(peaks.values()).count(peak) == 1:
            members = set(np.flatnonzero(verdict.labels == c).tolist())
            assert not members & verdict.bad


def test_defend_dispatch():
    olg, attackers = extreme_gradients(np.random.default_rng(0))
    out = defense.defend(olg)
    assert out.mode == "extreme" and out.bad == attackers
    forced = defense.defend(olg, mode="mild", seed=0)
    assert forced.mode == "mild"
    with pytest.raises(ContractError):
        defense.defend(olg, mode="sideways")
