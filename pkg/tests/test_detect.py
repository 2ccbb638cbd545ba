import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chainlens.detect import (BEHAVIOR_CHANGER, EPSILON_GRID, PERSISTENT_SUSPECT, STABLE_BENIGN,
                              SegmentOutcome, aggregate, behavior_report, detect_segment,
                              epsilon_sweep, flag_suspects, kmeans, malicious_probability,
                              select_malicious_cluster, zscore_normalize)
from chainlens.errors import DetectError
from chainlens.features import FeatureMatrix
from oracles import brute_flags, random_cosine_fixture as random_fixture


def fm(values, entities=None):
    values = np.asarray(values, dtype=float)
    ents = list(range(len(values))) if entities is None else entities
    return FeatureMatrix([f"c{j}" for j in range(values.shape[1])], ents, values)


def test_zscore_examples():
    z, mean, std, flagged = zscore_normalize(fm([[1, 5], [3, 5]]))
    assert z.values[:, 0].tolist() == [-1.0, 1.0]
    assert z.values[:, 1].tolist() == [0.0, 0.0] and flagged == ["c1"]
    with pytest.raises(DetectError):
        zscore_normalize(fm([[1, 2]]))


def test_zscore_random_means():
    X = np.random.default_rng(1).normal(3, 7, size=(200, 6))
    z = zscore_normalize(fm(X))[0].values
    assert np.all(np.abs(z.mean(axis=0)) <= 1e-12)
    assert np.allclose(z.std(axis=0), 1.0, atol=1e-12)


def test_kmeans_two_blobs():
    r = np.random.default_rng(2)
    X = np.vstack([r.normal(0, 0.1, (10, 2)), r.normal(10, 0.1, (10, 2))])
    a = kmeans(X, 2, seed=5)
    truth = [0] * 10 + [1] * 10
    # exhaustive check: the labelling equals the blob labelling under one of the 2 permutations
    assert any([p[t] for t in truth] == a.labels.tolist() for p in itertools.permutations(range(2)))


def test_kmeans_k1_centroid_is_mean():
    X = np.random.default_rng(3).normal(size=(30, 4))
    a = kmeans(X, 1, seed=0)
    assert np.allclose(a.centroids[0], X.mean(axis=0), atol=1e-12)
    assert set(a.labels.tolist()) == {0}


def test_kmeans_k_equals_distinct_rows():
    X = np.array([[0, 0], [1, 1], [5, 5], [0, 0], [5, 5]], dtype=float)
    assert kmeans(X, 3, seed=1).inertia == 0.0


def test_kmeans_rows_fewer_than_k():
    with pytest.raises(DetectError, match="K <= 3"):
        kmeans(np.zeros((3, 2)), 4)


def test_kmeans_deterministic_and_monotone():
    X = np.random.default_rng(4).normal(size=(300, 6))
    a, b = kmeans(X, 10, seed=42), kmeans(X, 10, seed=42)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.centroids, b.centroids)
    h = a.inertia_history
    assert all(y <= x + 1e-9 for x, y in zip(h, h[1:]))
    assert np.all(np.isfinite(a.centroids))


def test_kmeans_n_init_not_worse():
    X = np.random.default_rng(5).normal(size=(200, 4))
    single = kmeans(X, 8, seed=np.random.SeedSequence(9))
    multi = kmeans(X, 8, seed=np.random.SeedSequence(9), n_init=5)
    assert multi.inertia <= single.inertia + 1e-9 or multi.inertia <= min(
        kmeans(X, 8, seed=c).inertia for c in np.random.SeedSequence(9).spawn(5)) + 1e-9


def test_kmeans_reseeds_empty_cluster():
    X = np.array([[0.0, 0.0]] * 8 + [[1.0, 0.0], [100.0, 0.0]])
    a = kmeans(X, 3, seed=0)
    assert len(set(a.labels.tolist())) == 3


def test_select_examples():
    labels = np.array([1, 1, 1, 1, 1, 2, 2, 0])
    mal = np.array([1, 1, 1, 1, 1, 1, 1, 0], dtype=bool)
    assert select_malicious_cluster(labels, mal, 3) == 1
    assert select_malicious_cluster(np.array([0, 0, 0, 1, 1, 1]), np.ones(6, bool), 2) == 0
    assert select_malicious_cluster(labels, np.zeros(8, bool), 3) is None


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=1, max_size=40),
       st.permutations(range(5)))
def test_select_relabel_invariant(rows, perm):
    labels = np.array([r[0] for r in rows])
    mal = np.array([r[1] for r in rows])
    c = select_malicious_cluster(labels, mal, 5)
    relabeled = np.array([perm[x] for x in labels])
    c2 = select_malicious_cluster(relabeled, mal, 5)
    if c is None:
        assert c2 is None
        return
    counts = np.bincount(labels[mal], minlength=5)
    if (counts == counts.max()).sum() == 1:
        assert c2 == perm[c]
    else:
        assert counts[perm.index(c2)] == counts.max()


def test_flag_examples():
    X = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 5.0], [-2.0, 1.0], [-1.0, -1.0]])
    labels = np.zeros(5, int)
    mal = np.array([True, False, False, False, False])
    for eps in EPSILON_GRID:
        assert 1 in flag_suspects(X, labels, 0, mal, eps)
    # row 3 is orthogonal to the malicious row
    assert 3 not in flag_suspects(X, labels, 0, mal, 1)
    # eps = 0: every row with non-negative cosine, the orthogonal one included
    assert flag_suspects(X, labels, 0, mal, 0) == {1, 2, 3}
    with pytest.raises(ValueError):
        flag_suspects(X, labels, 0, mal, 21)


def test_flag_excludes_zero_rows(caplog):
    X = np.array([[1.0, 0.0], [0.0, 0.0], [2.0, 0.0]])
    got = flag_suspects(X, np.zeros(3, int), 0, np.array([True, False, False]), 12)
    assert got == {2}
    assert "zero-vector" in caplog.text


def test_flag_only_within_chosen_cluster():
    X = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    labels = np.array([0, 0, 1])
    assert flag_suspects(X, labels, 0, np.array([True, False, False]), 20) == {1}


@pytest.mark.parametrize("seed", range(10))
def test_flags_equal_brute_force(seed):
    X, labels, mal = random_fixture(seed)
    chosen = int(labels[0])
    for eps in EPSILON_GRID:
        assert flag_suspects(X, labels, chosen, mal, eps) == brute_flags(X, labels, chosen, mal, eps)


@pytest.mark.parametrize("seed", range(5))
def test_sweep_equals_brute_force(seed):
    X, labels, mal = random_fixture(100 + seed)
    chosen = int(labels[0])
    sw = epsilon_sweep(X, labels, chosen, mal)
    assert sw.counts == [len(brute_flags(X, labels, chosen, mal, e)) for e in EPSILON_GRID]
    assert all(a >= b for a, b in zip(sw.counts, sw.counts[1:]))
    assert sw.counts[-1] >= 1


def test_probability_examples():
    p = malicious_probability({1: {0}, 2: {0, 1, 2, 3}}, {1: {0, 1, 2, 3}, 2: {0, 1, 2, 3}, 3: {1}})
    assert p == {1: Fraction(1, 4), 2: Fraction(1), 3: Fraction(0)}
    with pytest.raises(DetectError):
        malicious_probability({9: {0}}, {1: {0}})
    with pytest.raises(DetectError):
        malicious_probability({1: {5}}, {1: {0}})


def test_behavior_report_examples():
    rep = behavior_report({"g": {"a": Fraction(0), "b": Fraction(1, 2), "c": Fraction(1)}})
    assert rep.members("g", STABLE_BENIGN) == {"a"}
    assert rep.members("g", BEHAVIOR_CHANGER) == {"b"}
    assert rep.members("g", PERSISTENT_SUSPECT) == {"c"}
    assert rep.band("g") == {"b"}
    empty = behavior_report({})
    assert empty.classes == {} and empty.persistent_intersection() == set()


def test_detect_segment_skip_without_malicious():
    m = fm(np.random.default_rng(0).normal(size=(30, 3)))
    out = detect_segment(m, set(), k=3)
    assert out.skipped and "malicious" in out.skip_reason
    small = detect_segment(fm(np.ones((2, 3))), {0}, k=3)
    assert small.skipped


def test_detect_segment_deterministic():
    r = np.random.default_rng(1)
    m = fm(r.normal(size=(80, 4)), list(range(100, 180)))
    mal = {100, 105, 110}
    a = detect_segment(m, mal, k=5, seed=3, epsilon=0)
    b = detect_segment(m, mal, k=5, seed=3, epsilon=0)
    assert a.flagged == b.flagged and a.chosen == b.chosen
    assert a.detected_malicious <= mal


def test_aggregate_ignores_skipped():
    outs = [SegmentOutcome(0, "s0", [1, 2], chosen=0, flagged={1}),
            SegmentOutcome(1, "s1", [1, 2], skip_reason="collapse"),
            SegmentOutcome(2, "s2", [1], chosen=0)]
    p, tally = aggregate(outs, set())
    assert p == {1: Fraction(1, 2), 2: Fraction(0)}
    assert tally == {1: (1, 2), 2: (0, 1)}


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 19))
def test_epsilon_monotone_subsets(seed, e1):
    X, labels, mal = random_fixture(seed, n=40)
    chosen = int(labels[0])
    assert flag_suspects(X, labels, chosen, mal, e1 + 1) <= flag_suspects(X, labels, chosen, mal, e1)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.integers(0, 30), st.sets(st.integers(0, 11), min_size=1), min_size=1),
       st.integers(0, 2 ** 32 - 1))
def test_probability_bounds(activity, seed):
    r = np.random.default_rng(seed)
    flags = {k: {s for s in v if r.random() < 0.5} for k, v in activity.items()}
    p = malicious_probability(flags, activity)
    for k, v in p.items():
        assert 0 <= v <= 1
        assert (v * len(activity[k])).denominator == 1
