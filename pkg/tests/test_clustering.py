import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcl.clustering import dump_clustering, kmeans, multi_cluster
from pcl.serialization import read_tensor_file

import oracles
from conftest import unit_rows


def _blobs(seed, k=4, per=30, d=6, spread=0.05):
    rng = np.random.default_rng(seed)
    centers = np.linalg.qr(rng.standard_normal((d, d)))[0][:k]
    x = np.repeat(centers, per, axis=0) + spread * rng.standard_normal((k * per, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True), np.repeat(np.arange(k), per)


def _check_invariants(c, n):
    np.testing.assert_allclose(np.linalg.norm(c.centroids, axis=1), 1.0, atol=1e-9)
    assert c.assignment.shape == (n,)
    assert c.member_count.sum() == n
    assert c.member_count.min() >= 1
    np.testing.assert_array_equal(np.bincount(c.assignment, minlength=c.k), c.member_count)


def test_antipodal_pairs_match_exhaustive_partition():
    x = np.array([[1.0, 0.0], [-1.0, 0.0], [0.6, 0.8], [-0.6, -0.8]])
    best, best_cost = oracles.best_partition(x, 2)
    c = kmeans(x, 2, seed=0)
    assert oracles.same_partition(c.assignment, best)
    assert c.cost == pytest.approx(best_cost, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_small_sets_reach_exhaustive_optimum_when_separated(seed):
    x, _ = _blobs(seed, k=3, per=2, d=3, spread=0.02)
    best, _ = oracles.best_partition(x, 3)
    assert oracles.same_partition(kmeans(x, 3, seed=seed).assignment, best)


def test_k_equals_n():
    x = unit_rows(np.random.default_rng(1), 7, 3)
    c = kmeans(x, 7)
    np.testing.assert_array_equal(c.member_count, np.ones(7))
    np.testing.assert_allclose(c.centroids[c.assignment], x, atol=1e-12)


def test_k_one_is_normalized_mean():
    x = unit_rows(np.random.default_rng(2), 20, 4)
    c = kmeans(x, 1)
    mean = x.mean(axis=0)
    np.testing.assert_allclose(c.centroids[0], mean / np.linalg.norm(mean), atol=1e-12)
    assert not c.assignment.any()


@pytest.mark.parametrize("k", [0, 6])
def test_invalid_k(k):
    with pytest.raises(ValueError):
        kmeans(unit_rows(np.random.default_rng(0), 5, 3), k)


def test_rejects_non_unit_rows():
    with pytest.raises(ValueError):
        kmeans(np.ones((4, 2)), 2)


def test_multi_cluster_contract():
    x = unit_rows(np.random.default_rng(3), 100, 5)
    out = multi_cluster(x, [2, 4, 8], seed=5)
    assert [c.k for c in out] == [2, 4, 8]
    for c in out:
        _check_invariants(c, 100)
    single = multi_cluster(x, [2], seed=5)[0]
    np.testing.assert_array_equal(single.assignment, kmeans(x, 2, seed=5).assignment)
    again = multi_cluster(x, [2, 4, 8], seed=5)
    for a, b in zip(out, again):
        assert a.centroids.tobytes() == b.centroids.tobytes()
        np.testing.assert_array_equal(a.assignment, b.assignment)


def test_multi_cluster_empty():
    with pytest.raises(ValueError):
        multi_cluster(unit_rows(np.random.default_rng(0), 5, 3), [])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(12, 60))
def test_invariants_and_monotone_cost(seed, k, n):
    x = unit_rows(np.random.default_rng(seed), n, 4)
    c = kmeans(x, k, seed=seed)
    _check_invariants(c, n)
    assert all(b <= a + 1e-9 * n for a, b in zip(c.cost_history, c.cost_history[1:]))


def test_duplicate_points_still_fill_every_cluster():
    x = np.repeat(np.eye(3), [8, 1, 1], axis=0)
    c = kmeans(x, 3)
    _check_invariants(c, 10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_row_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    x = unit_rows(rng, 50, 5)
    perm = rng.permutation(50)
    a = kmeans(x, 5, seed=9)
    b = kmeans(x[perm], 5, seed=9)
    np.testing.assert_array_equal(a.assignment[perm], b.assignment)
    # member sums are accumulated in row order, so centroids agree to rounding only
    np.testing.assert_allclose(a.centroids, b.centroids, atol=1e-12)


def test_recovers_separable_partition():
    hits = 0
    for seed in range(5):
        x, truth = _blobs(seed)
        hits += oracles.same_partition(kmeans(x, 4, seed=seed).assignment, truth)
    assert hits >= 4


def test_tie_goes_to_lowest_index():
    # the query sits exactly between two identical-cosine centroids
    x = np.array([[1.0, 0.0], [0.0, 1.0], [np.sqrt(0.5), np.sqrt(0.5)]])
    c = kmeans(x, 3)
    assert c.member_count.tolist() == [1, 1, 1]


def test_dump(tmp_path):
    x = unit_rows(np.random.default_rng(4), 6, 3)
    c = kmeans(x, 2)
    dump_clustering(tmp_path / "p", c)
    lines = (tmp_path / "p.txt").read_text().splitlines()
    assert lines == [f"{i},{a}" for i, a in enumerate(c.assignment)]
    np.testing.assert_array_equal(read_tensor_file(tmp_path / "p.pclt"), c.centroids)
