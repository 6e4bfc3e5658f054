"""Exact graph statistics against brute-force oracles, plus MMD."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from connectome_codec import stats
from connectome_codec.data import pad_subgraph
from connectome_codec.errors import InsufficientSamples
from oracles import (
    oracle_clustering,
    oracle_edge_count,
    oracle_mmd,
    oracle_orbit_counts,
    oracle_reciprocity,
    oracle_total_betweenness,
)


def random_digraph(n, p, seed):
    rng = np.random.default_rng(seed)
    A = (rng.random((n, n)) < p).astype(np.int64)
    np.fill_diagonal(A, 0)
    return A


adjacency_strategy = st.builds(
    random_digraph,
    n=st.integers(min_value=1, max_value=7),
    p=st.floats(min_value=0.0, max_value=0.9),
    seed=st.integers(min_value=0, max_value=2**31),
)


class TestEdgeCount:
    def test_zero_matrix(self):
        assert stats.edge_count(np.zeros((5, 5), dtype=np.int64)) == 0

    def test_complete_directed_3(self):
        A = 1 - np.eye(3, dtype=np.int64)
        assert stats.edge_count(A) == 6

    def test_random_100_matches_recount(self):
        A = random_digraph(100, 0.1, seed=0)
        assert stats.edge_count(A) == oracle_edge_count(A.tolist())


class TestReciprocity:
    def test_one_pair_one_oneway(self):
        # edges {0->1, 1->0, 0->2}: one mutual pair over one one-way edge
        A = np.array([[0, 1, 1], [1, 0, 0], [0, 0, 0]], dtype=np.int64)
        assert stats.reciprocity(A) == 1000.0

    def test_no_reciprocal_pair(self):
        A = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], dtype=np.int64)
        assert stats.reciprocity(A) == 0.0

    def test_fully_reciprocal_undefined(self):
        A = np.array([[0, 1], [1, 0]], dtype=np.int64)
        assert stats.reciprocity(A) is None

    def test_empty_undefined(self):
        assert stats.reciprocity(np.zeros((4, 4), dtype=np.int64)) is None

    @given(adjacency_strategy)
    def test_matches_oracle(self, A):
        got = stats.reciprocity(A)
        want = oracle_reciprocity(A.tolist())
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(want, rel=1e-12)


class TestBetweenness:
    def test_path_three_nodes(self):
        A = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], dtype=np.int64)
        assert stats.total_betweenness(A) == pytest.approx(50.0)

    def test_no_edges(self):
        assert stats.total_betweenness(np.zeros((10, 10), dtype=np.int64)) == 0.0

    def test_below_three_nodes(self):
        assert stats.total_betweenness(np.array([[0, 1], [0, 0]])) == 0.0

    def test_random_20_matches_bfs_oracle(self):
        A = random_digraph(20, 0.15, seed=4)
        want = oracle_total_betweenness(A.tolist())
        assert stats.total_betweenness(A) == pytest.approx(want, rel=1e-9)

    @given(adjacency_strategy)
    def test_matches_oracle(self, A):
        want = oracle_total_betweenness(A.tolist())
        assert stats.total_betweenness(A) == pytest.approx(want, rel=1e-9, abs=1e-12)


class TestNonNeuronal:
    def test_full_padding(self):
        assert stats.non_neuronal_count(np.full(100, 4)) == 10000.0

    def test_no_padding(self):
        assert stats.non_neuronal_count(np.zeros(100, dtype=np.int64)) == 0.0

    def test_19_padding(self):
        labels = np.array([1] * 81 + [4] * 19)
        assert stats.non_neuronal_count(labels) == 1900.0


class TestFeatureVector:
    def test_all_padding_sample(self):
        s = pad_subgraph([], [])
        fv = stats.feature_vector(s)
        assert fv.edge_count == 0
        assert fv.reciprocity_scaled is None
        assert fv.betweenness_scaled == 0.0
        assert fv.non_neuronal_scaled == 10000.0

    def test_three_node_example(self):
        # real nodes 0..2 with edges {0->1, 1->0, 0->2}, 97 padding nodes.
        # Betweenness frozen from the BFS path-composition oracle: the
        # single interior-node shortest path (1 -> 0 -> 2) gives node 0
        # raw score 1, so the total is 100/9702.
        s = pad_subgraph([1, 1, 1], [(0, 1), (1, 0), (0, 2)])
        fv = stats.feature_vector(s)
        assert fv.edge_count == 3
        assert fv.reciprocity_scaled == 1000.0
        assert fv.betweenness_scaled == pytest.approx(0.01030715316429602, rel=1e-12)
        assert fv.non_neuronal_scaled == 9700.0

    def test_composition_matches_parts(self):
        s = pad_subgraph([0, 1, 2, 3] * 20 + [0], [(i, i + 1) for i in range(80)])
        fv = stats.feature_vector(s)
        assert fv.edge_count == stats.edge_count(s.adjacency)
        assert fv.betweenness_scaled == stats.total_betweenness(s.adjacency)
        assert fv.non_neuronal_scaled == stats.non_neuronal_count(s.labels)


class TestDegreeHistogram:
    def test_zero_matrix(self):
        for mode in ("in", "out", "total"):
            h = stats.degree_histogram(np.zeros((6, 6), dtype=np.int64), mode)
            assert h[0] == 6 and h.sum() == 6

    def test_complete_3_out(self):
        A = 1 - np.eye(3, dtype=np.int64)
        h = stats.degree_histogram(A, "out")
        assert h[2] == 3

    def test_total_is_in_plus_out(self):
        A = random_digraph(15, 0.3, seed=8)
        total = A.sum(axis=0) + A.sum(axis=1)
        h = stats.degree_histogram(A, "total")
        assert np.array_equal(h, np.bincount(total, minlength=29))


class TestClustering:
    def test_triangle(self):
        A = np.array([[0, 1, 1], [0, 0, 1], [0, 0, 0]], dtype=np.int64)  # symmetrizes to K3
        assert np.allclose(stats.clustering_values(A), 1.0)

    def test_star_center_zero(self):
        A = np.zeros((4, 4), dtype=np.int64)
        A[0, 1:] = 1
        cv = stats.clustering_values(A)
        assert cv[0] == 0.0

    def test_random_15_matches_triple_loop(self):
        A = random_digraph(15, 0.3, seed=2)
        assert np.allclose(stats.clustering_values(A), oracle_clustering(A.tolist()), atol=1e-12)

    @given(adjacency_strategy)
    def test_matches_oracle(self, A):
        assert np.allclose(stats.clustering_values(A), oracle_clustering(A.tolist()), atol=1e-12)


class TestOrbits:
    def test_orbit0_is_degree(self):
        A = random_digraph(10, 0.3, seed=5)
        S = ((A + A.T) > 0).astype(np.int64)
        np.fill_diagonal(S, 0)
        counts = stats.orbit_counts(A)
        assert np.array_equal(counts[:, 0], S.sum(axis=1))

    def test_triangle_once(self):
        A = np.array([[0, 1, 1], [0, 0, 1], [0, 0, 0]], dtype=np.int64)
        counts = stats.orbit_counts(A)
        assert np.array_equal(counts[:, 3], [1, 1, 1])

    def test_random_12_matches_isomorphism_oracle(self):
        A = random_digraph(12, 0.3, seed=6)
        assert np.array_equal(stats.orbit_counts(A), oracle_orbit_counts(A.tolist()))

    @given(adjacency_strategy)
    @settings(max_examples=15)
    def test_matches_oracle(self, A):
        assert np.array_equal(stats.orbit_counts(A), oracle_orbit_counts(A.tolist()))


class TestPermutationCovariance:
    @given(adjacency_strategy, st.integers(min_value=0, max_value=2**31))
    def test_scalars_invariant_pernode_permuted(self, A, seed):
        perm = np.random.default_rng(seed).permutation(A.shape[0])
        B = A[np.ix_(perm, perm)]
        assert stats.edge_count(A) == stats.edge_count(B)
        ra, rb = stats.reciprocity(A), stats.reciprocity(B)
        assert (ra is None and rb is None) or ra == pytest.approx(rb, rel=1e-9)
        assert stats.total_betweenness(A) == pytest.approx(stats.total_betweenness(B), rel=1e-9, abs=1e-9)
        assert np.allclose(stats.clustering_values(A)[perm], stats.clustering_values(B), atol=1e-12)
        assert np.array_equal(stats.orbit_counts(A)[perm], stats.orbit_counts(B))


class TestMmd:
    def test_identical_sets_biased_zero(self):
        X = np.random.default_rng(0).normal(size=(12, 4))
        assert abs(stats.mmd(X, X.copy(), kernel_bandwidth=1.0)) < 1e-12

    def test_two_point_closed_form(self):
        a, sig = 1.3, 0.9
        closed = 2.0 - 2.0 * np.exp(-(a * a) / (2 * sig * sig))
        got = stats.mmd(np.array([[0.0], [0.0]]), np.array([[a], [a]]), kernel_bandwidth=sig)
        assert got == pytest.approx(closed, abs=1e-12)

    def test_sample_order_irrelevant(self):
        rng = np.random.default_rng(3)
        X, Y = rng.normal(size=(8, 3)), rng.normal(size=(9, 3))
        base = stats.mmd(X, Y, kernel_bandwidth=0.8)
        shuf = stats.mmd(X[::-1], Y[rng.permutation(9)], kernel_bandwidth=0.8)
        assert base == pytest.approx(shuf, abs=1e-12)

    def test_symmetry_in_arguments(self):
        rng = np.random.default_rng(4)
        X, Y = rng.normal(size=(7, 2)), rng.normal(size=(5, 2))
        for est in ("biased", "unbiased"):
            assert stats.mmd(X, Y, estimator=est) == pytest.approx(
                stats.mmd(Y, X, estimator=est), abs=1e-12)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(5)
        X, Y = rng.normal(size=(6, 3)), rng.normal(size=(7, 3))
        for est in ("biased", "unbiased"):
            want = oracle_mmd(X, Y, sigma=1.1, estimator=est)
            assert stats.mmd(X, Y, kernel_bandwidth=1.1, estimator=est) == pytest.approx(want, abs=1e-12)

    def test_unbiased_needs_two(self):
        with pytest.raises(InsufficientSamples):
            stats.mmd(np.ones((1, 2)), np.ones((3, 2)), estimator="unbiased")

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            stats.mmd(np.ones((3, 2)), np.ones((3, 4)))

    def test_median_bandwidth_pooled_and_symmetric(self):
        rng = np.random.default_rng(6)
        X, Y = rng.normal(size=(5, 2)), rng.normal(size=(6, 2)) + 2.0
        assert stats.median_heuristic_bandwidth(X, Y) == stats.median_heuristic_bandwidth(Y, X)
        assert stats.median_heuristic_bandwidth(X, X) > 0


class TestGenerationReport:
    def test_self_comparison_zero(self, shared_small_dataset):
        ref = shared_small_dataset.test + shared_small_dataset.validation
        rep = stats.generation_mmd_report(ref, ref)
        assert abs(rep.deg_mmd) < 1e-12
        assert abs(rep.clus_mmd) < 1e-12
        assert abs(rep.orbit_mmd) < 1e-12

    def test_empty_vs_dense_positive(self, shared_small_dataset):
        empty = [pad_subgraph([], []) for _ in range(4)]
        rep = stats.generation_mmd_report(empty, shared_small_dataset.train[:4])
        assert rep.deg_mmd > 0 and rep.clus_mmd > 0 and rep.orbit_mmd > 0

    def test_empty_list_raises(self, shared_small_dataset):
        with pytest.raises(InsufficientSamples):
            stats.generation_mmd_report([], shared_small_dataset.train[:2])
