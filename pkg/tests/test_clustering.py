"""
Unit tests for the clustering module.
"""

import math
import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))
from clustering import (
    ClusteringError, InvariantViolationError, SimilarityGraph, adjusted_rand_index, build_similarity,
    eigengap_is_ambiguous, excess_risk_bound, graph_laplacian, kmeans, knn_bandwidth, median_bandwidth,
    random_cluster_assignment, ratiocut_objective, ratiocut_quadratic_form, select_num_clusters,
    silhouette_score, smallest_eigenpairs, spectral_cluster,
)
from dirichlet_data import ConcentrationVector


def three_blobs(per_blob: int = 10, seed: int = 0) -> tuple:
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    points = np.vstack([c + 0.1 * rng.standard_normal((per_blob, 2)) for c in centers])
    truth = np.repeat(np.arange(3), per_blob)
    return points, truth


def alpha_mixture(centers, per_group: int = 10, seed: int = 0, noise: float = 0.1) -> tuple:
    """Concentration vectors scattered around the given centers."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    points = np.vstack([c + noise * rng.standard_normal((per_group, centers.shape[1])) for c in centers])
    truth = np.repeat(np.arange(len(centers)), per_group)
    return np.clip(points, 1e-3, None), truth


THREE_CENTERS = [[5.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 5.0]]


class TestSimilarityGraph(unittest.TestCase):
    """Test graph construction and the Laplacian."""

    def test_weights_and_laplacian(self):
        points = [[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]
        graph = build_similarity(points, bandwidth=1.0)
        self.assertAlmostEqual(graph.weights[0, 1], math.exp(-0.5))
        self.assertAlmostEqual(graph.weights[0, 2], math.exp(-2.0))
        np.testing.assert_array_equal(np.diag(graph.weights), np.zeros(3))
        laplacian = graph_laplacian(graph)
        np.testing.assert_allclose(laplacian.sum(axis=1), np.zeros(3), atol=1e-12)
        self.assertGreaterEqual(np.linalg.eigvalsh(laplacian).min(), -1e-10)

    def test_accepts_concentration_vectors(self):
        points = [ConcentrationVector(np.array([1.0, 2.0])), ConcentrationVector(np.array([2.0, 1.0]))]
        self.assertEqual(build_similarity(points, 1.0).num_nodes, 2)

    def test_invalid_inputs(self):
        with self.assertRaises(ClusteringError):
            build_similarity([[0.0, 1.0]], bandwidth=1.0)
        with self.assertRaises(ClusteringError):
            build_similarity([[0.0], [1.0]], bandwidth=0.0)
        with self.assertRaises(ClusteringError):
            build_similarity([[0.0], [1.0, 2.0]], bandwidth=1.0)

    def test_asymmetric_weights_rejected(self):
        with self.assertRaises(InvariantViolationError):
            SimilarityGraph.from_weights(np.array([[0.0, 1.0], [0.5, 0.0]]))

    def test_bandwidth_rules(self):
        points = np.array([[0.0], [1.0], [3.0]])
        self.assertAlmostEqual(median_bandwidth(points), 2.0)
        self.assertAlmostEqual(knn_bandwidth(points, k=1), 1.0)
        self.assertEqual(median_bandwidth(np.zeros((3, 2))), 1.0)


class TestEigengap(unittest.TestCase):
    """Test cluster-count selection."""

    def test_largest_gap(self):
        self.assertEqual(select_num_clusters([0.0, 0.0, 0.0, 2.0, 2.1], 1, 4), 3)

    def test_tie_goes_to_smaller(self):
        self.assertEqual(select_num_clusters([0.0, 1.0, 2.0, 3.0], 1, 3), 1)

    def test_window_validation(self):
        with self.assertRaises(ClusteringError):
            select_num_clusters([0.0, 1.0, 2.0], 2, 3)

    def test_ambiguity(self):
        self.assertTrue(eigengap_is_ambiguous([0.0, 1.0, 1.95, 3.0], 1, 3))
        self.assertFalse(eigengap_is_ambiguous([0.0, 0.0, 0.0, 2.0, 2.1], 1, 4))


class TestRatioCut(unittest.TestCase):
    """Test the two RatioCut forms agree."""

    def test_pairwise_and_quadratic_forms_match(self):
        rng = np.random.default_rng(4)
        points = rng.uniform(0, 3, size=(12, 4))
        graph = build_similarity(points, knn_bandwidth(points))
        for z in (1, 2, 4):
            embedding = smallest_eigenpairs(graph_laplacian(graph), z)
            self.assertAlmostEqual(ratiocut_objective(graph, embedding),
                                   ratiocut_quadratic_form(graph, embedding), places=10)

    def test_non_orthonormal_embedding(self):
        graph = build_similarity([[0.0], [1.0], [2.0]], 1.0)
        embedding = smallest_eigenpairs(graph_laplacian(graph), 2)
        embedding.vectors = embedding.vectors * 2.0
        with self.assertRaises(InvariantViolationError):
            ratiocut_objective(graph, embedding)


class TestSpectralCluster(unittest.TestCase):
    """Test end-to-end spectral clustering."""

    def test_recovers_blobs(self):
        points, truth = three_blobs()
        assignment = spectral_cluster(points, rng_seed=1)
        self.assertEqual(assignment.num_clusters, 3)
        self.assertAlmostEqual(adjusted_rand_index(truth, assignment.labels), 1.0)
        self.assertEqual(set(assignment.labels.tolist()), {1, 2, 3})

    def test_mixture_recovered_over_seeds(self):
        for seed in range(50):
            points, truth = alpha_mixture(THREE_CENTERS, seed=seed)
            assignment = spectral_cluster(points, rng_seed=seed)
            self.assertGreaterEqual(adjusted_rand_index(truth, assignment.labels), 0.9, f"seed {seed}")

    def test_eigengap_finds_true_cluster_count(self):
        for centers, expected in ((THREE_CENTERS, 3), (THREE_CENTERS[:2], 2)):
            hits = 0
            for seed in range(100):
                points, _ = alpha_mixture(centers, seed=seed)
                if spectral_cluster(points, rng_seed=seed).num_clusters == expected:
                    hits += 1
            self.assertGreaterEqual(hits, 95, f"Z={expected}")

    def test_input_order_does_not_matter(self):
        points, _ = alpha_mixture(THREE_CENTERS, seed=4)
        order = np.random.default_rng(8).permutation(len(points))
        original = spectral_cluster(points, rng_seed=3)
        shuffled = spectral_cluster(points[order], rng_seed=3)
        self.assertEqual(original.num_clusters, shuffled.num_clusters)
        self.assertAlmostEqual(adjusted_rand_index(original.labels[order], shuffled.labels), 1.0)

    def test_deterministic(self):
        points, _ = three_blobs(seed=2)
        a = spectral_cluster(points, z_override=3, rng_seed=5)
        b = spectral_cluster(points, z_override=3, rng_seed=5)
        np.testing.assert_array_equal(a.labels, b.labels)
        self.assertEqual(a.method, 'override')

    def test_identical_points_are_degenerate(self):
        with self.assertLogs(level='WARNING'):
            assignment = spectral_cluster(np.ones((5, 3)))
        self.assertTrue(assignment.degenerate)
        self.assertEqual(assignment.num_clusters, 1)
        np.testing.assert_array_equal(assignment.labels, np.ones(5))

    def test_bad_override(self):
        points, _ = three_blobs(per_blob=2)
        with self.assertRaises(ClusteringError):
            spectral_cluster(points, z_override=7)

    def test_members(self):
        points, _ = three_blobs(per_blob=3)
        assignment = spectral_cluster(points, z_override=3, rng_seed=0)
        members = sorted(u for z in range(1, 4) for u in assignment.members(z))
        self.assertEqual(members, list(range(9)))


class TestKMeansAndScores(unittest.TestCase):
    """Test kmeans, silhouette and ARI helpers."""

    def test_kmeans_restarts_never_worse(self):
        points, _ = three_blobs(seed=3)
        one = kmeans(points, 3, rng_seed=9, restarts=1)
        many = kmeans(points, 3, rng_seed=9, restarts=8)
        self.assertLessEqual(many.wcss, one.wcss + 1e-12)

    def test_silhouette_bounds(self):
        points, truth = three_blobs()
        self.assertGreater(silhouette_score(points, truth), 0.9)
        self.assertEqual(silhouette_score(points, np.zeros(len(truth))), 0.0)

    def test_ari_label_permutation(self):
        self.assertAlmostEqual(adjusted_rand_index([0, 0, 1, 1], [5, 5, 2, 2]), 1.0)

    def test_random_assignment_is_balanced(self):
        assignment = random_cluster_assignment(10, 3, rng_seed=1)
        self.assertEqual(sorted(np.bincount(assignment.labels)[1:].tolist()), [3, 3, 4])
        with self.assertRaises(ClusteringError):
            random_cluster_assignment(2, 3, rng_seed=1)

    def test_excess_risk_bound(self):
        expected = 2 * 2 * math.sqrt(2) * 1.0 * math.sqrt(math.log(2 / 0.05)) / math.sqrt(100)
        self.assertAlmostEqual(excess_risk_bound(2, 100, kappa_s=1.0, delta=0.05), expected)
        self.assertLess(excess_risk_bound(2, 400, 1.0, 0.05), excess_risk_bound(2, 100, 1.0, 0.05))
        with self.assertRaises(ClusteringError):
            excess_risk_bound(0, 10)


if __name__ == '__main__':
    unittest.main()
