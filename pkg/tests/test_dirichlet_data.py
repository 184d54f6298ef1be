"""
Unit tests for the dirichlet_data module.

Tests label histograms, the MD likelihood and its gradient, the BFGS
concentration estimator and the Dirichlet partitioners.
"""

import math
import sys
import unittest
from pathlib import Path

from unittest.mock import patch

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))
from config import Config
from dirichlet_data import (
    ConcentrationVector, DirichletDataError, DomainError, LabelHistogram, PartitionSpec, ShapeError,
    UserDataset, block_group_alphas, digamma, estimate_concentration, log_gamma, md_log_likelihood,
    md_log_likelihood_grad, sample_dirichlet_partition, sample_grouped_partition, sample_multinomial_dirichlet,
    split_train_test,
)


class TestHistogramTypes(unittest.TestCase):
    """Test LabelHistogram, ConcentrationVector and PartitionSpec validation."""

    def test_histogram_from_labels(self):
        hist = LabelHistogram.from_labels([0, 2, 2, 1, 2], 4)
        np.testing.assert_array_equal(hist.counts, [1, 1, 3, 0])
        self.assertEqual(hist.total, 5)
        self.assertEqual(hist.num_classes, 4)

    def test_histogram_rejects_negative_counts(self):
        with self.assertRaises(DomainError):
            LabelHistogram.from_counts([3, -1])

    def test_histogram_rejects_wrong_total(self):
        with self.assertRaises(DomainError):
            LabelHistogram(counts=np.array([1, 2]), total=4)

    def test_histogram_rejects_out_of_range_labels(self):
        with self.assertRaises(DomainError):
            LabelHistogram.from_labels([0, 3], 3)

    def test_concentration_sum(self):
        alpha = ConcentrationVector(np.array([1.0, 2.0, 3.0]))
        self.assertEqual(alpha.alpha0, 6.0)
        np.testing.assert_allclose(alpha.normalized(), [1 / 6, 1 / 3, 1 / 2])

    def test_concentration_rejects_non_positive(self):
        with self.assertRaises(DomainError):
            ConcentrationVector(np.array([1.0, 0.0]))

    def test_partition_spec_length_mismatch(self):
        with self.assertRaises(ShapeError):
            PartitionSpec(num_users=3, num_classes=2, concentration=1.0, samples_per_user=(10, 10))

    def test_domain_errors_are_value_errors(self):
        with self.assertRaises(ValueError):
            ConcentrationVector(np.array([-1.0]))


class TestSpecialFunctions(unittest.TestCase):
    """Test the validated digamma and log-gamma wrappers."""

    def test_digamma_at_one(self):
        self.assertAlmostEqual(digamma(1.0), -0.5772156649015329, places=12)

    def test_digamma_recurrence(self):
        for x in (0.3, 1.7, 12.5):
            self.assertAlmostEqual(digamma(x + 1) - digamma(x), 1.0 / x, places=10)

    def test_digamma_rejects_non_positive(self):
        with self.assertRaises(DomainError):
            digamma(0.0)
        with self.assertRaises(DomainError):
            digamma(np.array([1.0, -2.0]))

    def test_log_gamma(self):
        self.assertAlmostEqual(log_gamma(5.0), math.log(24.0), places=12)


class TestLikelihood(unittest.TestCase):
    """Test md_log_likelihood and its gradient."""

    def test_hand_computed_value(self):
        # lnG(2) - lnG(3) + lnG(2) - lnG(1) = -ln 2
        hist = LabelHistogram.from_counts([1, 0])
        value = md_log_likelihood(hist, ConcentrationVector.uniform(2))
        self.assertAlmostEqual(value, -math.log(2.0), places=12)

    def test_stack_is_sum_of_rows(self):
        a = LabelHistogram.from_counts([3, 1, 0])
        b = LabelHistogram.from_counts([0, 2, 5])
        alpha = ConcentrationVector(np.array([0.5, 1.5, 2.0]))
        self.assertAlmostEqual(md_log_likelihood([a, b], alpha),
                               md_log_likelihood(a, alpha) + md_log_likelihood(b, alpha), places=10)

    def test_single_class_is_zero(self):
        value = md_log_likelihood(LabelHistogram.from_counts([7]), ConcentrationVector(np.array([2.5])))
        self.assertAlmostEqual(value, 0.0, places=12)

    def test_class_permutation_invariance(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            counts = rng.integers(0, 25, size=5)
            alpha = rng.uniform(0.1, 4.0, size=5)
            order = rng.permutation(5)
            value = md_log_likelihood(LabelHistogram.from_counts(counts), ConcentrationVector(alpha))
            permuted = md_log_likelihood(LabelHistogram.from_counts(counts[order]), ConcentrationVector(alpha[order]))
            self.assertAlmostEqual(value, permuted, places=9)

    def test_dimension_mismatch(self):
        with self.assertRaises(ShapeError):
            md_log_likelihood(LabelHistogram.from_counts([1, 2]), ConcentrationVector.uniform(3))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            num_classes = int(rng.integers(2, 8))
            alpha = ConcentrationVector(rng.uniform(0.2, 5.0, size=num_classes))
            rows = [LabelHistogram.from_counts(rng.integers(0, 30, size=num_classes)) for _ in range(3)]
            analytic = md_log_likelihood_grad(rows, alpha)
            numeric = np.zeros(num_classes)
            for j in range(num_classes):
                h = 1e-6 * alpha.alpha[j]
                up, down = alpha.alpha.copy(), alpha.alpha.copy()
                up[j] += h
                down[j] -= h
                numeric[j] = (md_log_likelihood(rows, ConcentrationVector(up))
                              - md_log_likelihood(rows, ConcentrationVector(down))) / (2 * h)
            scale = max(np.linalg.norm(analytic), 1e-3)
            self.assertLessEqual(np.linalg.norm(analytic - numeric) / scale, 1e-5)


class TestEstimateConcentration(unittest.TestCase):
    """Test the BFGS concentration estimator."""

    def test_recovers_true_alpha(self):
        truth = ConcentrationVector(np.array([2.0, 2.0, 2.0]))
        estimates = []
        for seed in range(20):
            draws = sample_multinomial_dirichlet(truth, total=20, num_draws=2000, rng_seed=seed)
            result = estimate_concentration(draws)
            self.assertTrue(result.converged)
            estimates.append(result.alpha.alpha)
        mean = np.mean(estimates, axis=0)
        np.testing.assert_allclose(mean, truth.alpha, rtol=0.1)

    def test_likelihood_history_never_decreases(self):
        truth = ConcentrationVector(np.array([0.5, 3.0, 1.0, 1.0]))
        draws = sample_multinomial_dirichlet(truth, total=30, num_draws=300, rng_seed=3)
        result = estimate_concentration(draws)
        self.assertTrue(all(b >= a - 1e-9 for a, b in zip(result.history, result.history[1:])))
        self.assertAlmostEqual(result.log_likelihood, result.history[-1])

    def test_beats_every_grid_point(self):
        truth = ConcentrationVector(np.array([1.5, 3.0]))
        draws = sample_multinomial_dirichlet(truth, total=20, num_draws=300, rng_seed=4)
        best = md_log_likelihood(draws, estimate_concentration(draws).alpha)
        grid = np.linspace(0.05, 10.0, 50)
        for a in grid:
            for b in grid:
                self.assertGreaterEqual(best, md_log_likelihood(draws, ConcentrationVector(np.array([a, b]))) - 1e-6)

    def test_permutation_equivariance(self):
        truth = ConcentrationVector(np.array([0.5, 3.0, 1.5, 1.0]))
        draws = sample_multinomial_dirichlet(truth, total=30, num_draws=400, rng_seed=9)
        order = np.array([2, 0, 3, 1])
        permuted = [LabelHistogram.from_counts(h.counts[order]) for h in draws]
        original = estimate_concentration(draws).alpha.alpha
        reordered = estimate_concentration(permuted).alpha.alpha
        np.testing.assert_allclose(reordered, original[order], rtol=1e-4)

    def test_all_zero_histogram_returns_init(self):
        init = ConcentrationVector(np.array([1.0, 2.0]))
        result = estimate_concentration(LabelHistogram.from_counts([0, 0]), init=init)
        self.assertTrue(result.converged)
        self.assertEqual(result.iterations, 0)
        np.testing.assert_array_equal(result.alpha.alpha, init.alpha)

    def test_single_histogram_follows_proportions(self):
        result = estimate_concentration(LabelHistogram.from_counts([60, 30, 10]))
        np.testing.assert_allclose(result.alpha.normalized(), [0.6, 0.3, 0.1], atol=0.05)

    def test_iteration_cap_warns(self):
        draws = sample_multinomial_dirichlet(ConcentrationVector.uniform(3, 2.0), 20, 200, rng_seed=1)
        with self.assertLogs(level='WARNING'):
            result = estimate_concentration(draws, max_iters=1, tol=1e-12)
        self.assertFalse(result.converged)

    def test_failed_line_search_is_not_convergence(self):
        draws = sample_multinomial_dirichlet(ConcentrationVector(np.array([0.5, 3.0, 1.0])), 20, 200, rng_seed=2)
        with patch.object(Config, 'MAX_BACKTRACKS', 0):
            with self.assertLogs(level='WARNING'):
                result = estimate_concentration(draws)
        self.assertFalse(result.converged)
        self.assertEqual(result.iterations, 1)

    def test_rejects_bad_tolerance(self):
        with self.assertRaises(DomainError):
            estimate_concentration(LabelHistogram.from_counts([1, 1]), tol=0.0)


class TestPartitioning(unittest.TestCase):
    """Test the Dirichlet partitioners and the train/test split."""

    def setUp(self):
        """Set up a pool of 4 classes with 200 samples each."""
        self.labels = np.repeat(np.arange(4), 200)
        self.features = np.arange(self.labels.size, dtype=float)[:, None]
        self.spec = PartitionSpec(num_users=6, num_classes=4, concentration=0.5,
                                  samples_per_user=(20, 30, 40, 25, 35, 50))

    def test_sizes_and_histograms(self):
        datasets = sample_dirichlet_partition(self.spec, self.labels, rng_seed=11, source_features=self.features)
        self.assertEqual([d.num_samples for d in datasets], list(self.spec.samples_per_user))
        for data in datasets:
            np.testing.assert_array_equal(np.bincount(data.labels, minlength=4), data.histogram.counts)
            np.testing.assert_array_equal(self.labels[data.features[:, 0].astype(int)], data.labels)

    def test_without_replacement_when_pool_suffices(self):
        datasets = sample_dirichlet_partition(self.spec, self.labels, rng_seed=11, source_features=self.features)
        used = np.concatenate([d.features[:, 0] for d in datasets])
        self.assertEqual(len(np.unique(used)), used.size)
        self.assertFalse(any(d.sampled_with_replacement for d in datasets))

    def test_deterministic_per_seed(self):
        a = sample_dirichlet_partition(self.spec, self.labels, rng_seed=5)
        b = sample_dirichlet_partition(self.spec, self.labels, rng_seed=5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.labels, y.labels)

    def test_pool_exhaustion_falls_back(self):
        labels = np.repeat(np.arange(2), 3)
        spec = PartitionSpec(num_users=2, num_classes=2, concentration=1.0, samples_per_user=(50, 50))
        with self.assertLogs(level='WARNING'):
            datasets = sample_dirichlet_partition(spec, labels, rng_seed=0)
        self.assertTrue(any(d.sampled_with_replacement for d in datasets))
        self.assertEqual([d.num_samples for d in datasets], [50, 50])

    def test_missing_class_in_pool(self):
        with self.assertRaises(DirichletDataError):
            sample_dirichlet_partition(self.spec, np.repeat(np.arange(3), 10), rng_seed=0)

    def test_grouped_partition_round_robin(self):
        alphas = block_group_alphas(4, 2, high=5.0, low=0.05)
        datasets, groups = sample_grouped_partition(self.spec, alphas, self.labels, rng_seed=2)
        np.testing.assert_array_equal(groups, [0, 1, 0, 1, 0, 1])
        first_block = sum(d.histogram.counts[:2].sum() for d, g in zip(datasets, groups) if g == 0)
        total = sum(d.num_samples for d, g in zip(datasets, groups) if g == 0)
        self.assertGreater(first_block / total, 0.8)

    def test_high_concentration_is_near_uniform(self):
        labels = np.repeat(np.arange(10), 2000)
        spec = PartitionSpec(num_users=20, num_classes=10, concentration=100.0, samples_per_user=(200,) * 20)
        for data in sample_dirichlet_partition(spec, labels, rng_seed=13):
            fractions = data.histogram.counts / data.num_samples
            self.assertTrue(np.all(data.histogram.counts > 0))
            self.assertLess(np.max(np.abs(fractions - 0.1)), 0.1)

    def test_low_concentration_is_skewed(self):
        labels = np.repeat(np.arange(10), 2000)
        spec = PartitionSpec(num_users=20, num_classes=10, concentration=0.01, samples_per_user=(200,) * 20)
        datasets = sample_dirichlet_partition(spec, labels, rng_seed=13)
        present = [int(np.sum(d.histogram.counts > 0.01 * d.num_samples)) for d in datasets]
        self.assertLessEqual(np.median(present), 2)

    def test_block_group_alphas(self):
        alphas = block_group_alphas(10, 3, high=5.0, low=0.1)
        self.assertEqual(len(alphas), 3)
        np.testing.assert_array_equal(np.sum(np.stack(alphas) == 5.0, axis=0), np.ones(10))
        with self.assertRaises(DomainError):
            block_group_alphas(2, 3)

    def test_split_train_test(self):
        data = sample_dirichlet_partition(self.spec, self.labels, rng_seed=1, source_features=self.features)[0]
        train, test = split_train_test(data, 0.2, rng_seed=3)
        self.assertEqual((train.num_samples, test.num_samples), (16, 4))
        self.assertEqual(set(train.features[:, 0]) & set(test.features[:, 0]), set())
        np.testing.assert_array_equal(train.histogram.counts + test.histogram.counts, data.histogram.counts)

    def test_split_keeps_one_training_sample(self):
        one = UserDataset(0, np.zeros((1, 1)), np.array([1]), LabelHistogram.from_counts([0, 1]))
        train, test = split_train_test(one, 0.9, rng_seed=0)
        self.assertEqual((train.num_samples, test.num_samples), (1, 0))


if __name__ == '__main__':
    unittest.main()
