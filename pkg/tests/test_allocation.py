"""
Unit tests for the allocation module.

Tests the closed-form pair power allocation against the numerical oracle,
the OMA and fixed-power baselines, and the swap-matching routines.
"""

import math
import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))
from allocation import (
    AccessMode, AllocationContext, AllocationDomainError, Matching, OracleSizeError, PowerMode,
    allocate_pair, brute_force_matching, deadline_tight_times, energy_curvature, enumerate_matchings,
    fixed_power_allocate, kkt_audit, kkt_power_allocate, match_subchannels, matching_energy,
    min_power_second_user, oma_power_allocate, pad_with_virtual_users, power_oracle, random_matching,
    rate_constraint_hessian, swap_blocking_pair,
)
from channel import (
    ChannelPairState, DeviceProfile, LinkBudget, computation_time, place_devices, rate_noma_interfered,
    rate_oma, realize_channels,
)

MODEL_BITS = 1.1e6


class PairFixture(unittest.TestCase):
    """Two devices finishing computation at 0.5 s and 1.0 s."""

    def setUp(self):
        self.budget = LinkBudget()
        self.first = DeviceProfile(user_id=0, cpu_hz=2e9, samples=100)
        self.second = DeviceProfile(user_id=1, cpu_hz=1e9, samples=100)
        self.devices = (self.first, self.second)
        self.t_max = 3.0

    def strong_first(self) -> ChannelPairState:
        return ChannelPairState.from_user_gains(2e6, 1e6, subchannel_id=0)

    def weak_first(self) -> ChannelPairState:
        return ChannelPairState.from_user_gains(1e6, 3e6, subchannel_id=0)


class TestTimes(PairFixture):
    """Test deadline-tight offloading windows."""

    def test_windows(self):
        times = deadline_tight_times(self.first, self.second, self.t_max)
        self.assertAlmostEqual(times.t_off_solo, 0.5)
        self.assertAlmostEqual(times.t_off_noma, 2.0)

    def test_deadline_before_computation(self):
        self.assertIsNone(deadline_tight_times(self.first, self.second, 0.9))

    def test_wrong_order(self):
        with self.assertRaises(AllocationDomainError):
            deadline_tight_times(self.second, self.first, self.t_max)

    def test_min_power(self):
        expected = (2 ** (MODEL_BITS / (1e6 * 2.0)) - 1) / 1e6
        self.assertAlmostEqual(min_power_second_user(MODEL_BITS, 2.0, 1e6, self.budget) / expected, 1.0)
        self.assertEqual(min_power_second_user(0.0, 2.0, 1e6, self.budget), 0.0)
        self.assertEqual(min_power_second_user(MODEL_BITS, 0.0, 1e6, self.budget), math.inf)


class TestKKTAllocation(PairFixture):
    """Test the closed-form allocation against its constraints and the oracle."""

    def assert_data_met(self, solution, pair):
        times = solution.times
        g_first, g_second = pair.gain_first, pair.gain_second
        if pair.first_is_strong:
            bits_first = times.t_off_solo * rate_oma(solution.p11, g_first, self.budget) + \
                times.t_off_noma * rate_noma_interfered(solution.p12, solution.p2, g_first, g_second, self.budget)
            bits_second = times.t_off_noma * rate_oma(solution.p2, g_second, self.budget)
        else:
            bits_first = times.t_off_solo * rate_oma(solution.p11, g_first, self.budget) + \
                times.t_off_noma * rate_oma(solution.p12, g_first, self.budget)
            bits_second = times.t_off_noma * rate_noma_interfered(solution.p2, solution.p12, g_second,
                                                                  g_first, self.budget)
        self.assertAlmostEqual(bits_first / MODEL_BITS, 1.0, places=6)
        self.assertAlmostEqual(bits_second / MODEL_BITS, 1.0, places=6)

    def test_strong_first_user(self):
        pair = self.strong_first()
        solution = kkt_power_allocate(pair, self.devices, MODEL_BITS, self.t_max, self.budget)
        self.assertTrue(solution.feasible)
        self.assert_data_met(solution, pair)
        self.assertGreaterEqual(min(solution.p11, solution.p12, solution.p2), 0.0)

    def test_weak_first_user(self):
        pair = self.weak_first()
        solution = kkt_power_allocate(pair, self.devices, MODEL_BITS, self.t_max, self.budget)
        self.assertTrue(solution.feasible)
        self.assert_data_met(solution, pair)

    def test_matches_oracle(self):
        for pair in (self.strong_first(), self.weak_first()):
            kkt = kkt_power_allocate(pair, self.devices, MODEL_BITS, self.t_max, self.budget)
            oracle = power_oracle(pair, self.devices, MODEL_BITS, self.t_max, self.budget)
            self.assertTrue(oracle.feasible)
            self.assertLessEqual(kkt.transmit_energy, oracle.transmit_energy * (1 + 1e-6))
            self.assertLessEqual(abs(kkt.transmit_energy - oracle.transmit_energy) / oracle.transmit_energy, 1e-4)

    def test_audit_passes(self):
        pair = self.strong_first()
        solution = kkt_power_allocate(pair, self.devices, MODEL_BITS, self.t_max, self.budget)
        audit = kkt_audit(solution, pair, self.devices, MODEL_BITS, self.budget)
        self.assertTrue(audit.satisfied(), msg=str(audit))
        self.assertIn('data', audit.active)

    def test_audit_rejects_infeasible(self):
        solution = kkt_power_allocate(self.strong_first(), self.devices, MODEL_BITS, 0.5, self.budget)
        with self.assertRaises(AllocationDomainError):
            kkt_audit(solution, self.strong_first(), self.devices, MODEL_BITS, self.budget)

    def test_infeasible_deadline(self):
        solution = kkt_power_allocate(self.strong_first(), self.devices, MODEL_BITS, 0.8, self.budget)
        self.assertFalse(solution.feasible)
        self.assertTrue(solution.reason)
        self.assertEqual(solution.energy, math.inf)

    def test_power_cap_infeasible(self):
        weak = (DeviceProfile(0, 2e9, 100, max_power_w=1e-9), DeviceProfile(1, 1e9, 100, max_power_w=1e-9))
        solution = kkt_power_allocate(self.strong_first(), weak, MODEL_BITS, self.t_max, self.budget)
        self.assertFalse(solution.feasible)

    def test_energy_includes_computation(self):
        solution = kkt_power_allocate(self.strong_first(), self.devices, MODEL_BITS, self.t_max, self.budget)
        self.assertGreater(solution.energy, solution.transmit_energy)

    def test_convexity_checks(self):
        rng = np.random.default_rng(11)
        cap = self.first.max_power_w
        for pair in (self.strong_first(), self.weak_first()):
            for p11, p12 in rng.uniform(0.05 * cap, cap, size=(100, 2)):
                hessian = rate_constraint_hessian(p11, p12, pair, self.devices, MODEL_BITS, self.t_max, self.budget)
                eigenvalues = np.linalg.eigvalsh(hessian)
                self.assertGreater(eigenvalues.min(), -1e-6 * abs(eigenvalues).max())

        pair = self.strong_first()
        solution = kkt_power_allocate(pair, self.devices, MODEL_BITS, self.t_max, self.budget)
        self.assertGreater(energy_curvature(solution.p11, pair, self.devices, MODEL_BITS,
                                            self.t_max, self.budget), 0.0)


class TestBaselines(PairFixture):
    """Test OMA, fixed-power and virtual-user pairs."""

    def test_noma_not_worse_than_oma(self):
        for pair in (self.strong_first(), self.weak_first()):
            noma = kkt_power_allocate(pair, self.devices, MODEL_BITS, self.t_max, self.budget)
            oma = oma_power_allocate(pair, self.devices, MODEL_BITS, self.t_max, self.budget)
            self.assertTrue(oma.feasible)
            self.assertLessEqual(noma.transmit_energy, oma.transmit_energy * (1 + 1e-9))

    def test_kkt_not_worse_than_fixed(self):
        pair = self.strong_first()
        fixed = fixed_power_allocate(pair, self.devices, MODEL_BITS, self.t_max, self.budget, fraction=0.5)
        kkt = kkt_power_allocate(pair, self.devices, MODEL_BITS, self.t_max, self.budget)
        self.assertTrue(fixed.feasible)
        self.assertEqual((fixed.p11, fixed.p2), (0.5, 0.5))
        self.assertLess(kkt.energy, fixed.energy)

    def test_fixed_fraction_validated(self):
        with self.assertRaises(AllocationDomainError):
            fixed_power_allocate(self.strong_first(), self.devices, MODEL_BITS, self.t_max, self.budget, 0.0)

    def test_fixed_power_oma(self):
        solution = fixed_power_allocate(self.strong_first(), self.devices, MODEL_BITS, self.t_max, self.budget,
                                        access_mode=AccessMode.OMA)
        self.assertTrue(solution.feasible)
        self.assertEqual(solution.p12, 0.0)

    def test_virtual_partner(self):
        virtual = DeviceProfile.virtual(5)
        solution = allocate_pair(self.second, virtual, 1e6, 0.0, 0, MODEL_BITS, self.t_max, self.budget)
        self.assertTrue(solution.feasible)
        self.assertEqual((solution.p11, solution.p12), (0.0, 0.0))
        expected = min_power_second_user(MODEL_BITS, self.t_max - computation_time(self.second), 1e6, self.budget)
        self.assertAlmostEqual(solution.p2 / expected, 1.0)
        self.assertEqual(solution.second_id, self.second.user_id)

    def test_allocate_pair_orders_users(self):
        solution = allocate_pair(self.second, self.first, 1e6, 2e6, 0, MODEL_BITS, self.t_max, self.budget,
                                 power_mode=PowerMode.KKT)
        self.assertEqual((solution.first_id, solution.second_id), (0, 1))


class TestMatching(unittest.TestCase):
    """Test matchings and the swap algorithm on a 4-user, 2-channel instance."""

    def setUp(self):
        self.budget = LinkBudget()
        self.devices = place_devices([60, 80, 100, 120], self.budget, rng_seed=3)
        gains = realize_channels(self.devices, 2, round_index=1, budget=self.budget, master_seed=3)
        self.context = AllocationContext(self.devices, {d.user_id: gains[i] for i, d in enumerate(self.devices)},
                                         MODEL_BITS, 6.0, self.budget)
        self.users = [0, 1, 2, 3]
        self.channels = [0, 1]

    def test_matching_validation(self):
        with self.assertRaises(AllocationDomainError):
            Matching({0: (1, 1)})
        with self.assertRaises(AllocationDomainError):
            Matching({0: (0, 1), 1: (1, 2)})

    def test_matching_helpers(self):
        mu = Matching({0: (2, 0), 1: (1, 3)})
        self.assertEqual(mu.pairs[0], (0, 2))
        self.assertEqual(mu.partner(3), 1)
        swapped = mu.swapped(0, 1)
        self.assertEqual(swapped.channel_of(1), 0)
        self.assertEqual(swapped.channel_of(0), 1)
        with self.assertRaises(AllocationDomainError):
            mu.swapped(0, 2)

    def test_random_matching_covers_users(self):
        mu = random_matching(self.users, self.channels, rng_seed=4)
        self.assertEqual(mu.users, self.users)
        with self.assertRaises(AllocationDomainError):
            random_matching([0, 1, 2], self.channels, rng_seed=4)

    def test_enumeration_count(self):
        self.assertEqual(len(list(enumerate_matchings(self.users, self.channels))), 6)

    def test_swap_matching_is_stable(self):
        result = match_subchannels(self.users, self.channels, self.context, rng_seed=7)
        self.assertTrue(result.converged)
        self.assertTrue(all(b <= a * (1 + 1e-12) for a, b in zip(result.energy_trace, result.energy_trace[1:])))
        self.assertEqual(len(result.energy_trace), result.iterations + 1)
        mu = result.matching
        for m in self.users:
            for j in self.users:
                if m != j and mu.channel_of(m) != mu.channel_of(j):
                    self.assertFalse(swap_blocking_pair(mu, m, j, self.context))

    def test_brute_force_is_optimal(self):
        best = brute_force_matching(self.users, self.channels, self.context)
        enumerated = min(matching_energy(mu, self.context) for mu in enumerate_matchings(self.users, self.channels))
        self.assertAlmostEqual(matching_energy(best, self.context) / enumerated, 1.0, places=12)
        swap = match_subchannels(self.users, self.channels, self.context, rng_seed=1)
        self.assertLessEqual(matching_energy(best, self.context),
                             matching_energy(swap.matching, self.context) * (1 + 1e-12))

    def test_initial_matching_must_cover(self):
        with self.assertRaises(AllocationDomainError):
            match_subchannels(self.users, self.channels, self.context, rng_seed=0,
                              initial=Matching({0: (0, 1), 1: (2, 4)}))

    def test_brute_force_size_limit(self):
        users = list(range(14))
        with self.assertRaises(OracleSizeError):
            brute_force_matching(users, list(range(7)), self.context)

    def test_padding(self):
        padded = pad_with_virtual_users(self.devices[:3], 2)
        self.assertEqual(len(padded), 4)
        self.assertTrue(padded[-1].is_virtual)
        self.assertEqual(padded[-1].user_id, 3)
        with self.assertRaises(AllocationDomainError):
            pad_with_virtual_users(self.devices, 1)

    def test_missing_gains(self):
        with self.assertRaises(AllocationDomainError):
            AllocationContext(self.devices, {0: [1.0, 1.0]}, MODEL_BITS, 6.0, self.budget)


if __name__ == '__main__':
    unittest.main()
