"""
Unit tests for the channel module.
"""

import math
import sys
import unittest
from pathlib import Path
from types import SimpleNamespace

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))
from channel import (
    ChannelError, ChannelInvariantError, ChannelPairState, DeviceProfile, LinkBudget, computation_energy,
    computation_time, large_scale_fading, order_pair, pair_energy, pair_user_energies, place_devices,
    rate_noma_interfered, rate_oma, realize_channels, sample_channel_gain,
)


class TestLinkAndDevices(unittest.TestCase):
    """Test LinkBudget and DeviceProfile validation."""

    def test_budget_rejects_non_positive(self):
        with self.assertRaises(ChannelError):
            LinkBudget(bandwidth_hz=0.0)
        with self.assertRaises(ChannelError):
            LinkBudget(min_distance_m=700.0)

    def test_device_validation(self):
        with self.assertRaises(ChannelError):
            DeviceProfile(user_id=0, cpu_hz=0.0, samples=10)
        with self.assertRaises(ChannelError):
            DeviceProfile(user_id=0, cpu_hz=1e9, samples=-1)

    def test_virtual_device(self):
        device = DeviceProfile.virtual(7)
        self.assertTrue(device.is_virtual)
        self.assertEqual(computation_time(device), 0.0)
        self.assertEqual(computation_energy(device), 0.0)


class TestFading(unittest.TestCase):
    """Test path loss and Rayleigh gains."""

    def setUp(self):
        self.budget = LinkBudget()

    def test_large_scale_formula(self):
        expected = 1.0 * 0.125 ** 2 / (16 * math.pi ** 2 * 100.0 ** 2)
        self.assertAlmostEqual(large_scale_fading(100.0, self.budget) / expected, 1.0, places=12)

    def test_fading_decreases_with_distance(self):
        self.assertGreater(large_scale_fading(50.0, self.budget), large_scale_fading(500.0, self.budget))
        with self.assertRaises(ChannelError):
            large_scale_fading(0.0, self.budget)

    def test_small_scale_mean_is_one(self):
        device = DeviceProfile(user_id=0, cpu_hz=2e9, samples=10, distance_m=100.0)
        draws = sample_channel_gain(device, self.budget, rng_seed=3, size=100000)
        scale = large_scale_fading(100.0, self.budget) / self.budget.noise_variance
        self.assertAlmostEqual(float(np.mean(draws)) / scale, 1.0, delta=0.02)
        self.assertTrue(np.all(draws >= 0))

    def test_same_seed_same_gain(self):
        device = DeviceProfile(user_id=0, cpu_hz=2e9, samples=10)
        self.assertEqual(sample_channel_gain(device, self.budget, 9), sample_channel_gain(device, self.budget, 9))


class TestRates(unittest.TestCase):
    """Test achievable rates."""

    def setUp(self):
        self.budget = LinkBudget(bandwidth_hz=1e6)

    def test_oma_rate(self):
        self.assertAlmostEqual(rate_oma(1.0, 3.0, self.budget), 2e6)
        self.assertEqual(rate_oma(0.0, 3.0, self.budget), 0.0)

    def test_noma_rate_with_interference(self):
        self.assertAlmostEqual(rate_noma_interfered(1.0, 1.0, 6.0, 2.0, self.budget), 1e6 * math.log2(3.0))
        self.assertAlmostEqual(rate_noma_interfered(1.0, 0.0, 3.0, 2.0, self.budget), rate_oma(1.0, 3.0, self.budget))

    def test_gain_ordering_enforced(self):
        with self.assertRaises(ChannelInvariantError):
            rate_noma_interfered(1.0, 1.0, 1.0, 2.0, self.budget)
        with self.assertRaises(ChannelInvariantError):
            ChannelPairState(gain1=1.0, gain2=2.0, subchannel_id=0)

    def test_negative_power(self):
        with self.assertRaises(ChannelError):
            rate_oma(-1.0, 1.0, self.budget)

    def test_pair_state_from_user_gains(self):
        state = ChannelPairState.from_user_gains(1.0, 4.0, subchannel_id=2)
        self.assertFalse(state.first_is_strong)
        self.assertEqual((state.gain1, state.gain2), (4.0, 1.0))
        self.assertEqual((state.gain_first, state.gain_second), (1.0, 4.0))


class TestComputationAndEnergy(unittest.TestCase):
    """Test local computation and energy bookkeeping."""

    def setUp(self):
        self.fast = DeviceProfile(user_id=0, cpu_hz=2e9, samples=100, cycles_per_bit=1e7, energy_coeff=1e-28)
        self.slow = DeviceProfile(user_id=1, cpu_hz=1e9, samples=100, cycles_per_bit=1e7, energy_coeff=1e-28)

    def test_computation_time_and_energy(self):
        self.assertAlmostEqual(computation_time(self.fast), 0.5)
        self.assertEqual(computation_time(self.fast, 1.1e6), computation_time(self.fast))
        self.assertAlmostEqual(computation_time(self.slow, 1.1e6), 2 * computation_time(self.fast))
        with self.assertRaises(ChannelError):
            computation_time(self.fast, 0.0)
        # kappa * T_COM * f^3
        self.assertAlmostEqual(computation_energy(self.fast), 1e-28 * 0.5 * 8e27)

    def test_order_pair(self):
        self.assertEqual(order_pair(self.slow, self.fast), (self.fast, self.slow))
        twin = DeviceProfile(user_id=5, cpu_hz=2e9, samples=100)
        self.assertEqual(order_pair(twin, self.fast)[0].user_id, 0)

    def test_pair_energies(self):
        powers = SimpleNamespace(p11=0.2, p12=0.1, p2=0.3)
        times = SimpleNamespace(t_off_solo=2.0, t_off_noma=4.0)
        e1, e2 = pair_user_energies(self.fast, self.slow, powers, times)
        self.assertAlmostEqual(e1, computation_energy(self.fast) + 0.4 + 0.4)
        self.assertAlmostEqual(e2, computation_energy(self.slow) + 1.2)
        self.assertAlmostEqual(pair_energy(self.fast, self.slow, powers, times), e1 + e2)


class TestRealizeAndPlace(unittest.TestCase):
    """Test per-round channel realization and device placement."""

    def setUp(self):
        self.budget = LinkBudget()
        self.devices = place_devices([50, 60, 70, 80], self.budget, rng_seed=1)

    def test_placement_inside_cell(self):
        self.assertEqual([d.user_id for d in self.devices], [0, 1, 2, 3])
        for device in self.devices:
            self.assertGreaterEqual(device.distance_m, self.budget.min_distance_m)
            self.assertLessEqual(device.distance_m, self.budget.cell_radius_m)
            self.assertTrue(1.8e9 <= device.cpu_hz <= 2.2e9)

    def test_gains_independent_of_other_devices(self):
        full = realize_channels(self.devices, 3, round_index=2, budget=self.budget, master_seed=11)
        subset = realize_channels(self.devices[2:], 3, round_index=2, budget=self.budget, master_seed=11)
        np.testing.assert_array_equal(full[2:], subset)
        other_round = realize_channels(self.devices, 3, round_index=3, budget=self.budget, master_seed=11)
        self.assertFalse(np.array_equal(full, other_round))

    def test_virtual_devices_get_zero_gain(self):
        gains = realize_channels(self.devices + [DeviceProfile.virtual(9)], 2, 1, self.budget, 0)
        np.testing.assert_array_equal(gains[-1], [0.0, 0.0])


if __name__ == '__main__':
    unittest.main()
